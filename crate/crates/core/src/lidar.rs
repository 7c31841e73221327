//! Limited-FoV spinning LiDAR simulation.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::scene::{GroundTruthOracle, SceneDescription, SensorPose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanConfig {
    pub azimuth_count: usize,
    pub elevation_count: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub max_range: f64,
    /// Standard deviation of the along-ray range noise.
    pub noise_std: f64,
    pub noise_seed: u64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            azimuth_count: 360,
            elevation_count: 32,
            elevation_min_deg: -15.0,
            elevation_max_deg: 5.0,
            max_range: 30.0,
            noise_std: 0.02,
            noise_seed: 0,
        }
    }
}

impl ScanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.azimuth_count == 0 || self.elevation_count == 0 {
            return Err(Error::Config("ray counts must be at least 1".into()));
        }
        if !(self.max_range > 0.0) {
            return Err(Error::Config("max_range must be positive".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        if !(self.elevation_min_deg <= self.elevation_max_deg)
            || self.elevation_min_deg < -90.0
            || self.elevation_max_deg > 90.0
        {
            return Err(Error::Config("elevation range must be ordered within [-90, 90]".into()));
        }
        Ok(())
    }

    /// Elevation of beam `i` in degrees; endpoints inclusive.
    pub fn elevation_deg(&self, i: usize) -> f64 {
        if self.elevation_count == 1 {
            0.5 * (self.elevation_min_deg + self.elevation_max_deg)
        } else {
            let f = i as f64 / (self.elevation_count - 1) as f64;
            self.elevation_min_deg + f * (self.elevation_max_deg - self.elevation_min_deg)
        }
    }

    pub fn azimuth_deg(&self, j: usize) -> f64 {
        360.0 * j as f64 / self.azimuth_count as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RayOutcome {
    Hit { point: Vec3 },
    Miss { max_range: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RayRecord {
    pub dir: Vec3,
    pub outcome: RayOutcome,
}

impl RayRecord {
    /// Last point certified empty-or-surface along this ray.
    pub fn end_point(&self, origin: Vec3) -> Vec3 {
        match self.outcome {
            RayOutcome::Hit { point } => point,
            RayOutcome::Miss { max_range } => origin + self.dir * max_range,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorScan {
    pub origin: Vec3,
    pub rays: Vec<RayRecord>,
}

impl SensorScan {
    pub fn hits(&self) -> impl Iterator<Item = Vec3> + '_ {
        self.rays.iter().filter_map(|r| match r.outcome {
            RayOutcome::Hit { point } => Some(point),
            RayOutcome::Miss { .. } => None,
        })
    }
}

/// One ray per (azimuth, elevation) cell. Hit ranges are perturbed by
/// Gaussian noise along the ray and clamped to stay positive.
pub fn scan(scene: &SceneDescription, pose: &SensorPose, cfg: &ScanConfig) -> Result<SensorScan> {
    cfg.validate()?;
    if !scene.domain_bounds.contains(pose.position) {
        return Err(Error::InvalidArgument("sensor pose outside the domain".into()));
    }
    if scene.inside_geometry(pose.position) {
        return Err(Error::PoseInsideGeometry(pose.position.to_array()));
    }
    let oracle = GroundTruthOracle::new(scene);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed);
    let origin = pose.position;

    let mut rays = Vec::with_capacity(cfg.azimuth_count * cfg.elevation_count);
    for j in 0..cfg.azimuth_count {
        let az = cfg.azimuth_deg(j).to_radians();
        for i in 0..cfg.elevation_count {
            let el = cfg.elevation_deg(i).to_radians();
            let dir = pose.to_world(Vec3::from_spherical(az, el)).normalized();
            let outcome = match oracle.intersect(origin, dir).filter(|&t| t <= cfg.max_range) {
                Some(t) => {
                    let t = if cfg.noise_std > 0.0 {
                        (t + noise.sample(&mut rng)).max(1e-6)
                    } else {
                        t
                    };
                    RayOutcome::Hit { point: origin + dir * t }
                }
                None => RayOutcome::Miss { max_range: cfg.max_range },
            };
            rays.push(RayRecord { dir, outcome });
        }
    }
    Ok(SensorScan { origin, rays })
}

/// Scan every sensor pose of the scene; pose `k` uses noise seed
/// `cfg.noise_seed + k`.
pub fn scan_all(scene: &SceneDescription, cfg: &ScanConfig) -> Result<Vec<SensorScan>> {
    scene
        .sensors
        .iter()
        .enumerate()
        .map(|(k, pose)| {
            let c = ScanConfig { noise_seed: cfg.noise_seed.wrapping_add(k as u64), ..cfg.clone() };
            scan(scene, pose, &c)
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// One `x y z` triple per line.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.points.len() * 32);
        for p in &self.points {
            let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
        }
        s
    }

    /// Parse the text format; blank lines and `#` comments are skipped.
    pub fn from_reader(r: impl Read) -> Result<Self> {
        let mut points = Vec::new();
        for (lineno, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = t
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
            if vals.len() != 3 {
                return Err(Error::Format(format!("line {}: expected 3 values", lineno + 1)));
            }
            points.push(Vec3::new(vals[0], vals[1], vals[2]));
        }
        Ok(PointCloud { points })
    }
}

/// Concatenate the hit points of all scans (no deduplication).
pub fn merge_scans(scans: Vec<SensorScan>) -> Result<(PointCloud, Vec<SensorScan>)> {
    if scans.is_empty() {
        return Err(Error::EmptyInput("merge_scans needs at least one scan"));
    }
    let points = scans.iter().flat_map(|s| s.hits()).collect();
    Ok((PointCloud { points }, scans))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Aabb;
    use crate::scene::{generate_canyon, CanyonSpec};

    fn plane_scene() -> SceneDescription {
        SceneDescription {
            domain_bounds: Aabb::new(Vec3::new(-5.0, -5.0, -1.0), Vec3::new(5.0, 5.0, 5.0)),
            boxes: vec![],
            rects: vec![Aabb::new(Vec3::new(-5.0, -5.0, 0.0), Vec3::new(5.0, 5.0, 0.0))],
            sensors: vec![SensorPose::at(Vec3::new(0.0, 0.0, 2.0))],
        }
    }

    #[test]
    fn single_downward_ray() {
        let cfg = ScanConfig {
            azimuth_count: 1,
            elevation_count: 1,
            elevation_min_deg: -90.0,
            elevation_max_deg: -90.0,
            noise_std: 0.0,
            ..ScanConfig::default()
        };
        let s = scan(&plane_scene(), &plane_scene().sensors[0], &cfg).unwrap();
        assert_eq!(s.rays.len(), 1);
        let RayOutcome::Hit { point } = s.rays[0].outcome else { panic!("expected hit") };
        assert!(point.norm() < 1e-12);
    }

    #[test]
    fn ray_count_and_fov() {
        let scene = generate_canyon(0, &CanyonSpec::default()).unwrap();
        let cfg = ScanConfig { azimuth_count: 90, elevation_count: 8, ..ScanConfig::default() };
        let s = scan(&scene, &scene.sensors[0], &cfg).unwrap();
        assert_eq!(s.rays.len(), 90 * 8);
        for r in &s.rays {
            let el = r.dir.z.asin().to_degrees();
            assert!((-15.0 - 1e-9..=5.0 + 1e-9).contains(&el));
        }
        // rooftop slab never receives a hit
        let roof = scene.boxes[2];
        assert!(s.hits().all(|p| roof.distance_to(p) > 0.1));
    }

    #[test]
    fn noisy_scan_is_deterministic() {
        let scene = generate_canyon(0, &CanyonSpec::default()).unwrap();
        let cfg = ScanConfig { azimuth_count: 60, elevation_count: 4, noise_std: 0.05, ..ScanConfig::default() };
        let a = scan(&scene, &scene.sensors[1], &cfg).unwrap();
        let b = scan(&scene, &scene.sensors[1], &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hits_lie_on_surfaces() {
        let scene = generate_canyon(3, &CanyonSpec::default()).unwrap();
        let oracle = GroundTruthOracle::new(&scene);
        let cfg = ScanConfig { azimuth_count: 120, elevation_count: 8, noise_std: 0.0, ..ScanConfig::default() };
        for s in scan_all(&scene, &cfg).unwrap() {
            for r in &s.rays {
                if let RayOutcome::Hit { point } = r.outcome {
                    assert!(oracle.surface_distance(point) <= 1e-6);
                    let t = (point - s.origin).norm();
                    assert!((s.origin + r.dir * t - point).norm() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn pose_inside_geometry_rejected() {
        let scene = generate_canyon(0, &CanyonSpec::default()).unwrap();
        let wall = scene.boxes[0];
        let inside = SensorPose::at(Vec3::new(0.0, 0.5 * (wall.min.y + wall.max.y), 1.0));
        assert!(matches!(scan(&scene, &inside, &ScanConfig::default()), Err(Error::PoseInsideGeometry(_))));
    }

    #[test]
    fn merge_concatenates() {
        let origin = Vec3::ZERO;
        let hit = |x: f64| RayRecord {
            dir: Vec3::new(1.0, 0.0, 0.0),
            outcome: RayOutcome::Hit { point: Vec3::new(x, 0.0, 0.0) },
        };
        let miss = RayRecord { dir: Vec3::new(1.0, 0.0, 0.0), outcome: RayOutcome::Miss { max_range: 5.0 } };
        let a = SensorScan { origin, rays: vec![hit(1.0), hit(2.0), hit(3.0)] };
        let b = SensorScan { origin, rays: vec![hit(1.0), hit(2.0), hit(3.0), hit(4.0)] };
        let (cloud, scans) = merge_scans(vec![a.clone(), b]).unwrap();
        assert_eq!(cloud.len(), 7);
        assert_eq!(scans.len(), 2);

        let (cloud, scans) = merge_scans(vec![SensorScan { origin, rays: vec![miss; 3] }]).unwrap();
        assert!(cloud.is_empty());
        assert_eq!(scans.len(), 1);

        let (cloud, _) = merge_scans(vec![a.clone(), a]).unwrap();
        assert_eq!(cloud.len(), 6);

        assert!(matches!(merge_scans(vec![]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn point_cloud_text_roundtrip() {
        let cloud = PointCloud { points: vec![Vec3::new(0.1, -2.5, 3.0), Vec3::new(1e-3, 0.0, 7.25)] };
        let text = format!("# header\n\n{}", cloud.to_text());
        let back = PointCloud::from_reader(text.as_bytes()).unwrap();
        assert_eq!(back, cloud);
        assert!(PointCloud::from_reader("1 2\n".as_bytes()).is_err());
    }
}
