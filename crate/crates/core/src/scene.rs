//! Synthetic street-canyon scenes and exact ray casting against them.
//!
//! A scene is a handful of axis-aligned boxes and finite rectangles inside a
//! domain box, plus the sensor poses that will scan it. The canyon generator
//! always places a rooftop slab high above the sensors so that part of the
//! scene is never observed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Aabb, Vec3};

/// Tolerance on `|dir| - 1` accepted by [`ray_cast`].
pub const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorPose {
    pub position: Vec3,
    #[serde(default)]
    pub yaw_deg: f64,
    #[serde(default)]
    pub pitch_deg: f64,
}

impl SensorPose {
    pub fn at(position: Vec3) -> Self {
        SensorPose { position, yaw_deg: 0.0, pitch_deg: 0.0 }
    }

    /// Rotate a sensor-frame direction into the world frame (pitch about
    /// the sensor y axis, then yaw about world z).
    pub fn to_world(&self, d: Vec3) -> Vec3 {
        let (sp, cp) = self.pitch_deg.to_radians().sin_cos();
        let (sy, cy) = self.yaw_deg.to_radians().sin_cos();
        let p = Vec3::new(d.x * cp - d.z * sp, d.y, d.x * sp + d.z * cp);
        Vec3::new(p.x * cy - p.y * sy, p.x * sy + p.y * cy, p.z)
    }
}

/// Serialized as JSON with the fixed keys `domain_bounds`, `boxes`, `rects`
/// and `sensors`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDescription {
    pub domain_bounds: Aabb,
    pub boxes: Vec<Aabb>,
    pub rects: Vec<Aabb>,
    pub sensors: Vec<SensorPose>,
}

impl SceneDescription {
    pub fn validate(&self) -> Result<()> {
        let ext = self.domain_bounds.extent();
        if !(ext.x > 0.0 && ext.y > 0.0 && ext.z > 0.0) {
            return Err(Error::InvalidScene("domain_bounds has zero or negative extent".into()));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            let e = b.extent();
            if !(e.x > 0.0 && e.y > 0.0 && e.z > 0.0) {
                return Err(Error::InvalidScene(format!("box {i} is degenerate")));
            }
            if !self.domain_bounds.contains_box(b) {
                return Err(Error::InvalidScene(format!("box {i} leaves the domain")));
            }
        }
        for (i, r) in self.rects.iter().enumerate() {
            let e = r.extent();
            let flat = (0..3).filter(|&a| e[a] == 0.0).count();
            let negative = (0..3).any(|a| e[a] < 0.0);
            if flat != 1 || negative {
                return Err(Error::InvalidScene(format!(
                    "rect {i} must have zero extent along exactly one axis"
                )));
            }
            if !self.domain_bounds.contains_box(r) {
                return Err(Error::InvalidScene(format!("rect {i} leaves the domain")));
            }
        }
        for s in &self.sensors {
            if !self.domain_bounds.contains(s.position) {
                return Err(Error::InvalidScene(format!(
                    "sensor at {:?} is outside the domain",
                    s.position.to_array()
                )));
            }
            if self.inside_geometry(s.position) {
                return Err(Error::PoseInsideGeometry(s.position.to_array()));
            }
        }
        Ok(())
    }

    pub fn primitives(&self) -> impl Iterator<Item = &Aabb> {
        self.boxes.iter().chain(self.rects.iter())
    }

    /// True if `p` lies inside or on any primitive.
    pub fn inside_geometry(&self, p: Vec3) -> bool {
        self.primitives().any(|b| b.contains(p))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let scene: SceneDescription = serde_json::from_str(s)?;
        scene.validate()?;
        Ok(scene)
    }
}

/// Exact point-membership and ray queries against a scene.
pub struct GroundTruthOracle<'a> {
    scene: &'a SceneDescription,
}

impl<'a> GroundTruthOracle<'a> {
    pub fn new(scene: &'a SceneDescription) -> Self {
        GroundTruthOracle { scene }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        self.scene.inside_geometry(p)
    }

    /// Distance from `p` to the nearest primitive surface.
    pub fn surface_distance(&self, p: Vec3) -> f64 {
        self.scene
            .primitives()
            .map(|b| b.surface_distance(p))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<f64> {
        self.scene
            .primitives()
            .filter_map(|b| b.ray_entry(origin, dir))
            .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.min(t))))
    }
}

/// Nearest intersection along a unit ray, or `None` beyond `max_range`.
pub fn ray_cast(
    scene: &SceneDescription,
    origin: Vec3,
    dir: Vec3,
    max_range: f64,
) -> Result<Option<f64>> {
    let n = dir.norm();
    if !((n - 1.0).abs() <= UNIT_TOLERANCE) {
        return Err(Error::NonUnitDirection(n));
    }
    Ok(GroundTruthOracle::new(scene)
        .intersect(origin, dir)
        .filter(|&t| t <= max_range))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CanyonSpec {
    /// Domain extent along the street (x).
    pub length: f64,
    /// Domain half-extent across the street (y).
    pub half_width: f64,
    pub ground_depth: f64,
    pub ceiling: f64,
    pub street_half_width: f64,
    pub wall_thickness: f64,
    pub wall_height: f64,
    /// Random jitter applied to wall offsets, heights and end points.
    pub jitter: f64,
    pub rooftop_thickness: f64,
    /// How far the rooftop slab overhangs the street from its wall.
    pub rooftop_overhang: f64,
    pub sensor_height: f64,
    pub sensor_count: usize,
    pub sensor_spacing: f64,
}

impl Default for CanyonSpec {
    fn default() -> Self {
        CanyonSpec {
            length: 20.0,
            half_width: 6.0,
            ground_depth: 1.0,
            ceiling: 6.0,
            street_half_width: 3.5,
            wall_thickness: 0.5,
            wall_height: 4.0,
            jitter: 0.4,
            rooftop_thickness: 0.3,
            rooftop_overhang: 1.5,
            sensor_height: 1.7,
            sensor_count: 5,
            sensor_spacing: 3.0,
        }
    }
}

impl CanyonSpec {
    fn validate(&self) -> Result<()> {
        let positive = [
            ("length", self.length),
            ("half_width", self.half_width),
            ("ground_depth", self.ground_depth),
            ("ceiling", self.ceiling),
            ("street_half_width", self.street_half_width),
            ("wall_thickness", self.wall_thickness),
            ("wall_height", self.wall_height),
            ("rooftop_thickness", self.rooftop_thickness),
            ("sensor_height", self.sensor_height),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidScene(format!("canyon `{name}` must be positive")));
            }
        }
        if self.jitter < 0.0 || self.rooftop_overhang < 0.0 || self.sensor_spacing < 0.0 {
            return Err(Error::InvalidScene("jitter, overhang and spacing must be non-negative".into()));
        }
        if self.sensor_count == 0 {
            return Err(Error::InvalidScene("canyon needs at least one sensor".into()));
        }
        if self.street_half_width - self.jitter <= self.rooftop_overhang {
            return Err(Error::InvalidScene("rooftop overhang reaches across the street".into()));
        }
        if self.street_half_width + self.jitter + self.wall_thickness >= self.half_width {
            return Err(Error::InvalidScene("walls do not fit inside the domain".into()));
        }
        if self.wall_height + self.jitter + self.rooftop_thickness >= self.ceiling {
            return Err(Error::InvalidScene("rooftop does not fit below the ceiling".into()));
        }
        if self.sensor_height >= self.wall_height - self.jitter {
            return Err(Error::InvalidScene("sensors must sit below the wall tops".into()));
        }
        let span = self.sensor_spacing * (self.sensor_count - 1) as f64;
        if span >= self.length {
            return Err(Error::InvalidScene("sensor track is longer than the street".into()));
        }
        Ok(())
    }
}

/// Deterministic street canyon: ground plane at z = 0, one wall on each side
/// of the street, and a rooftop slab on top of the +y wall that overhangs
/// the street well above the sensors' vertical field of view.
pub fn generate_canyon(seed: u64, spec: &CanyonSpec) -> Result<SceneDescription> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jit = |scale: f64| -> f64 {
        if spec.jitter == 0.0 {
            0.0
        } else {
            rng.random_range(-spec.jitter..=spec.jitter) * scale
        }
    };

    let hx = spec.length / 2.0;
    let domain = Aabb::new(
        Vec3::new(-hx, -spec.half_width, -spec.ground_depth),
        Vec3::new(hx, spec.half_width, spec.ceiling),
    );
    let ground = Aabb::new(Vec3::new(-hx, -spec.half_width, 0.0), Vec3::new(hx, spec.half_width, 0.0));

    let end_margin = (hx * 0.1).max(spec.jitter);
    let mut walls = Vec::with_capacity(2);
    for side in [-1.0f64, 1.0] {
        let inner = spec.street_half_width + jit(1.0);
        let height = spec.wall_height + jit(1.0);
        let x0 = -hx + end_margin + jit(0.5).abs();
        let x1 = hx - end_margin - jit(0.5).abs();
        let (y0, y1) = if side > 0.0 {
            (inner, inner + spec.wall_thickness)
        } else {
            (-inner - spec.wall_thickness, -inner)
        };
        walls.push(Aabb::new(Vec3::new(x0, y0, 0.0), Vec3::new(x1, y1, height)));
    }
    let host = walls[1];
    let rooftop = Aabb::new(
        Vec3::new(host.min.x, host.min.y - spec.rooftop_overhang, host.max.z),
        Vec3::new(host.max.x, host.max.y, host.max.z + spec.rooftop_thickness),
    );

    let span = spec.sensor_spacing * (spec.sensor_count - 1) as f64;
    let sensors = (0..spec.sensor_count)
        .map(|i| {
            let x = -span / 2.0 + spec.sensor_spacing * i as f64;
            SensorPose::at(Vec3::new(x, 0.0, spec.sensor_height))
        })
        .collect();

    let scene = SceneDescription {
        domain_bounds: domain,
        boxes: vec![walls[0], walls[1], rooftop],
        rects: vec![ground],
        sensors,
    };
    scene.validate()?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ground_only() -> SceneDescription {
        SceneDescription {
            domain_bounds: Aabb::new(Vec3::new(-10.0, -10.0, -1.0), Vec3::new(10.0, 10.0, 10.0)),
            boxes: vec![Aabb::new(Vec3::new(5.0, -1.0, 0.0), Vec3::new(6.0, 1.0, 3.0))],
            rects: vec![Aabb::new(Vec3::new(-10.0, -10.0, 0.0), Vec3::new(10.0, 10.0, 0.0))],
            sensors: vec![SensorPose::at(Vec3::new(0.0, 0.0, 1.0))],
        }
    }

    #[test]
    fn downward_ray_hits_ground_at_one_meter() {
        let s = ground_only();
        let t = ray_cast(&s, Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, -1.0), 50.0).unwrap();
        assert_eq!(t, Some(1.0));
    }

    #[test]
    fn sky_ray_misses() {
        let s = ground_only();
        let t = ray_cast(&s, Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, 1.0), 50.0).unwrap();
        assert_eq!(t, None);
    }

    #[test]
    fn ray_toward_box_face() {
        let s = ground_only();
        let t = ray_cast(&s, Vec3::new(0.0, 0.0, 1.0), Vec3::new(1.0, 0.0, 0.0), 50.0).unwrap();
        assert_eq!(t, Some(5.0));
        // beyond max range
        let t = ray_cast(&s, Vec3::new(0.0, 0.0, 1.0), Vec3::new(1.0, 0.0, 0.0), 4.0).unwrap();
        assert_eq!(t, None);
    }

    #[test]
    fn non_unit_direction_rejected() {
        let s = ground_only();
        let err = ray_cast(&s, Vec3::ZERO, Vec3::new(0.0, 0.0, -2.0), 5.0).unwrap_err();
        assert!(matches!(err, Error::NonUnitDirection(_)));
    }

    #[test]
    fn canyon_default_topology() {
        let s = generate_canyon(0, &CanyonSpec::default()).unwrap();
        assert_eq!(s.rects.len(), 1);
        assert_eq!(s.rects[0].min.z, 0.0);
        assert_eq!(s.rects[0].max.z, 0.0);
        assert_eq!(s.boxes.len(), 3);
        let (lo, hi) = (s.boxes[0], s.boxes[1]);
        assert!(lo.max.y < 0.0 && hi.min.y > 0.0);
        // rooftop underside is above +5 degrees from every sensor
        let roof = s.boxes[2];
        for sensor in &s.sensors {
            let p = sensor.position;
            let dy = (roof.min.y - p.y).max(0.0);
            let elev = (roof.min.z - p.z).atan2(dy).to_degrees();
            assert!(elev > 5.0, "rooftop visible at {elev} deg");
        }
    }

    #[test]
    fn canyon_is_deterministic() {
        let a = generate_canyon(0, &CanyonSpec::default()).unwrap().to_json().unwrap();
        let b = generate_canyon(0, &CanyonSpec::default()).unwrap().to_json().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn canyon_seeds_differ_in_placement_only() {
        let a = generate_canyon(1, &CanyonSpec::default()).unwrap();
        let b = generate_canyon(2, &CanyonSpec::default()).unwrap();
        assert_ne!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(a.boxes.len(), b.boxes.len());
        assert_eq!(a.rects.len(), b.rects.len());
        assert_eq!(a.sensors.len(), b.sensors.len());
    }

    #[test]
    fn degenerate_spec_rejected() {
        let spec = CanyonSpec { length: 0.0, ..CanyonSpec::default() };
        assert!(generate_canyon(0, &spec).is_err());
    }

    #[test]
    fn sensor_inside_box_rejected() {
        let mut s = ground_only();
        s.sensors.push(SensorPose::at(Vec3::new(5.5, 0.0, 1.0)));
        assert!(matches!(s.validate(), Err(Error::PoseInsideGeometry(_))));
    }

    #[test]
    fn json_uses_fixed_keys() {
        let s = generate_canyon(0, &CanyonSpec::default()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s.to_json().unwrap()).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["boxes", "domain_bounds", "rects", "sensors"]);
        assert_eq!(SceneDescription::from_json(&s.to_json().unwrap()).unwrap(), s);
    }
}
