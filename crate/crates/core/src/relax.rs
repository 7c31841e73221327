//! Decoupled relaxation of particle positions on the geometric energy.
//!
//! Positions move along the geometric force only; the photometric channel
//! drives the scalar payload. A joint mode that adds the photometric
//! gradient to the position update exists for ablation runs.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{sample_from_query, EnergyParams, EnergySample};
use crate::error::{Error, Result};
use crate::field::{FieldBundle, Label};
use crate::math::Vec3;
use crate::particles::ParticleSet;
use crate::photometric::PhotometricField;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelaxMode {
    #[default]
    Decoupled,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelaxConfig {
    /// Step scale, meters per unit force.
    pub eta_mu: f64,
    /// Step norm cap as a fraction of the voxel size.
    pub max_step_factor: f64,
    /// Prune every `T` iterations; `None` disables pruning.
    pub prune_every: Option<usize>,
    pub tau_margin: f64,
    pub iterations: usize,
    pub mode: RelaxMode,
    /// Weight of the geometric gradient in joint mode.
    pub joint_lambda: f64,
    pub photometric: Option<PhotometricField>,
}

impl Default for RelaxConfig {
    fn default() -> Self {
        RelaxConfig {
            eta_mu: 1.0,
            max_step_factor: 0.5,
            prune_every: Some(100),
            tau_margin: 0.5,
            iterations: 1000,
            mode: RelaxMode::Decoupled,
            joint_lambda: 1.0,
            photometric: None,
        }
    }
}

impl RelaxConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_mu > 0.0 && self.eta_mu.is_finite()) {
            return Err(Error::Config("eta_mu must be positive".into()));
        }
        if !(self.max_step_factor > 0.0) {
            return Err(Error::Config("max_step_factor must be positive".into()));
        }
        if self.prune_every == Some(0) {
            return Err(Error::Config("prune_every must be at least 1".into()));
        }
        if !(self.tau_margin >= 0.0) {
            return Err(Error::Config("tau_margin must be non-negative".into()));
        }
        if !(self.joint_lambda >= 0.0) {
            return Err(Error::Config("joint_lambda must be non-negative".into()));
        }
        if self.mode == RelaxMode::Joint && self.photometric.is_none() {
            return Err(Error::Config("joint mode needs a photometric field".into()));
        }
        if let Some(f) = &self.photometric {
            f.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub mean_force: f64,
    pub max_force: f64,
    /// Particles skipped because their force was not finite.
    pub frozen: usize,
    /// Particles whose update was clamped back into the domain.
    pub clamped: usize,
    /// Particles whose containing-voxel label changed during the step.
    pub crossings: usize,
}

/// Energy and force for every particle (`None` for dead ones).
pub fn evaluate(particles: &ParticleSet, bundle: &FieldBundle, params: &EnergyParams) -> Result<Vec<Option<EnergySample>>> {
    particles
        .positions
        .par_iter()
        .zip(particles.alive.par_iter())
        .map(|(&p, &alive)| {
            if !alive {
                return Ok(None);
            }
            let q = bundle.query(p)?;
            Ok(Some(sample_from_query(&q, bundle.fields.occ_active, params)))
        })
        .collect()
}

fn clip(delta: Vec3, max_step: f64) -> Vec3 {
    let n = delta.norm();
    if n > max_step {
        delta * (max_step / n)
    } else {
        delta
    }
}

fn apply_step(
    particles: &mut ParticleSet,
    samples: &[Option<EnergySample>],
    bundle: &FieldBundle,
    cfg: &RelaxConfig,
    mode: RelaxMode,
) -> Result<StepStats> {
    let photometric = cfg.photometric.as_ref();
    if mode == RelaxMode::Joint && photometric.is_none() {
        return Err(Error::Config("joint mode needs a photometric field".into()));
    }
    let max_step = cfg.max_step_factor * bundle.voxel_size();
    let bounds = bundle.frame().bounds();

    #[derive(Default)]
    struct Update {
        pos: Vec3,
        payload: f64,
        force_norm: f64,
        frozen: bool,
        clamped: bool,
        crossed: bool,
        counted: bool,
    }

    let updates: Vec<Update> = particles
        .positions
        .par_iter()
        .zip(particles.payload.par_iter())
        .zip(samples.par_iter())
        .map(|((&pos, &payload), s)| {
            let Some(s) = s else {
                return Update { pos, payload, ..Update::default() };
            };
            let force = s.force;
            if !force.is_finite() {
                return Update { pos, payload, frozen: true, counted: false, ..Update::default() };
            }
            let delta = match mode {
                RelaxMode::Decoupled => force * cfg.eta_mu,
                RelaxMode::Joint => {
                    let g_photo = photometric.map_or(Vec3::ZERO, |f| f.gradient(pos));
                    (force * cfg.joint_lambda - g_photo) * cfg.eta_mu
                }
            };
            let moved = pos + clip(delta, max_step);
            let next = bounds.clamp(moved);
            let payload = photometric.map_or(payload, |f| f.loss(next));
            Update {
                pos: next,
                payload,
                force_norm: force.norm(),
                frozen: false,
                clamped: next != moved,
                crossed: bundle.query_region(next) != s.label,
                counted: true,
            }
        })
        .collect();

    let mut stats = StepStats::default();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, u) in updates.into_iter().enumerate() {
        if !particles.alive[i] {
            continue;
        }
        particles.positions[i] = u.pos;
        particles.payload[i] = u.payload;
        stats.frozen += u.frozen as usize;
        stats.clamped += u.clamped as usize;
        stats.crossings += u.crossed as usize;
        if u.counted {
            sum += u.force_norm;
            n += 1;
            stats.max_force = stats.max_force.max(u.force_norm);
        }
    }
    stats.mean_force = if n > 0 { sum / n as f64 } else { 0.0 };
    Ok(stats)
}

/// One decoupled update: `mu += clip(eta * F_geom)`. The photometric field
/// never reaches the positions in this mode.
pub fn relax_step(
    particles: &mut ParticleSet,
    bundle: &FieldBundle,
    params: &EnergyParams,
    cfg: &RelaxConfig,
) -> Result<StepStats> {
    let samples = evaluate(particles, bundle, params)?;
    apply_step(particles, &samples, bundle, cfg, RelaxMode::Decoupled)
}

/// One joint update: `mu -= clip(eta * (grad L_photo + joint_lambda * grad E_geom))`.
pub fn joint_step(
    particles: &mut ParticleSet,
    bundle: &FieldBundle,
    params: &EnergyParams,
    cfg: &RelaxConfig,
) -> Result<StepStats> {
    if cfg.photometric.is_none() {
        return Err(Error::Config("joint_step needs a photometric field".into()));
    }
    let samples = evaluate(particles, bundle, params)?;
    apply_step(particles, &samples, bundle, cfg, RelaxMode::Joint)
}

/// Kill alive particles whose interpolated `d_trust` strictly exceeds
/// `tau_margin`. Returns the number pruned.
pub fn prune_free(particles: &mut ParticleSet, bundle: &FieldBundle, tau_margin: f64) -> usize {
    let mut pruned = 0;
    for (p, alive) in particles.positions.iter().zip(particles.alive.iter_mut()) {
        if *alive && bundle.d_trust_at(*p) > tau_margin {
            *alive = false;
            pruned += 1;
        }
    }
    pruned
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub total_energy: f64,
    pub mean_force: f64,
    pub max_force: f64,
    pub alive: usize,
    pub pruned: usize,
    /// Label changes or domain clamps happened during this iteration; the
    /// energy may jump here.
    pub boundary_event: bool,
    pub frozen: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackRow {
    pub iter: usize,
    pub id: usize,
    pub pos: Vec3,
    pub region: Label,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryLog {
    pub rows: Vec<LogRow>,
    pub tracks: Vec<TrackRow>,
}

impl TrajectoryLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,total_energy,mean_force,max_force,alive,pruned\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.iter, r.total_energy, r.mean_force, r.max_force, r.alive, r.pruned
            );
        }
        s
    }

    pub fn tracks_csv(&self) -> String {
        let mut s = String::from("iter,id,x,y,z,region\n");
        for t in &self.tracks {
            let _ = writeln!(s, "{},{},{},{},{},{}", t.iter, t.id, t.pos.x, t.pos.y, t.pos.z, t.region.as_str());
        }
        s
    }

    /// Iterations where the total energy rose by more than `tol` without a
    /// flagged boundary event or a prune pass.
    pub fn unflagged_energy_increases(&self, tol: f64) -> Vec<usize> {
        self.rows
            .windows(2)
            .filter(|w| {
                let r = &w[1];
                !r.boundary_event && r.pruned == 0 && r.total_energy > w[0].total_energy + tol
            })
            .map(|w| w[1].iter)
            .collect()
    }

    pub fn boundary_events(&self) -> usize {
        self.rows.iter().filter(|r| r.boundary_event).count()
    }
}

fn summarize(samples: &[Option<EnergySample>]) -> (f64, f64, f64) {
    let mut e = 0.0;
    let mut sum = 0.0;
    let mut max = 0.0f64;
    let mut n = 0usize;
    for s in samples.iter().flatten() {
        e += s.e_total;
        let f = s.force.norm();
        if f.is_finite() {
            sum += f;
            max = max.max(f);
            n += 1;
        }
    }
    (e, if n > 0 { sum / n as f64 } else { 0.0 }, max)
}

fn record_tracks(log: &mut TrajectoryLog, iter: usize, particles: &ParticleSet, bundle: &FieldBundle) {
    for &id in &particles.tracked {
        if particles.alive[id] {
            let pos = particles.positions[id];
            log.tracks.push(TrackRow { iter, id, pos, region: bundle.query_region(pos) });
        }
    }
}

/// Iterate the configured update with pruning every `prune_every`
/// iterations. Row `t` of the log describes the state after `t` iterations.
pub fn run(
    particles: &mut ParticleSet,
    bundle: &FieldBundle,
    params: &EnergyParams,
    cfg: &RelaxConfig,
) -> Result<TrajectoryLog> {
    cfg.validate()?;
    let mut log = TrajectoryLog::default();
    let mut samples = evaluate(particles, bundle, params)?;
    let (e, mean, max) = summarize(&samples);
    log.rows.push(LogRow {
        iter: 0,
        total_energy: e,
        mean_force: mean,
        max_force: max,
        alive: particles.alive_count(),
        pruned: 0,
        boundary_event: false,
        frozen: 0,
    });
    record_tracks(&mut log, 0, particles, bundle);

    for t in 1..=cfg.iterations {
        let stats = apply_step(particles, &samples, bundle, cfg, cfg.mode)?;
        let pruned = match cfg.prune_every {
            Some(every) if t % every == 0 => prune_free(particles, bundle, cfg.tau_margin),
            _ => 0,
        };
        samples = evaluate(particles, bundle, params)?;
        let (e, mean, max) = summarize(&samples);
        log.rows.push(LogRow {
            iter: t,
            total_energy: e,
            mean_force: mean,
            max_force: max,
            alive: particles.alive_count(),
            pruned,
            boundary_event: stats.crossings > 0 || stats.clamped > 0,
            frozen: stats.frozen,
        });
        record_tracks(&mut log, t, particles, bundle);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{GridFrame, VoxelPartition};
    use crate::lidar::PointCloud;
    use crate::math::Aabb;
    use crate::photometric::Well;

    /// 16^3 grid at 0.25 m: FREE slab for x in 4..12, a LiDAR wall at x = 2
    /// and x = 13, UNK elsewhere.
    fn slab_bundle() -> FieldBundle {
        let vs = 0.25;
        let frame = GridFrame::new(Aabb::new(Vec3::ZERO, Vec3::new(4.0, 4.0, 4.0)), vs).unwrap();
        let mut part = VoxelPartition::filled(frame, Label::Unk);
        let mut cloud = PointCloud::default();
        for k in 0..16 {
            for j in 0..16 {
                for i in 3..=12 {
                    part.set(i, j, k, Label::Free);
                }
                for i in [2, 13] {
                    part.set(i, j, k, Label::Occ);
                    cloud.points.push(frame.center(i, j, k));
                }
            }
        }
        FieldBundle::new(part, &cloud)
    }

    #[test]
    fn particle_on_lidar_point_stays() {
        // isolated OCC voxels inside UNK, no FREE space
        let frame = GridFrame::new(Aabb::new(Vec3::ZERO, Vec3::new(3.0, 3.0, 3.0)), 0.25).unwrap();
        let mut part = VoxelPartition::filled(frame, Label::Unk);
        let mut cloud = PointCloud::default();
        for (i, j, k) in [(3, 3, 3), (8, 4, 6), (5, 9, 2)] {
            part.set(i, j, k, Label::Occ);
            cloud.points.push(frame.center(i, j, k));
        }
        let b = FieldBundle::new(part, &cloud);
        let mut ps = ParticleSet::new(cloud.points.clone());
        let cfg = RelaxConfig { iterations: 100, ..RelaxConfig::default() };
        run(&mut ps, &b, &EnergyParams::default(), &cfg).unwrap();
        for (p, q) in ps.positions.iter().zip(&cloud.points) {
            assert!((*p - *q).norm() < 1e-9);
        }
    }

    #[test]
    fn step_is_clipped_to_half_voxel() {
        let b = slab_bundle();
        // deep in the slab the barrier pushes with ~lambda/tau = 2 > 0.125
        let p0 = b.frame().center(7, 7, 7) + Vec3::new(0.01, 0.0, 0.0);
        let mut ps = ParticleSet::new(vec![p0]);
        let cfg = RelaxConfig { eta_mu: 1.0, ..RelaxConfig::default() };
        relax_step(&mut ps, &b, &EnergyParams::default(), &cfg).unwrap();
        let moved = (ps.positions[0] - p0).norm();
        assert!((moved - 0.125).abs() < 1e-12, "moved {moved}");
        // a force of magnitude 10 is clipped the same way
        assert!((clip(Vec3::new(0.0, 10.0, 0.0), 0.5 * 0.25).norm() - 0.125).abs() < 1e-15);
    }

    #[test]
    fn decoupled_ignores_photometric_field() {
        let b = slab_bundle();
        let params = EnergyParams::default();
        let start = crate::particles::init_uniform_in_domain(&b, 64, 1);
        let adversary = PhotometricField {
            wells: vec![Well { center: Vec3::new(2.0, 2.0, 2.0), amplitude: 100.0, sigma: 0.3 }],
        };
        let base = RelaxConfig { iterations: 50, prune_every: None, ..RelaxConfig::default() };
        let with = RelaxConfig { photometric: Some(adversary), ..base.clone() };
        let mut a = start.clone();
        let mut c = start;
        run(&mut a, &b, &params, &base).unwrap();
        run(&mut c, &b, &params, &with).unwrap();
        for (p, q) in a.positions.iter().zip(&c.positions) {
            assert_eq!(p.to_array().map(f64::to_bits), q.to_array().map(f64::to_bits));
        }
        // payload does follow the photometric channel
        assert_ne!(a.payload, c.payload);
    }

    #[test]
    fn joint_with_zero_field_equals_decoupled() {
        let b = slab_bundle();
        let params = EnergyParams::default();
        let start = crate::particles::init_uniform_in_domain(&b, 32, 2);
        let cfg = RelaxConfig { photometric: Some(PhotometricField::zero()), ..RelaxConfig::default() };
        let mut a = start.clone();
        let mut c = start;
        relax_step(&mut a, &b, &params, &cfg).unwrap();
        joint_step(&mut c, &b, &params, &cfg).unwrap();
        assert_eq!(a.positions, c.positions);
    }

    #[test]
    fn joint_without_field_rejected() {
        let b = slab_bundle();
        let mut ps = ParticleSet::new(vec![Vec3::new(1.0, 1.0, 1.0)]);
        let cfg = RelaxConfig::default();
        assert!(joint_step(&mut ps, &b, &EnergyParams::default(), &cfg).is_err());
        let cfg = RelaxConfig { mode: RelaxMode::Joint, ..cfg };
        assert!(run(&mut ps, &b, &EnergyParams::default(), &cfg).is_err());
    }

    #[test]
    fn joint_direction_approaches_decoupled() {
        let b = slab_bundle();
        let params = EnergyParams::default();
        let p0 = b.frame().center(6, 7, 7) + Vec3::new(0.03, 0.02, -0.01);
        let field = PhotometricField { wells: vec![Well { center: Vec3::new(2.0, 2.0, 2.0), amplitude: 1.0, sigma: 1.0 }] };
        let force = crate::energy::total_force(&b, p0, &params).unwrap().force;
        let dir = |lambda: f64| {
            let g = force * lambda - field.gradient(p0);
            g * (1.0 / g.norm())
        };
        let want = force * (1.0 / force.norm());
        let err = |l: f64| (dir(l) - want).norm();
        assert!(err(1.0) > err(10.0) && err(10.0) > err(1000.0));
        assert!(err(1e6) < 1e-5);
    }

    #[test]
    fn prune_uses_strict_inequality() {
        let b = slab_bundle();
        let p = b.frame().center(7, 7, 7);
        let d = b.d_trust_at(p);
        assert!(d > 0.0);
        let mut ps = ParticleSet::new(vec![p]);
        assert_eq!(prune_free(&mut ps, &b, d), 0);
        assert_eq!(prune_free(&mut ps, &b, d - 1e-6), 1);
        assert_eq!(ps.alive_count(), 0);
        let mut outside = ParticleSet::new(vec![b.frame().center(0, 7, 7)]);
        assert_eq!(prune_free(&mut outside, &b, 0.0), 0);
    }

    #[test]
    fn prune_is_idempotent() {
        let b = slab_bundle();
        let mut ps = crate::particles::init_uniform_in_domain(&b, 500, 9);
        let first = prune_free(&mut ps, &b, 0.3);
        assert!(first > 0);
        assert_eq!(prune_free(&mut ps, &b, 0.3), 0);
    }

    #[test]
    fn zero_iterations_is_identity() {
        let b = slab_bundle();
        let start = crate::particles::init_uniform_in_domain(&b, 10, 4);
        let mut ps = start.clone();
        let log = run(&mut ps, &b, &EnergyParams::default(), &RelaxConfig { iterations: 0, ..RelaxConfig::default() }).unwrap();
        assert_eq!(ps, start);
        assert_eq!(log.rows.len(), 1);
    }

    #[test]
    fn alive_count_never_increases() {
        let b = slab_bundle();
        let mut ps = crate::particles::init_uniform_in_domain(&b, 200, 5).track_first(3);
        let cfg = RelaxConfig { iterations: 60, prune_every: Some(7), tau_margin: 0.2, ..RelaxConfig::default() };
        let log = run(&mut ps, &b, &EnergyParams::default(), &cfg).unwrap();
        for w in log.rows.windows(2) {
            assert!(w[1].alive <= w[0].alive);
        }
        assert!(log.rows.iter().all(|r| r.total_energy.is_finite()));
        assert!(log.to_csv().starts_with("iter,total_energy,mean_force,max_force,alive,pruned\n"));
        assert!(log.tracks_csv().lines().count() > 1);
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = RelaxConfig { prune_every: Some(0), ..RelaxConfig::default() };
        assert!(bad.validate().is_err());
        let bad = RelaxConfig { eta_mu: 0.0, ..RelaxConfig::default() };
        assert!(bad.validate().is_err());
        let bad = RelaxConfig { tau_margin: -1.0, ..RelaxConfig::default() };
        assert!(bad.validate().is_err());
    }
}
