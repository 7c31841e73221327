//! Scripted experiments with explicit pass thresholds.
//!
//! Every experiment builds its scene from the config, runs deterministically
//! from seeded samplers, and returns a report of named checks, each with the
//! measured value next to its threshold.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::DEFAULT_VOXEL_SIZE;
use crate::energy::{interpolant_force, prop3_magnitude, total_force, EnergyParams};
use crate::error::{Error, Result};
use crate::field::{carve, FieldBundle, Label, Stencil};
use crate::lidar::{merge_scans, scan_all, PointCloud, ScanConfig};
use crate::math::Vec3;
use crate::metrics::{compute_metrics, force_norm_histogram, force_norms, force_stats, Histogram, MetricsReport, REPORT_HEADER};
use crate::particles::{init_on_points, init_uniform_in_free, init_uniform_in_label, ParticleSet};
use crate::photometric::{PhotometricField, Well};
use crate::relax::{evaluate, relax_step, run, RelaxConfig, RelaxMode};
use crate::scene::{generate_canyon, CanyonSpec, SceneDescription};

/// Scene, point cloud and field bundle of one canyon build.
#[derive(Clone, Debug)]
pub struct SceneBundle {
    pub scene: SceneDescription,
    pub cloud: PointCloud,
    pub bundle: FieldBundle,
}

pub fn build_canyon(seed: u64, spec: &CanyonSpec, scan: &ScanConfig, voxel_size: f64) -> Result<SceneBundle> {
    let scene = generate_canyon(seed, spec)?;
    let scans = scan_all(&scene, scan)?;
    let (cloud, scans) = merge_scans(scans)?;
    let partition = carve(&scans, scene.domain_bounds, voxel_size)?;
    let bundle = FieldBundle::new(partition, &cloud);
    Ok(SceneBundle { scene, cloud, bundle })
}

/// Canyon seed 0, default scan, 0.25 m voxels.
pub fn canonical() -> Result<SceneBundle> {
    build_canyon(0, &CanyonSpec::default(), &ScanConfig::default(), DEFAULT_VOXEL_SIZE)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentId {
    Theorem1,
    Theorem2,
    Prop3,
    RatioSweep,
    MarginSweep,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 5] = [
        ExperimentId::Theorem1,
        ExperimentId::Theorem2,
        ExperimentId::Prop3,
        ExperimentId::RatioSweep,
        ExperimentId::MarginSweep,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentId::Theorem1 => "theorem1",
            ExperimentId::Theorem2 => "theorem2",
            ExperimentId::Prop3 => "prop3",
            ExperimentId::RatioSweep => "ratio_sweep",
            ExperimentId::MarginSweep => "margin_sweep",
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentId::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown experiment `{s}`")))
    }
}

/// Initial particle population: LiDAR points drawn with replacement plus
/// floaters sampled uniformly in FREE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedingConfig {
    pub on_points: usize,
    pub in_free: usize,
    pub seed: u64,
}

impl Default for SeedingConfig {
    fn default() -> Self {
        SeedingConfig { on_points: 4000, in_free: 1000, seed: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Theorem1Config {
    pub particles: usize,
    pub seed: u64,
    pub max_iterations: usize,
    /// Required fraction of particles that leave FREE.
    pub min_exit_fraction: f64,
    pub control_iterations: usize,
    pub control_well_amplitude: f64,
    pub control_well_sigma: f64,
    /// The control passes when its trapped fraction strictly exceeds this.
    pub control_min_trapped: f64,
}

impl Default for Theorem1Config {
    fn default() -> Self {
        Theorem1Config {
            particles: 500,
            seed: 0,
            max_iterations: 5000,
            min_exit_fraction: 1.0,
            control_iterations: 5000,
            control_well_amplitude: 1.0,
            control_well_sigma: 1.0,
            control_min_trapped: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Theorem2Config {
    pub pairs: usize,
    /// Pair separation as a fraction of the voxel size.
    pub pair_distance_factor: f64,
    pub seed: u64,
    /// Multiplier on the analytic Lipschitz bound.
    pub slack: f64,
    /// Gradient-grid nodes with norm outside this band (and not exactly
    /// zero) mark EDT ridges; pairs touching them are excluded.
    pub eikonal_band: [f64; 2],
    pub trace_particles: usize,
    pub trace_iterations: usize,
    pub energy_tolerance: f64,
    pub histogram_bins: usize,
    pub photometric_wells: usize,
    pub photometric_sigma: f64,
}

impl Default for Theorem2Config {
    fn default() -> Self {
        Theorem2Config {
            pairs: 10_000,
            pair_distance_factor: 0.1,
            seed: 11,
            slack: 2.0,
            eikonal_band: [0.85, 1.15],
            trace_particles: 500,
            trace_iterations: 1000,
            energy_tolerance: 1e-9,
            histogram_bins: 20,
            photometric_wells: 1000,
            photometric_sigma: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Prop3Config {
    pub d: f64,
    pub w: f64,
    pub sigma_factors: Vec<f64>,
    pub max_final_ratio: f64,
    pub tail_ratio_range: [f64; 2],
    pub grid_particles: usize,
    pub grid_seed: u64,
    pub grid_iterations: usize,
    pub grid_sigma_unk: f64,
    /// Displacement threshold as a fraction of the voxel size.
    pub max_displacement_factor: f64,
}

impl Default for Prop3Config {
    fn default() -> Self {
        Prop3Config {
            d: 1.0,
            w: 1.0,
            sigma_factors: vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
            max_final_ratio: 1e-2,
            tail_ratio_range: [0.24, 0.26],
            grid_particles: 500,
            grid_seed: 5,
            grid_iterations: 1000,
            grid_sigma_unk: 8.0,
            max_displacement_factor: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RatioSweepConfig {
    pub ratios: Vec<f64>,
    pub baseline: f64,
    pub violating: f64,
    pub near: f64,
    /// Allowed relative OccCov deviation of `near` from `baseline`.
    pub near_tolerance: f64,
}

impl Default for RatioSweepConfig {
    fn default() -> Self {
        RatioSweepConfig {
            ratios: vec![1.0 / 16.0, 0.25, 4.0, 16.0, 64.0],
            baseline: 16.0,
            violating: 1.0 / 16.0,
            near: 64.0,
            near_tolerance: 0.10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarginSweepConfig {
    pub tau_margins: Vec<f64>,
    pub max_leak_pct: f64,
    pub max_leak_pct_unpruned: f64,
}

impl Default for MarginSweepConfig {
    fn default() -> Self {
        MarginSweepConfig { tau_margins: vec![0.1, 0.5, 1.0, 2.0], max_leak_pct: 1.0, max_leak_pct_unpruned: 5.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scene_seed: u64,
    pub canyon: CanyonSpec,
    pub scan: ScanConfig,
    pub voxel_size: f64,
    pub params: EnergyParams,
    pub relax: RelaxConfig,
    pub seeding: SeedingConfig,
    pub theorem1: Theorem1Config,
    pub theorem2: Theorem2Config,
    pub prop3: Prop3Config,
    pub ratio_sweep: RatioSweepConfig,
    pub margin_sweep: MarginSweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scene_seed: 0,
            canyon: CanyonSpec::default(),
            scan: ScanConfig::default(),
            voxel_size: DEFAULT_VOXEL_SIZE,
            params: EnergyParams::default(),
            relax: RelaxConfig::default(),
            seeding: SeedingConfig::default(),
            theorem1: Theorem1Config::default(),
            theorem2: Theorem2Config::default(),
            prop3: Prop3Config::default(),
            ratio_sweep: RatioSweepConfig::default(),
            margin_sweep: MarginSweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn build_scene(&self) -> Result<SceneBundle> {
        build_canyon(self.scene_seed, &self.canyon, &self.scan, self.voxel_size)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    Le,
    Lt,
    Ge,
    Gt,
}

impl Relation {
    fn holds(self, measured: f64, threshold: f64) -> bool {
        match self {
            Relation::Le => measured <= threshold,
            Relation::Lt => measured < threshold,
            Relation::Ge => measured >= threshold,
            Relation::Gt => measured > threshold,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Relation::Le => "<=",
            Relation::Lt => "<",
            Relation::Ge => ">=",
            Relation::Gt => ">",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub threshold: f64,
    pub relation: Relation,
    pub pass: bool,
    /// Informational checks are reported but do not affect the verdict.
    pub gating: bool,
}

impl Check {
    pub fn new(name: &str, measured: f64, relation: Relation, threshold: f64) -> Self {
        Check {
            name: name.to_string(),
            measured,
            threshold,
            relation,
            pass: relation.holds(measured, threshold),
            gating: true,
        }
    }

    pub fn info(name: &str, measured: f64, relation: Relation, threshold: f64) -> Self {
        Check { gating: false, ..Check::new(name, measured, relation, threshold) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub id: ExperimentId,
    pub checks: Vec<Check>,
    /// Extra CSV tables written next to the report, by file name.
    pub tables: Vec<(String, String)>,
    /// Vacuous run (nothing to test).
    pub empty: bool,
}

impl ExperimentReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().filter(|c| c.gating).all(|c| c.pass)
    }

    /// `PASS|FAIL <measured> <threshold>` for the first failing gating check,
    /// or the first gating check when everything passes.
    pub fn verdict_line(&self) -> String {
        let gating = || self.checks.iter().filter(|c| c.gating);
        match gating().find(|c| !c.pass).or_else(|| gating().next()) {
            Some(c) => format!("{} {} {}", if c.pass { "PASS" } else { "FAIL" }, c.measured, c.threshold),
            None => "PASS 0 0".to_string(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("experiment,check,measured,relation,threshold,pass,gating\n");
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                self.id,
                c.name,
                c.measured,
                c.relation.symbol(),
                c.threshold,
                c.pass,
                c.gating
            );
        }
        s
    }

    /// Write `report.csv` and any extra tables into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let path = dir.join("report.csv");
        std::fs::write(&path, self.to_csv())?;
        written.push(path);
        for (name, body) in &self.tables {
            let path = dir.join(name);
            std::fs::write(&path, body)?;
            written.push(path);
        }
        Ok(written)
    }
}

pub fn run_experiment(id: ExperimentId, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    match id {
        ExperimentId::Theorem1 => run_theorem1(cfg),
        ExperimentId::Theorem2 => run_theorem2(cfg),
        ExperimentId::Prop3 => run_prop3(cfg),
        ExperimentId::RatioSweep => run_ratio_sweep(cfg),
        ExperimentId::MarginSweep => run_margin_sweep(cfg),
    }
}

fn in_free_fraction(ps: &ParticleSet, bundle: &FieldBundle) -> f64 {
    let alive = ps.alive_count();
    if alive == 0 {
        return 0.0;
    }
    ps.alive_positions().filter(|&p| bundle.query_region(p) == Label::Free).count() as f64 / alive as f64
}

/// Center of the FREE voxel deepest inside FREE.
fn deepest_free(bundle: &FieldBundle) -> Option<Vec3> {
    let d = &bundle.fields.d_trust;
    let (idx, &v) = d.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))?;
    if v <= 0.0 {
        return None;
    }
    let [i, j, k] = bundle.dims().coords(idx);
    Some(bundle.frame().center(i, j, k))
}

/// Particles seeded uniformly in FREE leave it under the decoupled update;
/// a joint-mode control without the barrier keeps some trapped near a
/// photometric well.
pub fn run_theorem1(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let t = &cfg.theorem1;
    let sb = cfg.build_scene()?;
    let b = &sb.bundle;
    if b.partition.counts()[1] == 0 {
        return Err(Error::EmptyInput("scene has no FREE voxels"));
    }
    if t.particles == 0 {
        return Ok(ExperimentReport {
            id: ExperimentId::Theorem1,
            checks: vec![Check::new("exit_fraction", 1.0, Relation::Ge, t.min_exit_fraction)],
            tables: Vec::new(),
            empty: true,
        });
    }
    let start = init_uniform_in_free(b, t.particles, t.seed)?;
    let relax = RelaxConfig { prune_every: None, mode: RelaxMode::Decoupled, photometric: None, ..cfg.relax.clone() };
    relax.validate()?;

    let mut ps = start.clone();
    let mut exit_iter: Vec<Option<usize>> = vec![None; ps.len()];
    for it in 1..=t.max_iterations {
        relax_step(&mut ps, b, &cfg.params, &relax)?;
        for (slot, &p) in exit_iter.iter_mut().zip(&ps.positions) {
            if slot.is_none() && b.query_region(p) != Label::Free {
                *slot = Some(it);
            }
        }
        if exit_iter.iter().all(Option::is_some) {
            break;
        }
    }
    let mut iters: Vec<usize> = exit_iter.iter().flatten().copied().collect();
    iters.sort_unstable();
    let exit_fraction = iters.len() as f64 / ps.len() as f64;
    let final_in_free = in_free_fraction(&ps, b);

    let mut table = String::from("particle,exit_iteration\n");
    for (i, e) in exit_iter.iter().enumerate() {
        let _ = writeln!(table, "{},{}", i, e.map_or(-1, |v| v as i64));
    }

    let well = deepest_free(b).ok_or(Error::EmptyInput("scene has no FREE voxels"))?;
    let control_params = EnergyParams { lambda_free: 0.0, ..cfg.params };
    let control_cfg = RelaxConfig {
        mode: RelaxMode::Joint,
        prune_every: None,
        iterations: t.control_iterations,
        photometric: Some(PhotometricField {
            wells: vec![Well { center: well, amplitude: t.control_well_amplitude, sigma: t.control_well_sigma }],
        }),
        ..cfg.relax.clone()
    };
    let mut control = start;
    run(&mut control, b, &control_params, &control_cfg)?;
    let trapped = in_free_fraction(&control, b);

    let median = iters.get(iters.len() / 2).copied().unwrap_or(0) as f64;
    let max = iters.last().copied().unwrap_or(0) as f64;
    Ok(ExperimentReport {
        id: ExperimentId::Theorem1,
        checks: vec![
            Check::new("exit_fraction", exit_fraction, Relation::Ge, t.min_exit_fraction),
            Check::new("control_trapped_fraction", trapped, Relation::Gt, t.control_min_trapped),
            Check::info("exit_iteration_median", median, Relation::Le, t.max_iterations as f64),
            Check::info("exit_iteration_max", max, Relation::Le, t.max_iterations as f64),
            Check::info("in_free_fraction_at_last_exit", final_in_free, Relation::Le, 1.0),
        ],
        tables: vec![("exit_iterations.csv".into(), table)],
        empty: false,
    })
}

/// Label of every stencil corner and the containing voxel, if they agree.
fn uniform_label(b: &FieldBundle, p: Vec3) -> Option<Label> {
    let l = b.query_region(p);
    let st = Stencil::new(b.frame(), p);
    st.idx.iter().all(|&i| b.partition.labels[i] == l).then_some(l)
}

fn regular_nodes(b: &FieldBundle, p: Vec3, band: [f64; 2]) -> bool {
    let st = Stencil::new(b.frame(), p);
    let f = &b.fields;
    [&f.grad_occ, &f.grad_trust, &f.grad_unk].iter().all(|g| {
        st.idx.iter().all(|&i| {
            let n = g[i].norm();
            n == 0.0 || (band[0]..=band[1]).contains(&n)
        })
    })
}

fn random_in(rng: &mut ChaCha8Rng, b: &FieldBundle) -> Vec3 {
    let bounds = b.frame().bounds();
    let e = bounds.extent();
    bounds.min + Vec3::new(rng.random::<f64>() * e.x, rng.random::<f64>() * e.y, rng.random::<f64>() * e.z)
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v * (1.0 / n);
        }
    }
}

/// Empirical Lipschitz constant of the force over `pairs` random pairs that
/// share one label across both stencils and avoid EDT ridge nodes.
pub fn lipschitz_estimate(b: &FieldBundle, params: &EnergyParams, t: &Theorem2Config) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let h = t.pair_distance_factor * b.voxel_size();
    let bounds = b.frame().bounds();
    let mut accepted = 0;
    let mut attempts = 0usize;
    let mut l_est = 0.0f64;
    while accepted < t.pairs {
        attempts += 1;
        if attempts > 1000 * t.pairs.max(1) {
            return Err(Error::EmptyInput("too few admissible pairs for the Lipschitz estimate"));
        }
        let a = random_in(&mut rng, b);
        let c = a + random_unit(&mut rng) * h;
        if !bounds.contains(c) {
            continue;
        }
        let (Some(la), Some(lc)) = (uniform_label(b, a), uniform_label(b, c)) else {
            continue;
        };
        if la != lc || !regular_nodes(b, a, t.eikonal_band) || !regular_nodes(b, c, t.eikonal_band) {
            continue;
        }
        let fa = total_force(b, a, params)?.force;
        let fc = total_force(b, c, params)?.force;
        l_est = l_est.max((fa - fc).norm() / (a - c).norm());
        accepted += 1;
    }
    Ok(l_est)
}

/// One row of [`energy_trace`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DescentRow {
    pub iter: usize,
    pub total_energy: f64,
    /// Energy change summed over particles that neither changed label nor
    /// ended on the domain boundary during the step.
    pub unflagged_delta: f64,
    pub flagged: usize,
}

/// Decoupled relaxation with per-particle energy accounting. Row `t` covers
/// the step from iteration `t - 1` to `t`.
pub fn energy_trace(
    ps: &mut ParticleSet,
    b: &FieldBundle,
    params: &EnergyParams,
    relax: &RelaxConfig,
) -> Result<Vec<DescentRow>> {
    let bounds = b.frame().bounds();
    let on_face = |x: Vec3| (0..3).any(|a| x[a] == bounds.min[a] || x[a] == bounds.max[a]);
    let mut before = evaluate(ps, b, params)?;
    let mut rows = Vec::with_capacity(relax.iterations);
    for iter in 1..=relax.iterations {
        relax_step(ps, b, params, relax)?;
        let after = evaluate(ps, b, params)?;
        let mut row = DescentRow { iter, total_energy: 0.0, unflagged_delta: 0.0, flagged: 0 };
        for (i, (s0, s1)) in before.iter().zip(&after).enumerate() {
            let (Some(s0), Some(s1)) = (s0, s1) else { continue };
            row.total_energy += s1.e_total;
            if s0.label != s1.label || on_face(ps.positions[i]) {
                row.flagged += 1;
            } else {
                row.unflagged_delta += s1.e_total - s0.e_total;
            }
        }
        rows.push(row);
        before = after;
    }
    Ok(rows)
}

/// Lipschitz bound, energy-trace descent, and the force-norm distribution
/// against a heavy-tailed synthetic photometric gradient.
pub fn run_theorem2(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let t = &cfg.theorem2;
    let sb = cfg.build_scene()?;
    let b = &sb.bundle;
    let p = cfg.params;
    let bound = p.lipschitz_bound();
    let l_est = lipschitz_estimate(b, &p, t)?;

    // doubled temperature, informational
    let p2 = EnergyParams { tau: 2.0 * p.tau, ..p };
    let l_tau2 = lipschitz_estimate(b, &p2, t)?;

    // energy trace at a step below 2 / L_est
    let eta = 1.0 / l_est.max(bound);
    let trace_cfg = RelaxConfig {
        eta_mu: eta,
        prune_every: None,
        iterations: t.trace_iterations,
        mode: RelaxMode::Decoupled,
        photometric: None,
        ..cfg.relax.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed.wrapping_add(1));
    let mut trace = ParticleSet::new((0..t.trace_particles).map(|_| random_in(&mut rng, b)).collect());
    let descent = energy_trace(&mut trace, b, &p, &trace_cfg)?;
    let unflagged = descent.iter().filter(|r| r.unflagged_delta > t.energy_tolerance).count();
    let mut trace_csv = String::from("iter,total_energy,unflagged_delta,flagged_particles\n");
    for r in &descent {
        let _ = writeln!(trace_csv, "{},{},{},{}", r.iter, r.total_energy, r.unflagged_delta, r.flagged);
    }
    let max_flagged = descent.iter().map(|r| r.flagged).max().unwrap_or(0);

    // force norms vs synthetic photometric gradients at the same positions
    let probes = ParticleSet::new((0..t.trace_particles.max(1)).map(|_| random_in(&mut rng, b)).collect());
    let geo = force_norms(&probes, b, &p)?;
    let photo = PhotometricField::heavy_tailed(t.seed, b.frame().bounds(), t.photometric_wells, t.photometric_sigma);
    let photo_norms: Vec<f64> = probes.positions.iter().map(|&x| photo.gradient(x).norm()).collect();
    let geo_stats = force_stats(geo.iter().copied());
    let photo_stats = force_stats(photo_norms.iter().copied());
    let hist = force_norm_histogram(&probes, &geo, t.histogram_bins)?;
    let photo_hist = force_norm_histogram(&probes, &photo_norms, t.histogram_bins)?;

    let mut stats = String::from("source,mean,p50,p95,max\n");
    for (name, s) in [("geometric", geo_stats), ("photometric", photo_stats)] {
        let _ = writeln!(stats, "{name},{},{},{},{}", s.mean, s.p50, s.p95, s.max);
    }
    Ok(ExperimentReport {
        id: ExperimentId::Theorem2,
        checks: vec![
            Check::new("lipschitz_estimate", l_est, Relation::Le, t.slack * bound),
            Check::new("unflagged_energy_increases", unflagged as f64, Relation::Le, 0.0),
            Check::info("max_flagged_particles_per_iteration", max_flagged as f64, Relation::Le, t.trace_particles as f64),
            Check::info("step_eta", eta, Relation::Le, 2.0 / l_est.max(f64::MIN_POSITIVE)),
            Check::info("lipschitz_ratio_tau_doubled", l_tau2 / l_est, Relation::Le, 1.0),
            Check::info("geometric_mean_force", geo_stats.mean, Relation::Lt, photo_stats.mean),
            Check::info("geometric_max_force", geo_stats.max, Relation::Le, p.force_bound()),
        ],
        tables: vec![
            ("energy_trace.csv".into(), trace_csv),
            ("force_stats.csv".into(), stats),
            ("histogram_geometric.csv".into(), hist.to_csv()),
            ("histogram_photometric.csv".into(), photo_hist.to_csv()),
        ],
        empty: false,
    })
}

/// Closed-form decay of the Welsch force in `sigma`, then on-grid stability
/// of particles placed in UNK under a wide unknown-space prior.
pub fn run_prop3(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let t = &cfg.prop3;
    let mags: Vec<f64> = t.sigma_factors.iter().map(|&s| prop3_magnitude(t.d, t.w, s * t.d)).collect();
    let mut table = String::from("sigma,force\n");
    for (s, m) in t.sigma_factors.iter().zip(&mags) {
        let _ = writeln!(table, "{},{}", s * t.d, m);
    }
    let decreasing = mags.windows(2).all(|w| w[1] < w[0]);
    let mut checks = vec![Check::new("strictly_decreasing", decreasing as u8 as f64, Relation::Ge, 1.0)];
    if let (Some(&first), Some(&last)) = (mags.first(), mags.last()) {
        let ratio = if first > 0.0 { last / first } else { 0.0 };
        checks.push(Check::new("final_over_initial", ratio, Relation::Lt, t.max_final_ratio));
    }
    if mags.len() >= 2 {
        let n = mags.len();
        let tail = mags[n - 1] / mags[n - 2];
        checks.push(Check::new("tail_ratio_min", tail, Relation::Ge, t.tail_ratio_range[0]));
        checks.push(Check::new("tail_ratio_max", tail, Relation::Le, t.tail_ratio_range[1]));
    }

    let sb = cfg.build_scene()?;
    let b = &sb.bundle;
    let limit = t.max_displacement_factor * b.voxel_size();
    let start = init_uniform_in_label(b, Label::Unk, t.grid_particles, t.grid_seed)?;
    let relax = RelaxConfig {
        prune_every: None,
        iterations: t.grid_iterations,
        mode: RelaxMode::Decoupled,
        photometric: None,
        ..cfg.relax.clone()
    };
    let displacement = |params: &EnergyParams| -> Result<Vec<f64>> {
        let mut ps = start.clone();
        run(&mut ps, b, params, &relax)?;
        Ok(ps.positions.iter().zip(&start.positions).map(|(a, c)| (*a - *c).norm()).collect())
    };
    let wide = EnergyParams { sigma_unk: t.grid_sigma_unk, ..cfg.params };
    let full = displacement(&wide)?;
    // the unknown-space prior alone, occupancy attraction switched off
    let prior_only = displacement(&EnergyParams { w_occ: 0.0, ..wide })?;
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    let within = |v: &[f64]| v.iter().filter(|&&x| x < limit).count() as f64 / v.len().max(1) as f64;
    let mut grid = String::from("particle,displacement_full,displacement_prior_only\n");
    for (i, (a, c)) in full.iter().zip(&prior_only).enumerate() {
        let _ = writeln!(grid, "{i},{a},{c}");
    }
    checks.push(Check::new("grid_max_displacement", max(&full), Relation::Lt, limit));
    checks.push(Check::info("grid_fraction_still", within(&full), Relation::Ge, 1.0));
    checks.push(Check::info("prior_only_max_displacement", max(&prior_only), Relation::Lt, limit));
    checks.push(Check::info("prior_only_fraction_still", within(&prior_only), Relation::Ge, 1.0));
    Ok(ExperimentReport {
        id: ExperimentId::Prop3,
        checks,
        tables: vec![("decay.csv".into(), table), ("grid_displacement.csv".into(), grid)],
        empty: false,
    })
}

/// LiDAR-point particles plus FREE floaters, per [`SeedingConfig`].
pub fn seed_population(sb: &SceneBundle, s: &SeedingConfig) -> Result<ParticleSet> {
    let mut positions = if s.on_points > 0 {
        init_on_points(&sb.cloud, Some(s.on_points), s.seed)?.positions
    } else {
        Vec::new()
    };
    if s.in_free > 0 {
        positions.extend(init_uniform_in_free(&sb.bundle, s.in_free, s.seed.wrapping_add(1))?.positions);
    }
    Ok(ParticleSet::new(positions))
}

fn relax_and_measure(
    sb: &SceneBundle,
    start: &ParticleSet,
    params: &EnergyParams,
    relax: &RelaxConfig,
) -> Result<MetricsReport> {
    let mut ps = start.clone();
    run(&mut ps, &sb.bundle, params, relax)?;
    let norms = force_norms(&ps, &sb.bundle, params)?;
    compute_metrics(&ps, &sb.bundle, &norms)
}

fn metrics_table(key: &str, rows: &[(f64, MetricsReport)]) -> String {
    let mut s = format!("{key},{REPORT_HEADER}\n");
    for (k, m) in rows {
        let _ = writeln!(s, "{k},{}", m.csv_row());
    }
    s
}

fn row_for(rows: &[(f64, MetricsReport)], key: f64) -> Result<&MetricsReport> {
    rows.iter()
        .find(|(k, _)| (*k - key).abs() <= 1e-12 * key.abs().max(1.0))
        .map(|(_, m)| m)
        .ok_or_else(|| Error::Config(format!("sweep does not contain {key}")))
}

/// Geometric metrics against the OCC/UNK stiffness ratio at a fixed
/// geometric mean of the two spring constants. Ratios below one break the
/// stiffness hierarchy on purpose.
pub fn run_ratio_sweep(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let t = &cfg.ratio_sweep;
    let sb = cfg.build_scene()?;
    let start = seed_population(&sb, &cfg.seeding)?;
    let relax = RelaxConfig { mode: RelaxMode::Decoupled, photometric: None, ..cfg.relax.clone() };
    let rows = t
        .ratios
        .iter()
        .map(|&r| {
            let params = cfg.params.with_stiffness_ratio(r);
            params.validate_positive()?;
            Ok((r, relax_and_measure(&sb, &start, &params, &relax)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let base = row_for(&rows, t.baseline)?.occcov_pct;
    let bad = row_for(&rows, t.violating)?.occcov_pct;
    let near = row_for(&rows, t.near)?.occcov_pct;
    let rel = if base > 0.0 { (near - base).abs() / base } else { f64::INFINITY };
    Ok(ExperimentReport {
        id: ExperimentId::RatioSweep,
        checks: vec![
            Check::new("occcov_baseline_over_violating", base, Relation::Gt, bad),
            Check::new("occcov_near_relative_change", rel, Relation::Le, t.near_tolerance),
        ],
        tables: vec![("sweep.csv".into(), metrics_table("ratio", &rows))],
        empty: false,
    })
}

/// Final Leak across pruning thresholds, and with pruning disabled.
pub fn run_margin_sweep(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let t = &cfg.margin_sweep;
    let sb = cfg.build_scene()?;
    let start = seed_population(&sb, &cfg.seeding)?;
    let base = RelaxConfig { mode: RelaxMode::Decoupled, photometric: None, ..cfg.relax.clone() };
    if base.prune_every.is_none() {
        return Err(Error::Config("margin sweep needs prune_every".into()));
    }
    let rows = t
        .tau_margins
        .iter()
        .map(|&m| {
            let relax = RelaxConfig { tau_margin: m, ..base.clone() };
            Ok((m, relax_and_measure(&sb, &start, &cfg.params, &relax)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let unpruned = relax_and_measure(&sb, &start, &cfg.params, &RelaxConfig { prune_every: None, ..base })?;

    let mut checks: Vec<Check> = rows
        .iter()
        .map(|(m, r)| Check::new(&format!("leak_pct_tau_margin_{m}"), r.leak_pct, Relation::Le, t.max_leak_pct))
        .collect();
    checks.push(Check::new("leak_pct_unpruned", unpruned.leak_pct, Relation::Le, t.max_leak_pct_unpruned));
    let mut table = metrics_table("tau_margin", &rows);
    let _ = writeln!(table, "none,{}", unpruned.csv_row());
    Ok(ExperimentReport {
        id: ExperimentId::MarginSweep,
        checks,
        tables: vec![("sweep.csv".into(), table)],
        empty: false,
    })
}

/// Agreement between a force and the central finite difference of the
/// interpolated total energy.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub points: usize,
    pub step: f64,
    /// Relative errors of the relaxation force, ascending.
    pub errors: Vec<f64>,
    /// Relative errors of the exact interpolant gradient, ascending.
    pub interpolant_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.errors.last().copied().unwrap_or(0.0)
    }

    pub fn median_error(&self) -> f64 {
        self.errors.get(self.errors.len() / 2).copied().unwrap_or(0.0)
    }

    pub fn fraction_within(&self, tol: f64) -> f64 {
        self.errors.iter().filter(|&&e| e <= tol).count() as f64 / self.errors.len().max(1) as f64
    }

    pub fn interpolant_max_error(&self) -> f64 {
        self.interpolant_errors.last().copied().unwrap_or(0.0)
    }

    pub fn interpolant_median_error(&self) -> f64 {
        self.interpolant_errors.get(self.interpolant_errors.len() / 2).copied().unwrap_or(0.0)
    }
}

/// Every voxel within `margin` voxels (Chebyshev) of the containing voxel,
/// inside the grid, shares its label.
pub fn far_from_label_boundary(b: &FieldBundle, p: Vec3, margin: usize) -> bool {
    let Some([i, j, k]) = b.frame().voxel_of(p) else {
        return false;
    };
    let d = b.dims();
    let r = margin;
    if i < r || j < r || k < r || i + r >= d.nx || j + r >= d.ny || k + r >= d.nz {
        return false;
    }
    let l = b.partition.label(i, j, k);
    for c in k - r..=k + r {
        for bb in j - r..=j + r {
            for a in i - r..=i + r {
                if b.partition.label(a, bb, c) != l {
                    return false;
                }
            }
        }
    }
    true
}

fn fd_energy_gradient(b: &FieldBundle, p: Vec3, h: f64, params: &EnergyParams) -> Result<Vec3> {
    let mut g = Vec3::ZERO;
    for a in 0..3 {
        let mut hi = p;
        let mut lo = p;
        hi[a] += h;
        lo[a] -= h;
        g[a] = (total_force(b, hi, params)?.e_total - total_force(b, lo, params)?.e_total) / (2.0 * h);
    }
    Ok(g)
}

/// Relative error `|F + grad_fd E| / max(|grad_fd E|, 1e-12)` at `points`
/// random positions at least `margin` voxels from any label boundary, with
/// finite-difference step `voxel_size * step_factor`.
pub fn gradient_check(
    b: &FieldBundle,
    params: &EnergyParams,
    points: usize,
    margin: usize,
    step_factor: f64,
    seed: u64,
) -> Result<GradCheck> {
    let h = b.voxel_size() * step_factor;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = Vec::with_capacity(points);
    let mut interpolant_errors = Vec::with_capacity(points);
    let mut attempts = 0usize;
    while errors.len() < points {
        attempts += 1;
        if attempts > 1000 * points.max(1) {
            return Err(Error::EmptyInput("too few positions away from label boundaries"));
        }
        let p = random_in(&mut rng, b);
        if !far_from_label_boundary(b, p, margin) {
            continue;
        }
        let g = fd_energy_gradient(b, p, h, params)?;
        let denom = g.norm().max(1e-12);
        let f = total_force(b, p, params)?.force;
        errors.push((f + g).norm() / denom);
        let fi = interpolant_force(b, p, params)?;
        interpolant_errors.push((fi + g).norm() / denom);
    }
    errors.sort_by(f64::total_cmp);
    interpolant_errors.sort_by(f64::total_cmp);
    Ok(GradCheck { points, step: h, errors, interpolant_errors })
}

pub fn histogram_of(ps: &ParticleSet, norms: &[f64], bins: usize) -> Result<Histogram> {
    force_norm_histogram(ps, norms, bins)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiment_ids_roundtrip() {
        for id in ExperimentId::ALL {
            assert_eq!(id.as_str().parse::<ExperimentId>().unwrap(), id);
        }
        assert!("theorem3".parse::<ExperimentId>().is_err());
    }

    #[test]
    fn verdict_reports_first_failure() {
        let r = ExperimentReport {
            id: ExperimentId::Prop3,
            checks: vec![
                Check::new("a", 1.0, Relation::Le, 2.0),
                Check::info("b", 5.0, Relation::Le, 1.0),
                Check::new("c", 3.0, Relation::Lt, 2.5),
            ],
            tables: Vec::new(),
            empty: false,
        };
        assert!(!r.passed());
        assert_eq!(r.verdict_line(), "FAIL 3 2.5");
        assert!(r.to_csv().lines().count() == 4);
        let ok = ExperimentReport { checks: r.checks[..2].to_vec(), ..r };
        assert!(ok.passed());
        assert_eq!(ok.verdict_line(), "PASS 1 2");
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(ExperimentConfig::from_json(r#"{"theorem1": {"particles": 3}}"#).is_ok());
        assert!(ExperimentConfig::from_json(r#"{"theorem1": {"particle": 3}}"#).is_err());
    }

    #[test]
    fn prop3_closed_form_table() {
        let t = Prop3Config::default();
        let f1 = prop3_magnitude(t.d, t.w, 1.0);
        let f16 = prop3_magnitude(t.d, t.w, 16.0);
        let f32_ = prop3_magnitude(t.d, t.w, 32.0);
        assert!((f1 - (-0.5f64).exp()).abs() < 1e-15);
        assert!((f16 - (-1.0f64 / 512.0).exp() / 256.0).abs() < 1e-15);
        assert!((f32_ / f16 - 0.25).abs() < 0.01);
        assert_eq!(prop3_magnitude(0.0, 1.0, 4.0), 0.0);
    }
}
