use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use energs_core::config::FieldConfig;
use energs_core::field::{carve, read_egsf, write_egsf, FieldBundle};
use energs_core::lidar::{merge_scans, scan_all, PointCloud, ScanConfig, SensorScan};
use energs_core::metrics::{compute_metrics, force_norm_histogram, force_norms};
use energs_core::particles::{init_on_points, init_uniform_in_domain, init_uniform_in_free, ParticleSet};
use energs_core::photometric::PhotometricField;
use energs_core::relax::{run, RelaxConfig, RelaxMode};
use energs_core::scene::{generate_canyon, CanyonSpec, SceneDescription};
use energs_core::validate::{gradient_check, run_experiment, ExperimentConfig, ExperimentId};
use energs_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "energs", version, about = "LiDAR-conditioned voxel energy field and particle relaxation")]
struct Cli {
    /// Seed for every random draw of the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON configuration file; its schema depends on the command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file (or directory for `validate`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a street-canyon scene (config: canyon parameters).
    GenScene,
    /// Simulate LiDAR scans of a scene (config: scan parameters).
    Scan {
        #[arg(long)]
        scene: PathBuf,
        /// Point cloud output, `x y z` per line. Defaults to `<out>.xyz`.
        #[arg(long)]
        points: Option<PathBuf>,
    },
    /// Carve the tri-state partition and precompute distance grids (config: field parameters).
    BuildField {
        #[arg(long)]
        scene: PathBuf,
        /// Scan records from `scan`; the scene is scanned afresh when omitted.
        #[arg(long)]
        scans: Option<PathBuf>,
        #[arg(long)]
        voxel_size: Option<f64>,
    },
    /// Relax a particle set on a field dump (config: energy parameters).
    Relax(RelaxArgs),
    /// Geometric metrics of a particle file (config: energy parameters).
    Metrics {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        particles: PathBuf,
        /// Also write a force-norm histogram with this many bins.
        #[arg(long)]
        histogram_bins: Option<usize>,
    },
    /// Run a scripted experiment and print its verdict (config: experiment parameters).
    Validate {
        /// theorem1, theorem2, prop3, ratio_sweep, margin_sweep, or all.
        experiment: String,
    },
    /// Compare the force with finite differences of the energy (config: energy parameters).
    Gradcheck {
        /// Field dump; the canonical scene is built when omitted.
        #[arg(long)]
        field: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Minimum distance to a label boundary, in voxels.
        #[arg(long, default_value_t = 2)]
        margin: usize,
        #[arg(long, default_value_t = 0.01)]
        step_factor: f64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum InitSpec {
    OnPoints,
    UniformInFree,
    UniformInDomain,
    FromFile,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Decoupled,
    Joint,
}

#[derive(Args, Debug)]
struct RelaxArgs {
    #[arg(long)]
    field: PathBuf,
    #[arg(long, value_enum)]
    init: InitSpec,
    /// Particle count; `on-points` uses every point when omitted.
    #[arg(long)]
    n: Option<usize>,
    /// Point cloud for `on-points`, particle file for `from-file`.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "decoupled")]
    mode: ModeArg,
    /// Photometric wells as JSON.
    #[arg(long)]
    photometric: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    /// Relaxation settings as JSON.
    #[arg(long)]
    relax_config: Option<PathBuf>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    prune_every: Option<usize>,
    #[arg(long, conflicts_with = "prune_every")]
    no_prune: bool,
    #[arg(long)]
    tau_margin: Option<f64>,
    /// Record per-iteration positions of the first N particles.
    #[arg(long, default_value_t = 0)]
    track: usize,
}

/// Provenance of one command, written next to each output as `<file>.manifest`.
struct RunManifest {
    stage: &'static str,
    seed: u64,
    config: Option<PathBuf>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl RunManifest {
    fn new(stage: &'static str, cli: &Cli) -> Self {
        RunManifest {
            stage,
            seed: cli.seed,
            config: cli.config.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    fn write(&mut self, path: &Path, body: &[u8]) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, body)?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    fn text(&self) -> String {
        let list = |v: &[PathBuf]| v.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(";");
        format!(
            "stage={}\ntool_version={}\nseed={}\nconfig={}\ninputs={}\noutputs={}\nwall_clock_s={:.3}\n",
            self.stage,
            env!("CARGO_PKG_VERSION"),
            self.seed,
            self.config.as_ref().map_or(String::new(), |p| p.display().to_string()),
            list(&self.inputs),
            list(&self.outputs),
            self.started.elapsed().as_secs_f64()
        )
    }

    fn finish(self) -> Result<()> {
        let text = self.text();
        for out in &self.outputs {
            let mut side = out.clone().into_os_string();
            side.push(".manifest");
            fs::write(side, &text)?;
        }
        Ok(())
    }
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn need_out(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().ok_or_else(|| Error::InvalidArgument("--out is required".into()))
}

fn read_json<T: serde::de::DeserializeOwned>(p: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(p)?)?)
}

fn config_or_default<T: serde::de::DeserializeOwned + Default>(cli: &Cli) -> Result<T> {
    cli.config.as_deref().map_or_else(|| Ok(T::default()), read_json)
}

fn field_config(cli: &Cli) -> Result<FieldConfig> {
    cli.config.as_deref().map_or_else(|| Ok(FieldConfig::default()), FieldConfig::load)
}

fn load_scene(p: &Path) -> Result<SceneDescription> {
    SceneDescription::from_json(&fs::read_to_string(p)?)
}

fn load_field(p: &Path) -> Result<FieldBundle> {
    read_egsf(BufReader::new(File::open(p)?))
}

fn load_points(p: &Path) -> Result<PointCloud> {
    PointCloud::from_reader(BufReader::new(File::open(p)?))
}

fn gen_scene(cli: &Cli) -> Result<()> {
    let out = need_out(cli)?;
    let spec: CanyonSpec = config_or_default(cli)?;
    let mut m = RunManifest::new("gen-scene", cli);
    let scene = generate_canyon(cli.seed, &spec)?;
    m.write(out, scene.to_json()?.as_bytes())?;
    println!("{} primitives, {} sensors", scene.primitives().count(), scene.sensors.len());
    m.finish()
}

fn scan_scene(scene: &SceneDescription, cfg: &ScanConfig, seed: u64) -> Result<(PointCloud, Vec<SensorScan>)> {
    let cfg = ScanConfig { noise_seed: seed, ..cfg.clone() };
    merge_scans(scan_all(scene, &cfg)?)
}

fn scan(cli: &Cli, scene_path: &Path, points: Option<&Path>) -> Result<()> {
    let out = need_out(cli)?;
    let cfg: ScanConfig = config_or_default(cli)?;
    cfg.validate()?;
    let mut m = RunManifest::new("scan", cli);
    m.input(scene_path);
    let scene = load_scene(scene_path)?;
    let (cloud, scans) = scan_scene(&scene, &cfg, cli.seed)?;
    m.write(out, serde_json::to_string(&scans)?.as_bytes())?;
    let points = points.map_or_else(|| with_suffix(out, ".xyz"), Path::to_path_buf);
    m.write(&points, cloud.to_text().as_bytes())?;
    println!("{} scans, {} hit points", scans.len(), cloud.len());
    m.finish()
}

fn build_field(cli: &Cli, scene_path: &Path, scans_path: Option<&Path>, voxel_size: Option<f64>) -> Result<()> {
    let out = need_out(cli)?;
    let mut cfg = field_config(cli)?;
    if let Some(v) = voxel_size {
        cfg.voxel_size = v;
    }
    cfg.validate()?;
    let mut m = RunManifest::new("build-field", cli);
    m.input(scene_path);
    let scene = load_scene(scene_path)?;
    let (cloud, scans) = match scans_path {
        Some(p) => {
            m.input(p);
            merge_scans(read_json::<Vec<SensorScan>>(p)?)?
        }
        None => scan_scene(&scene, &cfg.scan, cli.seed)?,
    };
    let partition = carve(&scans, scene.domain_bounds, cfg.voxel_size)?;
    let bundle = FieldBundle::new(partition, &cloud);
    let mut buf = Vec::new();
    write_egsf(&bundle, &mut buf)?;
    m.write(out, &buf)?;
    let [occ, free, unk] = bundle.partition.counts();
    let d = bundle.dims();
    println!("dims {}x{}x{}", d.nx, d.ny, d.nz);
    println!("OCC {occ}\nFREE {free}\nUNK {unk}");
    m.finish()
}

fn relax(cli: &Cli, a: &RelaxArgs) -> Result<()> {
    let out = need_out(cli)?;
    let params = field_config(cli)?.energy();
    let mut cfg: RelaxConfig = a.relax_config.as_deref().map_or_else(|| Ok(RelaxConfig::default()), read_json)?;
    cfg.mode = match a.mode {
        ModeArg::Decoupled => RelaxMode::Decoupled,
        ModeArg::Joint => RelaxMode::Joint,
    };
    if let Some(p) = &a.photometric {
        let f: PhotometricField = read_json(p)?;
        f.validate()?;
        cfg.photometric = Some(f);
    }
    if let Some(i) = a.iters {
        cfg.iterations = i;
    }
    if let Some(e) = a.eta {
        cfg.eta_mu = e;
    }
    if a.no_prune {
        cfg.prune_every = None;
    } else if let Some(k) = a.prune_every {
        cfg.prune_every = Some(k);
    }
    if let Some(t) = a.tau_margin {
        cfg.tau_margin = t;
    }
    cfg.validate()?;

    let mut m = RunManifest::new("relax", cli);
    m.input(&a.field);
    let bundle = load_field(&a.field)?;
    let input = |what: &str| {
        a.input.as_deref().ok_or_else(|| Error::InvalidArgument(format!("--init {what} needs --input")))
    };
    let need_n = || a.n.ok_or_else(|| Error::InvalidArgument("this --init needs --n".into()));
    let ps = match a.init {
        InitSpec::OnPoints => {
            let p = input("on-points")?;
            m.input(p);
            init_on_points(&load_points(p)?, a.n, cli.seed)?
        }
        InitSpec::UniformInFree => init_uniform_in_free(&bundle, need_n()?, cli.seed)?,
        InitSpec::UniformInDomain => init_uniform_in_domain(&bundle, need_n()?, cli.seed),
        InitSpec::FromFile => {
            let p = input("from-file")?;
            m.input(p);
            ParticleSet::new(load_points(p)?.points)
        }
    };
    let mut ps = ps.track_first(a.track);
    let log = run(&mut ps, &bundle, &params, &cfg)?;
    m.write(out, ps.to_text().as_bytes())?;
    m.write(&with_suffix(out, ".trajectory.csv"), log.to_csv().as_bytes())?;
    if a.track > 0 {
        m.write(&with_suffix(out, ".tracks.csv"), log.tracks_csv().as_bytes())?;
    }
    let last = log.rows.last().expect("trajectory has an initial row");
    println!("alive {} of {}, total energy {}", last.alive, ps.len(), last.total_energy);
    m.finish()
}

fn metrics(cli: &Cli, field: &Path, particles: &Path, bins: Option<usize>) -> Result<()> {
    let out = need_out(cli)?;
    let params = field_config(cli)?.energy();
    let mut m = RunManifest::new("metrics", cli);
    m.input(field);
    m.input(particles);
    let bundle = load_field(field)?;
    let ps = ParticleSet::new(load_points(particles)?.points);
    let norms = force_norms(&ps, &bundle, &params)?;
    let report = compute_metrics(&ps, &bundle, &norms)?;
    m.write(out, report.to_csv().as_bytes())?;
    if let Some(bins) = bins {
        let h = force_norm_histogram(&ps, &norms, bins)?;
        m.write(&with_suffix(out, ".histogram.csv"), h.to_csv().as_bytes())?;
    }
    print!("{}", report.to_csv());
    if report.empty {
        println!("no alive particles");
    }
    m.finish()
}

fn validate(cli: &Cli, which: &str) -> Result<bool> {
    let cfg: ExperimentConfig = config_or_default(cli)?;
    let ids = if which == "all" { ExperimentId::ALL.to_vec() } else { vec![which.parse()?] };
    let mut all_pass = true;
    for id in ids {
        let started = Instant::now();
        let report = run_experiment(id, &cfg)?;
        if let Some(dir) = &cli.out {
            let mut m = RunManifest::new("validate", cli);
            m.started = started;
            let dir = dir.join(id.as_str());
            m.write(&dir.join("report.csv"), report.to_csv().as_bytes())?;
            for (name, body) in &report.tables {
                m.write(&dir.join(name), body.as_bytes())?;
            }
            m.finish()?;
        }
        for t in report.tables.iter().filter(|(n, _)| n == "decay.csv") {
            print!("{}", t.1);
        }
        for c in &report.checks {
            log::info!("{id} {} measured={} threshold={} pass={}", c.name, c.measured, c.threshold, c.pass);
        }
        println!("{id}: {}", report.verdict_line());
        all_pass &= report.passed();
    }
    Ok(all_pass)
}

fn gradcheck(
    cli: &Cli,
    field: Option<&Path>,
    n: usize,
    margin: usize,
    step_factor: f64,
    tolerance: f64,
) -> Result<bool> {
    let params = field_config(cli)?.energy();
    let mut m = RunManifest::new("gradcheck", cli);
    let bundle = match field {
        Some(p) => {
            m.input(p);
            load_field(p)?
        }
        None => energs_core::validate::canonical()?.bundle,
    };
    let g = gradient_check(&bundle, &params, n, margin, step_factor, cli.seed)?;
    let pass = g.max_error() <= tolerance;
    let body = format!(
        "points,step,max_error,median_error,fraction_within,interpolant_max_error,interpolant_median_error\n{},{},{},{},{},{},{}\n",
        g.points,
        g.step,
        g.max_error(),
        g.median_error(),
        g.fraction_within(tolerance),
        g.interpolant_max_error(),
        g.interpolant_median_error()
    );
    if let Some(out) = &cli.out {
        m.write(out, body.as_bytes())?;
    }
    print!("{body}");
    println!("{} {} {}", if pass { "PASS" } else { "FAIL" }, g.max_error(), tolerance);
    m.finish()?;
    Ok(pass)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let verdict = match &cli.cmd {
        Command::GenScene => gen_scene(&cli).map(|_| true),
        Command::Scan { scene, points } => scan(&cli, scene, points.as_deref()).map(|_| true),
        Command::BuildField { scene, scans, voxel_size } => {
            build_field(&cli, scene, scans.as_deref(), *voxel_size).map(|_| true)
        }
        Command::Relax(a) => relax(&cli, a).map(|_| true),
        Command::Metrics { field, particles, histogram_bins } => {
            metrics(&cli, field, particles, *histogram_bins).map(|_| true)
        }
        Command::Validate { experiment } => validate(&cli, experiment),
        Command::Gradcheck { field, n, margin, step_factor, tolerance } => {
            gradcheck(&cli, field.as_deref(), *n, *margin, *step_factor, *tolerance)
        }
    };
    let _ = std::io::stdout().flush();
    match verdict {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
