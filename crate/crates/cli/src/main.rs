//! `ngrf`: generate synthetic channel datasets, train field models, evaluate,
//! predict and benchmark them.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ngrf_core::antenna::ArraySpec;
use ngrf_core::baselines::MlpBaseline;
use ngrf_core::checkpoint::{load_checkpoint, save_checkpoint, AnyModel, Checkpoint};
use ngrf_core::dataset::{Dataset, Measurement};
use ngrf_core::math::Aabb;
use ngrf_core::model::{FieldModel, Query};
use ngrf_core::raysim::{generate_dataset, samples_for_density, Scene};
use ngrf_core::renderer::{latency_stats, predict_latency_bench, NgrfConfig, NgrfModel};
use ngrf_core::splat::{Cs1Model, Cs2Model, SplatConfig};
use ngrf_core::trainer::{evaluate_snr, save_metrics_csv, train, TrainConfig, TrainOutcome};
use ngrf_core::Vec3;
use serde::{Deserialize, Serialize};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "ngrf", version, about = "Gaussian radio field toolkit")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "NGRF_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ray-trace a scene into a dataset file.
    Generate(GenerateArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Report the SNR of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Print the predicted channel matrix at one position.
    Predict(PredictArgs),
    /// Time single-transmitter rendering.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 10 × 10 × 3 m room at 2.4 GHz.
    Conference,
    /// The same room at 6 GHz.
    Conference6g,
}

#[derive(Clone, Copy, ValueEnum)]
enum Antennas {
    Siso,
    /// 4 × 4 URA transmitter, 2-element ULA receiver.
    Mimo,
}

#[derive(Args)]
struct GenerateArgs {
    /// Scene description (JSON).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    scene: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Antenna arrays for a preset scene.
    #[arg(long, value_enum, default_value = "siso", requires = "preset")]
    antennas: Antennas,
    #[arg(long, conflicts_with = "density", required_unless_present = "density")]
    samples: Option<usize>,
    /// Measurements per cubic foot of scene volume.
    #[arg(long)]
    density: Option<f64>,
    /// Transmitter position `x,y,z`; defaults to the scene's.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    tx: Option<Vec3>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Renderer {
    Ngrf,
    Cs1,
    Cs2,
    Mlp,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Run configuration (JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    renderer: Option<Renderer>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    gaussians: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patience: Option<usize>,
    /// Keep Gaussian centers at their initial positions.
    #[arg(long)]
    freeze_positions: bool,
    /// Output directory for model.ckpt, metrics.csv and resolved_config.json.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Split {
    All,
    Train,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Which part of the training split to score.
    #[arg(long, value_enum, default_value = "all")]
    split: Split,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    tx: Vec3,
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    rx: Vec3,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 200)]
    repeats: usize,
    /// Transmitter position; defaults to the center of the model bounds.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    tx: Option<Vec3>,
}

fn parse_vec3(s: &str) -> Result<Vec3, String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    match v[..] {
        [x, y, z] if v.iter().all(|c| c.is_finite()) => Ok(Vec3::new(x, y, z)),
        _ => Err(format!("expected three finite numbers `x,y,z`, got `{s}`")),
    }
}

/// Everything that determines a training run. Written to `resolved_config.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    renderer: Renderer,
    /// Fraction of the dataset used for training; the rest scores checkpoints.
    train_fraction: f64,
    train: TrainConfig,
    ngrf: NgrfConfig,
    splat: SplatModelConfig,
    mlp: MlpConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            renderer: Renderer::Ngrf,
            train_fraction: 0.8,
            train: TrainConfig::default(),
            ngrf: NgrfConfig::default(),
            splat: SplatModelConfig::default(),
            mlp: MlpConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SplatModelConfig {
    n_gaussians: usize,
    s_init: f64,
}

impl Default for SplatModelConfig {
    fn default() -> Self {
        let d = SplatConfig::default();
        SplatModelConfig { n_gaussians: d.n_gaussians, s_init: d.s_init }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct MlpConfig {
    bands: usize,
    hidden: Vec<usize>,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig { bands: 16, hidden: vec![256; 4] }
    }
}

/// Bad run configuration; reported with the usage exit code.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_ckpt(path: &Path) -> anyhow::Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_generate(a: GenerateArgs) -> anyhow::Result<()> {
    let scene = match (&a.scene, a.preset) {
        (Some(path), _) => Scene::load(path).with_context(|| format!("loading scene {}", path.display()))?,
        (None, Some(p)) => {
            let (tx, rx) = match a.antennas {
                Antennas::Siso => (ArraySpec::single(), ArraySpec::single()),
                Antennas::Mimo => {
                    (ArraySpec::Ura { rows: 4, cols: 4, spacing_lambda: 0.5 }, ArraySpec::Ula { n: 2, spacing_lambda: 0.5 })
                }
            };
            let f = match p {
                Preset::Conference => 2.4e9,
                Preset::Conference6g => 6e9,
            };
            Scene::room(10.0, 10.0, 3.0, f, tx, rx)?
        }
        (None, None) => unreachable!("clap requires a scene or a preset"),
    };
    let tx = match a.tx.or(scene.tx_position) {
        Some(t) => t,
        None => bail!(ngrf_core::Error::InvalidArgument("the scene has no tx_position; pass --tx".into())),
    };
    let count = match (a.samples, a.density) {
        (Some(n), _) => n,
        (None, Some(d)) => samples_for_density(&scene.bounds, d),
        (None, None) => unreachable!("clap requires samples or density"),
    };
    if count == 0 {
        bail!(ngrf_core::Error::InvalidArgument("the requested sample count is zero".into()));
    }
    let t = Instant::now();
    let (ds, stats) = generate_dataset(&scene, tx, count, a.seed)?;
    ds.save(&a.output).with_context(|| format!("writing {}", a.output.display()))?;
    let mut report = serde_json::to_value(&stats)?;
    report["output"] = a.output.display().to_string().into();
    report["seconds"] = t.elapsed().as_secs_f64().into();
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn resolve_config(a: &TrainArgs) -> anyhow::Result<RunConfig> {
    resolve_config_inner(a).map_err(|e| UsageError(format!("{e:#}")).into())
}

fn resolve_config_inner(a: &TrainArgs) -> anyhow::Result<RunConfig> {
    let mut c: RunConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(r) = a.renderer {
        c.renderer = r;
    }
    if let Some(v) = a.iterations {
        c.train.iterations = v;
    }
    if let Some(v) = a.batch_size {
        c.train.batch_size = v;
    }
    if let Some(v) = a.lr {
        c.train.lr_other = v;
    }
    if let Some(v) = a.gaussians {
        c.ngrf.n_gaussians = v;
        c.splat.n_gaussians = v;
    }
    if let Some(v) = a.seed {
        c.train.seed = v;
    }
    if let Some(v) = a.patience {
        c.train.patience = Some(v);
    }
    if a.freeze_positions {
        c.train.train_positions = false;
    }
    if !(c.train_fraction > 0.0 && c.train_fraction <= 1.0) {
        bail!(ngrf_core::Error::InvalidArgument("train_fraction must be in (0, 1]".into()));
    }
    c.train.validate()?;
    Ok(c)
}

struct Fitted {
    model: AnyModel,
    best_iteration: usize,
    best_snr_db: f64,
    iterations_run: usize,
    converged_at: Option<usize>,
    seconds: f64,
    history: Vec<ngrf_core::trainer::MetricRow>,
}

fn fit<M: FieldModel>(model: M, tr: &[Measurement], te: &[Measurement], cfg: &TrainConfig, wrap: fn(M) -> AnyModel) -> anyhow::Result<Fitted> {
    let TrainOutcome { best, best_iteration, best_snr_db, iterations_run, history, converged_at, seconds, .. } =
        train(model, tr, te, cfg)?;
    Ok(Fitted { model: wrap(best), best_iteration, best_snr_db, iterations_run, converged_at, seconds, history })
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = resolve_config(&a)?;
    let ds = load_dataset(&a.data)?;
    if ds.is_empty() {
        bail!(ngrf_core::Error::EmptyDataset);
    }
    let bounds = ds.bounds_or_fit()?;
    let (tr, te) = ds.split(cfg.train_fraction, cfg.train.seed);
    std::fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    write_json(&a.output.join("resolved_config.json"), &cfg)?;

    let seed = cfg.train.seed;
    let splat = || -> anyhow::Result<SplatConfig> {
        let (Some(tx_array), Some(rx_array)) = (ds.tx_array, ds.rx_array) else {
            bail!(ngrf_core::Error::InvalidArgument("splatting renderers need the dataset's antenna layout".into()));
        };
        Ok(SplatConfig { n_gaussians: cfg.splat.n_gaussians, s_init: cfg.splat.s_init, carrier_hz: ds.carrier_hz, tx_array, rx_array })
    };
    let t = &cfg.train;
    let out = match cfg.renderer {
        Renderer::Ngrf => fit(NgrfModel::new(cfg.ngrf.clone(), ds.nt, ds.nr, &bounds, seed)?, &tr, &te, t, AnyModel::Ngrf)?,
        Renderer::Cs1 => fit(Cs1Model::new(splat()?, &bounds, seed)?, &tr, &te, t, AnyModel::Cs1)?,
        Renderer::Cs2 => fit(Cs2Model::new(splat()?, &bounds, seed)?, &tr, &te, t, AnyModel::Cs2)?,
        Renderer::Mlp => fit(MlpBaseline::new(ds.nt, ds.nr, cfg.mlp.bands, &cfg.mlp.hidden, seed), &tr, &te, t, AnyModel::Mlp)?,
    };
    save_metrics_csv(&out.history, a.output.join("metrics.csv"))?;
    let ck = Checkpoint {
        model: out.model,
        iteration: out.best_iteration,
        train_config: Some(cfg.train.clone()),
        history: out.history,
        bounds: Some(bounds),
        carrier_hz: Some(ds.carrier_hz),
    };
    save_checkpoint(&ck, a.output.join("model.ckpt"))?;
    let report = serde_json::json!({
        "renderer": cfg.renderer,
        "train_samples": tr.len(),
        "test_samples": te.len(),
        "best_iteration": out.best_iteration,
        "best_snr_db": out.best_snr_db,
        "iterations_run": out.iterations_run,
        "converged_at": out.converged_at,
        "seconds": out.seconds,
    });
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn check_dims(ck: &Checkpoint, ds: &Dataset) -> anyhow::Result<()> {
    if ck.model.dims() != (ds.nt, ds.nr) {
        bail!(ngrf_core::Error::Shape(format!(
            "checkpoint is {:?} (N_t, N_r) but the dataset is {:?}",
            ck.model.dims(),
            (ds.nt, ds.nr)
        )));
    }
    Ok(())
}

struct Scored<'a>(&'a AnyModel);

impl Scored<'_> {
    fn snr(&self, data: &[Measurement]) -> anyhow::Result<f64> {
        Ok(match self.0 {
            AnyModel::Ngrf(m) => evaluate_snr(m, data)?,
            AnyModel::Cs1(m) => evaluate_snr(m, data)?,
            AnyModel::Cs2(m) => evaluate_snr(m, data)?,
            AnyModel::Mlp(m) => evaluate_snr(m, data)?,
        })
    }
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let ck = load_ckpt(&a.ckpt)?;
    let ds = load_dataset(&a.data)?;
    check_dims(&ck, &ds)?;
    let records = match a.split {
        Split::All => ds.records.clone(),
        Split::Train | Split::Test => {
            let Some(tc) = &ck.train_config else {
                bail!(ngrf_core::Error::InvalidArgument("the checkpoint records no training split; use --split all".into()));
            };
            let (tr, te) = ds.split(resolved_fraction(&a.ckpt), tc.seed);
            if matches!(a.split, Split::Train) { tr } else { te }
        }
    };
    let snr = Scored(&ck.model).snr(&records)?;
    let report = serde_json::json!({
        "renderer": ck.model.kind().tag(),
        "split": a.split,
        "count": records.len(),
        "snr_db": snr,
        "n_t": ds.nt,
        "n_r": ds.nr,
    });
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

/// Train fraction from `resolved_config.json` beside the checkpoint, if present.
fn resolved_fraction(ckpt: &Path) -> f64 {
    let path = ckpt.with_file_name("resolved_config.json");
    read_json::<RunConfig>(&path).map(|c| c.train_fraction).unwrap_or_else(|_| RunConfig::default().train_fraction)
}

fn cmd_predict(a: PredictArgs) -> anyhow::Result<()> {
    let ck = load_ckpt(&a.ckpt)?;
    let h = ck.model.predict(&[Query { tx: a.tx, rx: a.rx }])?.remove(0);
    println!("# {} x {} (tx rows, rx columns), entries re,im", h.nt, h.nr);
    for t in 0..h.nt {
        let row: Vec<String> = (0..h.nr).map(|r| h.get(t, r)).map(|z| format!("{:.8e},{:.8e}", z.re, z.im)).collect();
        println!("{}", row.join(" "));
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> anyhow::Result<()> {
    if a.batch == 0 {
        bail!(ngrf_core::Error::InvalidArgument("batch must be positive".into()));
    }
    let ck = load_ckpt(&a.ckpt)?;
    let bounds = ck.bounds.unwrap_or(Aabb::new(Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0)));
    let tx = a.tx.unwrap_or((bounds.min + bounds.max) * 0.5);
    let stats = match &ck.model {
        AnyModel::Ngrf(m) => predict_latency_bench(m, tx, &bounds, a.batch, a.repeats)?,
        other => {
            let e = bounds.extent();
            let mut times = Vec::with_capacity(a.repeats);
            for k in 0..=a.repeats {
                // Deterministic receiver spread over the bounds.
                let q: Vec<Query> = (0..a.batch)
                    .map(|i| {
                        let s = ((k * a.batch + i) as f64 * 0.618_033_988_749_895).fract();
                        Query { tx, rx: bounds.min + Vec3::new(s * e.x, (1.0 - s) * e.y, 0.5 * e.z) }
                    })
                    .collect();
                let t0 = Instant::now();
                std::hint::black_box(other.predict(&q)?);
                if k > 0 {
                    times.push(t0.elapsed().as_secs_f64() * 1e3);
                }
            }
            latency_stats(&mut times, a.batch)
        }
    };
    let mut report = serde_json::to_value(&stats)?;
    report["renderer"] = ck.model.kind().tag().into();
    report["threads"] = rayon::current_num_threads().into();
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<UsageError>()) {
        return EXIT_USAGE;
    }
    match err.chain().find_map(|e| e.downcast_ref::<ngrf_core::Error>()) {
        Some(e) if e.is_numeric() => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
