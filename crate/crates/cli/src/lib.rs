//! Command implementations behind the `rpeflow` binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rpeflow::dataset::{load_split, make_dataset, Manifest, SpeedMode};
use rpeflow::geometry::PointSet;
use rpeflow::model::ModelConfig;
use rpeflow::objectives::MetricReport;
use rpeflow::scenegen::SceneConfig;
use rpeflow::tensor::{Bound, Tape};
use rpeflow::train::{evaluate_split, load_model, prepare_split, train_run, Predictor, RunConfig, Trainer, LogRow};
use rpeflow::viz::{event_image, flow_image, sceneflow_error_image};
use rpeflow::{Error, Real, Result};

pub mod suites;

pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TXT: &str = "metrics.txt";

#[derive(Debug, Parser)]
#[command(name = "rpeflow", version, about = "Joint optical and scene flow from frames, points and events")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model on a dataset's train split.
    Train(TrainArgs),
    /// Score a checkpoint (or the ground truth) on a split.
    Eval(EvalArgs),
    /// Compare analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Write flow, event and scene-flow error images for one sample.
    Viz(VizArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SpeedArg {
    Slow,
    Fast,
    Mixed,
}

impl From<SpeedArg> for SpeedMode {
    fn from(s: SpeedArg) -> Self {
        match s {
            SpeedArg::Slow => SpeedMode::Slow,
            SpeedArg::Fast => SpeedMode::Fast,
            SpeedArg::Mixed => SpeedMode::Mixed,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub count: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.75)]
    pub train_fraction: f64,
    #[arg(long, value_enum, default_value_t = SpeedArg::Mixed)]
    pub speed: SpeedArg,
    /// Scene configuration JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub points: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Run configuration JSON (`{"model": {..}, "train": {..}}`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from the tiny model configuration.
    #[arg(long)]
    pub tiny: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Per-level loss sums instead of means.
    #[arg(long)]
    pub raw_sums: bool,
    /// Feed zero event voxels.
    #[arg(long)]
    pub no_event: bool,
    /// Drop the feature loss (beta = 0).
    #[arg(long)]
    pub no_mi: bool,
    /// Concatenation plus 1x1 mixing instead of attention fusion.
    #[arg(long)]
    pub concat_fusion: bool,
    /// Train in 64-bit and store 64-bit checkpoints.
    #[arg(long)]
    pub f64: bool,
    /// Continue from a checkpoint directory; its configuration is used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Print a progress line every this many iterations (0 = silent).
    #[arg(long, default_value_t = 10)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory (e.g. `run/final`).
    #[arg(long, required_unless_present = "gt", conflicts_with = "gt")]
    pub checkpoint: Option<PathBuf>,
    /// Score the ground truth against itself.
    #[arg(long)]
    pub gt: bool,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Directory for metrics.json and metrics.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub f64: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Also write the full report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: String,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Flow magnitude (pixels) rendered at full saturation.
    #[arg(long, default_value_t = 5.0)]
    pub max_flow: f64,
    /// Adds predicted flow and scene-flow error images.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

fn read_json<S: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn summarize(m: &Manifest, out: &Path) -> String {
    format!(
        "wrote {} samples to {} ({} train, {} val, speed {:?}, seed {})",
        m.train.len() + m.val.len(),
        out.display(),
        m.train.len(),
        m.val.len(),
        m.speed,
        m.seed
    )
}

pub fn run_gen(a: &GenArgs) -> Result<Manifest> {
    let mut cfg: SceneConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SceneConfig::default(),
    };
    if let Some(w) = a.width {
        cfg.width = w;
    }
    if let Some(h) = a.height {
        cfg.height = h;
    }
    if let Some(n) = a.points {
        cfg.num_points = n;
    }
    make_dataset(&cfg, a.count as usize, a.train_fraction, a.speed.into(), &a.out, a.seed)
}

/// Run configuration from `--config`/`--tiny` with flag overrides applied.
pub fn train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &a.config {
        Some(p) => RunConfig::from_json(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => RunConfig::default(),
    };
    if a.tiny {
        cfg.model = ModelConfig {
            concat_fusion: cfg.model.concat_fusion,
            ..ModelConfig::tiny()
        };
    }
    let t = &mut cfg.train;
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.iterations {
        t.iterations = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.optimizer.lr = v;
    }
    if let Some(v) = a.weight_decay {
        t.optimizer.weight_decay = v;
    }
    if let Some(v) = a.alpha {
        t.loss.alpha = v;
    }
    if let Some(v) = a.beta {
        t.loss.beta = v;
    }
    t.loss.raw_sums |= a.raw_sums;
    t.no_event |= a.no_event;
    if a.no_mi {
        t.loss.beta = 0.0;
    }
    cfg.model.concat_fusion |= a.concat_fusion;
    cfg.validate()?;
    Ok(cfg)
}

fn train_typed<T: Real>(a: &TrainArgs) -> Result<Vec<LogRow>> {
    let mut trainer = match &a.resume {
        Some(dir) => {
            let mut t = Trainer::<T>::resume(dir)?;
            if let Some(n) = a.iterations {
                t.config.train.iterations = n;
            }
            t
        }
        None => Trainer::<T>::new(train_config(a)?)?,
    };
    let cfg = trainer.config.clone();
    let data = prepare_split::<T>(&a.data, "train", &cfg.model, !cfg.train.no_event)?;
    let every = a.log_every;
    train_run(&mut trainer, &data, &a.out, a.f64, |r| {
        if every > 0 && (r.iter % every == 0 || r.iter == cfg.train.iterations) {
            eprintln!(
                "iter {:>6}  L {:.5}  L_task {:.5}  L_feat {:.5}  EPE2D {:.4}",
                r.iter, r.loss, r.task, r.feat, r.epe2d
            );
        }
    })
}

pub fn run_train(a: &TrainArgs) -> Result<Vec<LogRow>> {
    if a.f64 {
        train_typed::<f64>(a)
    } else {
        train_typed::<f32>(a)
    }
}

fn eval_typed<T: Real>(a: &EvalArgs) -> Result<MetricReport> {
    match &a.checkpoint {
        Some(dir) if !a.gt => {
            let (cfg, params) = load_model::<T>(dir)?;
            let net = rpeflow::model::Network::new(cfg.model.clone())?;
            let data = prepare_split::<T>(&a.data, &a.split, &cfg.model, !cfg.train.no_event)?;
            evaluate_split(&Predictor::Model { net: &net, params: &params }, &data)
        }
        _ => {
            let data = prepare_split::<T>(&a.data, &a.split, &ModelConfig::tiny(), false)?;
            evaluate_split(&Predictor::GroundTruth, &data)
        }
    }
}

/// Scores the split and writes the report files when `--out` is given.
pub fn run_eval(a: &EvalArgs) -> Result<MetricReport> {
    let report = if a.f64 { eval_typed::<f64>(a)? } else { eval_typed::<f32>(a)? };
    if let Some(out) = &a.out {
        create_dir(out)?;
        let json = out.join(METRICS_JSON);
        let text = serde_json::to_string_pretty(&report).map_err(|e| Error::json(&json, e))?;
        write_file(&json, text + "\n")?;
        write_file(&out.join(METRICS_TXT), report.table())?;
    }
    Ok(report)
}

pub fn run_gradcheck(a: &GradcheckArgs) -> Result<Vec<suites::Suite>> {
    if !(a.tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {}", a.tol)));
    }
    let out = suites::run_all(a.seed, a.tol)?;
    if let Some(p) = &a.json {
        let text = serde_json::to_string_pretty(&out).map_err(|e| Error::json(p, e))?;
        write_file(p, text + "\n")?;
    }
    Ok(out)
}

/// One line per checked operation followed by a per-suite summary.
pub fn gradcheck_table(suites: &[suites::Suite]) -> String {
    let mut s = String::new();
    for suite in suites {
        for r in &suite.reports {
            s += &format!(
                "{:<12} {:<22} {:>6} entries  max rel {:.3e}  {}\n",
                suite.name,
                r.name,
                r.checked,
                r.max_rel_err,
                if r.passed() { "ok" } else { "FAIL" }
            );
        }
    }
    for suite in suites {
        s += &format!(
            "suite {:<12} max rel {:.3e}  {}\n",
            suite.name,
            suite.max_rel_err(),
            if suite.passed() { "pass" } else { "FAIL" }
        );
    }
    s
}

/// Names of the failing operations, each with its worst entry.
pub fn gradcheck_failures(suites: &[suites::Suite]) -> Vec<String> {
    suites
        .iter()
        .flat_map(|s| s.reports.iter().filter(|r| !r.passed()).map(move |r| (s.name, r)))
        .map(|(suite, r)| match &r.failure {
            Some(f) => format!("{suite}/{}: {f}", r.name),
            None => format!(
                "{suite}/{}: max rel {:.3e} > {:.1e} at {}",
                r.name,
                r.max_rel_err,
                r.tol,
                r.worst.as_deref().unwrap_or("?")
            ),
        })
        .collect()
}

/// Writes the images for one sample and returns their paths.
pub fn run_viz(a: &VizArgs) -> Result<Vec<PathBuf>> {
    let split = load_split(&a.data, &a.split)?;
    let n = split.len();
    let (_, sample) = split
        .into_iter()
        .nth(a.index)
        .ok_or_else(|| Error::Config(format!("index {} out of range for {} samples in {}", a.index, n, a.split)))?;
    create_dir(&a.out)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let p = a.out.join(name);
        write_file(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    emit("flow_gt.ppm", flow_image(&sample.of_gt, a.max_flow)?.to_ppm())?;
    emit("events.ppm", event_image(&sample.events).to_ppm())?;
    if let Some(dir) = &a.checkpoint {
        let (cfg, params) = load_model::<f64>(dir)?;
        let net = rpeflow::model::Network::new(cfg.model.clone())?;
        let prepared = rpeflow::train::Prepared::<f64>::new(&sample, &cfg.model, !cfg.train.no_event)?;
        let tape = Tape::new();
        let b = Bound::new(&tape, &params);
        let out = net.forward(&b, &prepared.inputs, &prepared.geom)?;
        emit("flow_pred.ppm", flow_image(&out.flow.value(), a.max_flow)?.to_ppm())?;
        let pc0 = PointSet::new(sample.pc0.clone())?;
        let img = sceneflow_error_image(&pc0, &out.sceneflow.value(), &sample.sf_gt, &sample.spec.cam)?;
        emit("sf_error.ppm", img.to_ppm())?;
    }
    Ok(written)
}
