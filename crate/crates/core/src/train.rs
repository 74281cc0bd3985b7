//! Training loop, checkpoints with optimizer state, and split evaluation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_split, model_inputs};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelInputs, Network, SampleGeometry};
use crate::objectives::{
    evaluate, feature_loss, pyramid_targets, task_loss, total_loss, EvalTarget, LevelMi, LevelTarget, LossWeights,
    MetricAccumulator, MetricReport,
};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Real;
use crate::scenegen::Sample;
use crate::tensor::checkpoint;
use crate::tensor::{Bound, ParamStore, Tape, Tensor};

pub const LOG_FILE: &str = "train_log.csv";
pub const RUN_FILE: &str = "run.json";
pub const FINAL_DIR: &str = "final";
pub const BEST_DIR: &str = "best";
const OPTIM_DIR: &str = "optimizer";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Seeds weight init and the per-epoch sample order.
    pub seed: u64,
    /// Feed zero event voxels instead of the recorded events.
    pub no_event: bool,
    pub optimizer: AdamConfig,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            batch_size: 4,
            seed: 0,
            no_event: false,
            optimizer: AdamConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

/// Everything that defines a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.loss.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let o = &t.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return Err(Error::Config(format!("optimizer settings out of range: {o:?}")));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One training sample with everything precomputed that does not depend
/// on the weights.
pub struct Prepared<T> {
    pub inputs: ModelInputs<T>,
    pub geom: SampleGeometry<T>,
    pub targets: Vec<LevelTarget<T>>,
    pub flow: Tensor<T>,
    pub valid: Vec<bool>,
    pub sceneflow: Tensor<T>,
    pub occluded: Vec<bool>,
}

impl<T: Real> Prepared<T> {
    pub fn new(sample: &Sample, cfg: &ModelConfig, use_events: bool) -> Result<Self> {
        let inputs = model_inputs::<T>(sample, cfg.event_bins, use_events)?;
        let geom = SampleGeometry::new(&inputs, cfg)?;
        let flow: Tensor<T> = sample.of_gt.cast();
        let sceneflow: Tensor<T> = sample.sf_gt.cast();
        let targets = pyramid_targets(&flow, &sample.valid, &sceneflow, &geom)?;
        Ok(Self {
            inputs,
            geom,
            targets,
            flow,
            valid: sample.valid.clone(),
            sceneflow,
            occluded: sample.occ3d.clone(),
        })
    }

    pub fn target(&self) -> EvalTarget<'_, T> {
        EvalTarget {
            flow: &self.flow,
            valid: &self.valid,
            sceneflow: &self.sceneflow,
            occluded: &self.occluded,
        }
    }
}

pub fn prepare_split<T: Real>(root: &Path, split: &str, cfg: &ModelConfig, use_events: bool) -> Result<Vec<Prepared<T>>> {
    load_split(root, split)?
        .iter()
        .map(|(_, s)| Prepared::new(s, cfg, use_events))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    #[serde(rename = "L")]
    pub loss: f64,
    #[serde(rename = "L_task")]
    pub task: f64,
    #[serde(rename = "L_feat")]
    pub feat: f64,
    #[serde(rename = "EPE2D_train")]
    pub epe2d: f64,
}

/// Sample indices of iteration `iter` (0-based): consecutive positions in a
/// sequence of per-epoch permutations drawn from `(seed, epoch)`.
pub fn batch_indices(n: usize, batch: usize, seed: u64, iter: usize) -> Vec<usize> {
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (iter * batch..(iter + 1) * batch)
        .map(|pos| {
            let epoch = pos / n;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(epoch as u64 + 1);
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                cached = Some((epoch, perm));
            }
            cached.as_ref().unwrap().1[pos % n]
        })
        .collect()
}

pub struct Trainer<T: Real> {
    pub net: Network,
    pub config: RunConfig,
    pub params: ParamStore<T>,
    pub adam: Adam<T>,
    /// Completed iterations.
    pub iteration: usize,
    /// Lowest logged total loss and the iteration that reached it.
    pub best: Option<(f64, usize)>,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let net = Network::new(config.model.clone())?;
        let params = net.init_params(config.train.seed);
        let adam = Adam::new(config.train.optimizer.clone(), &params);
        Ok(Self {
            net,
            config,
            params,
            adam,
            iteration: 0,
            best: None,
        })
    }

    /// Loss terms, prediction EPE and parameter gradients of one sample.
    fn sample_grads(&self, p: &Prepared<T>) -> Result<([f64; 4], ParamStore<T>)> {
        let w = &self.config.train.loss;
        let tape = Tape::new();
        let b = Bound::new(&tape, &self.params);
        let out = self.net.forward(&b, &p.inputs, &p.geom)?;
        let task = task_loss(&out.levels, &p.targets, w)?;
        let mi: Vec<LevelMi<T>> = out.levels.iter().map(|l| l.mi.into()).collect();
        let feat = feature_loss(&mi)?;
        let total = total_loss(task, feat, w.beta)?;
        let epe = evaluate(&out.flow.value(), &out.sceneflow.value(), &p.target())?.epe2d;
        let terms = [total.item().as_f64(), task.item().as_f64(), feat.item().as_f64(), epe];
        let grads = b.grads(&tape.backward(total)?);
        Ok((terms, grads))
    }

    /// One optimizer step on the next batch.
    pub fn step(&mut self, data: &[Prepared<T>]) -> Result<LogRow> {
        if data.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let t = &self.config.train;
        let batch = batch_indices(data.len(), t.batch_size, t.seed, self.iteration);
        let mut sum = self.params.zeros_like();
        let mut terms = [0.0; 4];
        for &i in &batch {
            let (v, g) = self.sample_grads(&data[i])?;
            sum.add_assign(&g)?;
            for k in 0..4 {
                terms[k] += v[k];
            }
        }
        let nb = batch.len() as f64;
        sum.scale(T::lit(1.0 / nb));
        let row = LogRow {
            iter: self.iteration + 1,
            loss: terms[0] / nb,
            task: terms[1] / nb,
            feat: terms[2] / nb,
            epe2d: terms[3] / nb,
        };
        if !row.loss.is_finite() || !sum.all_finite() {
            return Err(Error::Divergence(format!("non-finite loss or gradient at iteration {}", row.iter)));
        }
        self.adam.update(&mut self.params, &sum)?;
        self.iteration += 1;
        if self.best.is_none_or(|(l, _)| row.loss < l) {
            self.best = Some((row.loss, row.iter));
        }
        Ok(row)
    }

    /// Writes weights and optimizer state. `wide` stores 64-bit values.
    pub fn save(&self, dir: &Path, wide: bool) -> Result<()> {
        let meta = serde_json::json!({
            "run": self.config,
            "iteration": self.iteration,
            "best": self.best,
        });
        checkpoint::save(dir, &self.params, wide, meta)?;
        let mut moments = ParamStore::new();
        for (prefix, store) in [("m", &self.adam.m), ("v", &self.adam.v)] {
            for (name, t) in store.iter() {
                moments.insert(format!("{prefix}/{name}"), t.clone());
            }
        }
        checkpoint::save(&dir.join(OPTIM_DIR), &moments, wide, serde_json::json!({ "step": self.adam.step }))
    }

    /// Restores a run saved by [`Trainer::save`].
    pub fn resume(dir: &Path) -> Result<Self> {
        let (params, manifest) = checkpoint::load::<T>(dir)?;
        let meta = &manifest.meta;
        let config: RunConfig = serde_json::from_value(meta["run"].clone())
            .map_err(|e| Error::Contract(format!("checkpoint run config: {e}")))?;
        let iteration = meta["iteration"]
            .as_u64()
            .ok_or_else(|| Error::Contract("checkpoint lacks the iteration count".into()))? as usize;
        let best = serde_json::from_value(meta["best"].clone()).unwrap_or(None);
        let (moments, om) = checkpoint::load::<T>(&dir.join(OPTIM_DIR))?;
        let mut adam = Adam::new(config.train.optimizer.clone(), &params);
        adam.step = om.meta["step"]
            .as_u64()
            .ok_or_else(|| Error::Contract("optimizer state lacks the step count".into()))?;
        for (prefix, store) in [("m", &mut adam.m), ("v", &mut adam.v)] {
            for (name, t) in store.iter_mut() {
                let src = moments
                    .get(&format!("{prefix}/{name}"))
                    .ok_or_else(|| Error::Contract(format!("optimizer state lacks {prefix}/{name}")))?;
                if src.shape() != t.shape() {
                    return Err(Error::Contract(format!("optimizer state shape mismatch for {name}")));
                }
                *t = src.clone();
            }
        }
        let net = Network::new(config.model.clone())?;
        check_params(&net, &params)?;
        Ok(Self {
            net,
            config,
            params,
            adam,
            iteration,
            best,
        })
    }
}

/// Fails unless `params` holds exactly the network's parameters and shapes.
pub fn check_params<T: Real>(net: &Network, params: &ParamStore<T>) -> Result<()> {
    let expect = net.init_params::<T>(0);
    for (name, t) in expect.iter() {
        match params.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            Some(p) => {
                return Err(Error::Contract(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    p.shape(),
                    t.shape()
                )))
            }
            None => return Err(Error::Contract(format!("checkpoint lacks parameter {name}"))),
        }
    }
    if let Some(extra) = params.names().find(|n| !expect.contains(n)) {
        return Err(Error::Contract(format!("checkpoint has unknown parameter {extra}")));
    }
    Ok(())
}

/// Run configuration and weights of a checkpoint.
pub fn load_model<T: Real>(dir: &Path) -> Result<(RunConfig, ParamStore<T>)> {
    let (params, manifest) = checkpoint::load::<T>(dir)?;
    let config: RunConfig = serde_json::from_value(manifest.meta["run"].clone())
        .map_err(|e| Error::Contract(format!("checkpoint run config: {e}")))?;
    check_params(&Network::new(config.model.clone())?, &params)?;
    Ok((config, params))
}

/// Trains from scratch (or continues `trainer`) up to the configured
/// iteration count, writing the log and checkpoints under `out`.
pub fn train_run<T: Real>(
    trainer: &mut Trainer<T>,
    data: &[Prepared<T>],
    out: &Path,
    wide: bool,
    mut on_row: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let run_path = out.join(RUN_FILE);
    let text = serde_json::to_string_pretty(&trainer.config).map_err(|e| Error::json(&run_path, e))?;
    fs::write(&run_path, text).map_err(|e| Error::io(&run_path, e))?;
    let log_path = out.join(LOG_FILE);
    let mut rows = read_log(&log_path).unwrap_or_default();
    rows.retain(|r| r.iter <= trainer.iteration);
    while trainer.iteration < trainer.config.train.iterations {
        let row = trainer.step(data)?;
        on_row(&row);
        if trainer.best.is_some_and(|(_, it)| it == row.iter) {
            trainer.save(&out.join(BEST_DIR), wide)?;
        }
        rows.push(row);
    }
    write_log(&log_path, &rows)?;
    trainer.save(&out.join(FINAL_DIR), wide)?;
    Ok(rows)
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    r.deserialize().map(|row| row.map_err(|e| Error::io(path, e.into()))).collect()
}

/// What supplies the flows being scored.
pub enum Predictor<'a, T: Real> {
    Model { net: &'a Network, params: &'a ParamStore<T> },
    /// Scores the ground truth against itself.
    GroundTruth,
}

/// Pooled metrics over a prepared split.
pub fn evaluate_split<T: Real>(pred: &Predictor<'_, T>, data: &[Prepared<T>]) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::default();
    for p in data {
        match pred {
            Predictor::Model { net, params } => {
                let tape = Tape::new();
                let b = Bound::new(&tape, params);
                let out = net.forward(&b, &p.inputs, &p.geom)?;
                acc.add(&out.flow.value(), &out.sceneflow.value(), &p.target())?;
            }
            Predictor::GroundTruth => acc.add(&p.flow, &p.sceneflow, &p.target())?,
        }
    }
    acc.finish()
}
