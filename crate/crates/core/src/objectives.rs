//! Training losses over the pyramid and end-point-error metrics.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geometry::area_downsample;
use crate::model::{LevelOutput, MiTerms, SampleGeometry};
use crate::scalar::Real;
use crate::tensor::{Tensor, Var};

/// Optical-flow accuracy threshold in pixels.
pub const ACC_2D_PX: f64 = 1.0;
/// Scene-flow accuracy threshold in scene units.
pub const ACC_3D: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the 3D term against the 2D term.
    pub alpha: f64,
    /// Weight of the feature (MI) loss.
    pub beta: f64,
    /// Use plain sums per level instead of per-pixel / per-point means.
    pub raw_sums: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 0.01,
            raw_sums: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!(
                "loss weights need alpha > 0 and beta >= 0, got {} and {}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// `2^(l-2)` for `l = 1..=L`, returned finest first (`l = 1` is finest).
pub fn level_weights(levels: usize) -> Vec<f64> {
    (1..=levels).map(|l| 2f64.powi(l as i32 - 2)).collect()
}

/// Ground truth resized to one pyramid level.
#[derive(Clone, Debug)]
pub struct LevelTarget<T> {
    /// `h x w x 2` in level pixels.
    pub flow: Tensor<T>,
    /// `h * w` validity.
    pub valid: Vec<bool>,
    /// `n x 3` at the level's frame-1 points.
    pub sceneflow: Tensor<T>,
}

/// Area-mean resize of a flow field over valid pixels, with values divided
/// by `factor`. A coarse pixel is valid when any of its block is.
pub fn downsample_flow<T: Real>(flow: &Tensor<T>, valid: &[bool], factor: usize) -> Result<(Tensor<T>, Vec<bool>)> {
    let s = flow.shape();
    if s.len() != 3 || s[2] != 2 || valid.len() != s[0] * s[1] {
        return Err(shape_err!("flow {:?} with {} mask entries", s, valid.len()));
    }
    let mask = Tensor::from_fn(&[s[0], s[1], 1], |i| if valid[i] { T::one() } else { T::zero() });
    let masked = Tensor::from_fn(s, |i| if valid[i / 2] { flow.data()[i] } else { T::zero() });
    let num = area_downsample(&masked, factor)?;
    let den = area_downsample(&mask, factor)?;
    let f = T::from_usize(factor).unwrap();
    let out = Tensor::from_fn(num.shape(), |i| {
        let d = den.data()[i / 2];
        if d > T::zero() {
            num.data()[i] / d / f
        } else {
            T::zero()
        }
    });
    Ok((out, den.data().iter().map(|&d| d > T::zero()).collect()))
}

/// Per-level targets from full-resolution ground truth.
pub fn pyramid_targets<T: Real>(
    flow: &Tensor<T>,
    valid: &[bool],
    sceneflow: &Tensor<T>,
    geom: &SampleGeometry<T>,
) -> Result<Vec<LevelTarget<T>>> {
    geom.levels
        .iter()
        .enumerate()
        .map(|(l, lg)| {
            let (f, v) = downsample_flow(flow, valid, 1 << (l + 1))?;
            if f.shape() != [lg.height, lg.width, 2] {
                return Err(shape_err!("resized flow {:?} at level {}", f.shape(), l));
            }
            let idx = &lg.indices[0];
            let sf = Tensor::from_fn(&[idx.len(), 3], |i| sceneflow.data()[idx[i / 3] * 3 + i % 3]);
            Ok(LevelTarget {
                flow: f,
                valid: v,
                sceneflow: sf,
            })
        })
        .collect()
}

/// `sum_l lambda_l (E2D_l + alpha E3D_l)` where `E2D_l` is the summed (or
/// averaged) end-point error over valid pixels and `E3D_l` over points.
pub fn task_loss<'t, T: Real>(
    outputs: &[LevelOutput<'t, T>],
    targets: &[LevelTarget<T>],
    weights: &LossWeights,
) -> Result<Var<'t, T>> {
    if outputs.len() != targets.len() || outputs.is_empty() {
        return Err(shape_err!("{} level outputs vs {} targets", outputs.len(), targets.len()));
    }
    let lambda = level_weights(outputs.len());
    let mut total: Option<Var<'t, T>> = None;
    for ((out, tgt), lam) in outputs.iter().zip(targets).zip(lambda) {
        let term = level_task_loss(out.flow, out.sceneflow, tgt, weights)?.scale(T::lit(lam));
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty"))
}

fn level_task_loss<'t, T: Real>(
    flow: Var<'t, T>,
    sceneflow: Var<'t, T>,
    tgt: &LevelTarget<T>,
    weights: &LossWeights,
) -> Result<Var<'t, T>> {
    let tape = flow.tape();
    if flow.shape() != tgt.flow.shape() || sceneflow.shape() != tgt.sceneflow.shape() {
        return Err(shape_err!(
            "prediction {:?}/{:?} vs target {:?}/{:?}",
            flow.shape(),
            sceneflow.shape(),
            tgt.flow.shape(),
            tgt.sceneflow.shape()
        ));
    }
    let m = tgt.valid.len();
    let mask = Tensor::from_fn(&[m], |i| if tgt.valid[i] { T::one() } else { T::zero() });
    let count = tgt.valid.iter().filter(|v| **v).count();
    let e2 = flow
        .sub(tape.constant(tgt.flow.clone()))?
        .reshape(&[m, 2])?
        .row_norm()?
        .mul(tape.constant(mask))?
        .sum();
    let e3 = sceneflow.sub(tape.constant(tgt.sceneflow.clone()))?.row_norm()?.sum();
    let (e2, e3) = if weights.raw_sums {
        (e2, e3)
    } else {
        let n = sceneflow.shape()[0];
        (
            e2.scale(T::lit(1.0 / count.max(1) as f64)),
            e3.scale(T::lit(1.0 / n as f64)),
        )
    };
    e2.add(e3.scale(T::lit(weights.alpha)))
}

/// Regularization terms of one level; every field must be present.
#[derive(Clone, Copy)]
pub struct LevelMi<'t, T: Real> {
    pub fs1: Option<Var<'t, T>>,
    pub fs2: Option<Var<'t, T>>,
    pub ms: Option<Var<'t, T>>,
    pub es: Option<Var<'t, T>>,
}

impl<'t, T: Real> From<MiTerms<'t, T>> for LevelMi<'t, T> {
    fn from(m: MiTerms<'t, T>) -> Self {
        Self {
            fs1: Some(m.fs1),
            fs2: Some(m.fs2),
            ms: Some(m.ms),
            es: Some(m.es),
        }
    }
}

/// `sum_l lambda_l (fs1 + fs2 + ms + es)`.
pub fn feature_loss<'t, T: Real>(levels: &[LevelMi<'t, T>]) -> Result<Var<'t, T>> {
    if levels.is_empty() {
        return Err(Error::Contract("feature loss over zero levels".into()));
    }
    let lambda = level_weights(levels.len());
    let mut total: Option<Var<'t, T>> = None;
    for (l, (m, lam)) in levels.iter().zip(lambda).enumerate() {
        let get = |v: Option<Var<'t, T>>, name: &str| {
            v.ok_or_else(|| Error::Contract(format!("level {l} is missing the {name} term")))
        };
        let sum = get(m.fs1, "fs1")?
            .add(get(m.fs2, "fs2")?)?
            .add(get(m.ms, "ms")?)?
            .add(get(m.es, "es")?)?
            .scale(T::lit(lam));
        total = Some(match total {
            Some(t) => t.add(sum)?,
            None => sum,
        });
    }
    Ok(total.expect("non-empty"))
}

/// `L_task + beta L_feat`; with `beta = 0` the feature loss is left out of
/// the graph entirely.
pub fn total_loss<'t, T: Real>(task: Var<'t, T>, feat: Var<'t, T>, beta: f64) -> Result<Var<'t, T>> {
    let (a, b) = (task.item(), feat.item());
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::Domain(format!("non-finite loss terms: task {a}, feature {b}")));
    }
    if beta == 0.0 {
        return Ok(task);
    }
    task.add(feat.scale(T::lit(beta)))
}

/// Ground truth at input resolution for evaluation.
#[derive(Clone, Debug)]
pub struct EvalTarget<'a, T> {
    /// `H x W x 2`.
    pub flow: &'a Tensor<T>,
    pub valid: &'a [bool],
    /// `N x 3`.
    pub sceneflow: &'a Tensor<T>,
    /// Per-point occlusion; occluded points are excluded from N.Occ metrics.
    pub occluded: &'a [bool],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "EPE2D")]
    pub epe2d: f64,
    #[serde(rename = "ACC1px")]
    pub acc1px: f64,
    #[serde(rename = "EPE3D_NOcc")]
    pub epe3d_nocc: f64,
    #[serde(rename = "ACC.05_NOcc")]
    pub acc05_nocc: f64,
    #[serde(rename = "EPE3D_Full")]
    pub epe3d_full: f64,
    #[serde(rename = "ACC.05_Full")]
    pub acc05_full: f64,
}

pub const METRIC_COLUMNS: [&str; 6] = ["EPE2D", "ACC1px", "EPE3D_NOcc", "ACC.05_NOcc", "EPE3D_Full", "ACC.05_Full"];

impl MetricReport {
    pub fn values(&self) -> [f64; 6] {
        [
            self.epe2d,
            self.acc1px,
            self.epe3d_nocc,
            self.acc05_nocc,
            self.epe3d_full,
            self.acc05_full,
        ]
    }

    /// Two-line aligned table with four decimals.
    pub fn table(&self) -> String {
        let width = METRIC_COLUMNS.iter().map(|c| c.len()).max().unwrap_or(0) + 2;
        let mut head = String::new();
        let mut row = String::new();
        for (c, v) in METRIC_COLUMNS.iter().zip(self.values()) {
            head.push_str(&format!("{c:>width$}"));
            row.push_str(&format!("{:>width$}", format!("{v:.4}")));
        }
        format!("{head}\n{row}\n")
    }
}

/// Pools errors over pixels and points of several samples.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    sum2d: f64,
    acc2d: usize,
    n2d: usize,
    sum_full: f64,
    acc_full: usize,
    n_full: usize,
    sum_nocc: f64,
    acc_nocc: usize,
    n_nocc: usize,
}

impl MetricAccumulator {
    pub fn add<T: Real>(&mut self, flow: &Tensor<T>, sceneflow: &Tensor<T>, gt: &EvalTarget<'_, T>) -> Result<()> {
        if flow.shape() != gt.flow.shape() || sceneflow.shape() != gt.sceneflow.shape() {
            return Err(shape_err!(
                "prediction {:?}/{:?} vs ground truth {:?}/{:?}",
                flow.shape(),
                sceneflow.shape(),
                gt.flow.shape(),
                gt.sceneflow.shape()
            ));
        }
        let npx = flow.numel() / 2;
        let npt = sceneflow.numel() / 3;
        if gt.valid.len() != npx || gt.occluded.len() != npt {
            return Err(shape_err!("mask sizes {} / {} vs {} / {}", gt.valid.len(), gt.occluded.len(), npx, npt));
        }
        for i in 0..npx {
            if !gt.valid[i] {
                continue;
            }
            let e = ((flow.data()[2 * i] - gt.flow.data()[2 * i]).as_f64())
                .hypot((flow.data()[2 * i + 1] - gt.flow.data()[2 * i + 1]).as_f64());
            self.sum2d += e;
            self.acc2d += (e < ACC_2D_PX) as usize;
            self.n2d += 1;
        }
        for i in 0..npt {
            let e = (0..3)
                .map(|k| (sceneflow.data()[3 * i + k] - gt.sceneflow.data()[3 * i + k]).as_f64().powi(2))
                .sum::<f64>()
                .sqrt();
            let hit = (e < ACC_3D) as usize;
            self.sum_full += e;
            self.acc_full += hit;
            self.n_full += 1;
            if !gt.occluded[i] {
                self.sum_nocc += e;
                self.acc_nocc += hit;
                self.n_nocc += 1;
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<MetricReport> {
        let mean = |s: f64, n: usize, what: &str| {
            if n == 0 {
                Err(Error::Evaluation(format!("no {what} to evaluate")))
            } else {
                Ok(s / n as f64)
            }
        };
        Ok(MetricReport {
            epe2d: mean(self.sum2d, self.n2d, "valid pixels")?,
            acc1px: mean(self.acc2d as f64, self.n2d, "valid pixels")?,
            epe3d_nocc: mean(self.sum_nocc, self.n_nocc, "non-occluded points")?,
            acc05_nocc: mean(self.acc_nocc as f64, self.n_nocc, "non-occluded points")?,
            epe3d_full: mean(self.sum_full, self.n_full, "points")?,
            acc05_full: mean(self.acc_full as f64, self.n_full, "points")?,
        })
    }
}

pub fn evaluate<T: Real>(flow: &Tensor<T>, sceneflow: &Tensor<T>, gt: &EvalTarget<'_, T>) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::default();
    acc.add(flow, sceneflow, gt)?;
    acc.finish()
}
