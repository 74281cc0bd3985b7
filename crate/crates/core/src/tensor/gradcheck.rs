use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use super::array::Tensor;
use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use crate::error::Result;

/// Denominator floor of the relative error, so near-zero gradients are
/// judged on an absolute scale.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Location of the worst entry.
    pub worst: Option<String>,
    pub tol: f64,
    pub failure: Option<String>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max_rel_err <= self.tol
    }

    fn new(name: &str, tol: f64) -> Self {
        Self {
            name: name.to_string(),
            checked: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst: None,
            tol,
            failure: None,
        }
    }

    fn record(&mut self, location: String, analytic: f64, numeric: f64) {
        self.checked += 1;
        if !analytic.is_finite() || !numeric.is_finite() {
            if self.failure.is_none() {
                self.failure = Some(format!(
                    "non-finite gradient at {location}: analytic {analytic}, numeric {numeric}"
                ));
            }
            return;
        }
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.max_abs_err = self.max_abs_err.max(abs);
        if rel > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(rel);
            self.worst = Some(location);
        }
    }
}

fn central<F: FnMut(f64) -> Result<f64>>(x0: f64, h: f64, mut f: F) -> Result<f64> {
    let fp = f(x0 + h)?;
    let fm = f(x0 - h)?;
    Ok((fp - fm) / (2.0 * h))
}

/// Compares tape gradients of a scalar function of one tensor against
/// central differences at every entry.
pub fn gradcheck<F>(name: &str, f: F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradcheckReport>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let tape = Tape::new();
        Ok(f(tape.var(t.clone()))?.item())
    };
    let tape = Tape::new();
    let xv = tape.var(x.clone());
    let y = f(xv)?;
    let grads = tape.backward(y)?;
    let analytic = grads.wrt(xv);
    let mut report = GradcheckReport::new(name, tol);
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let x0 = x.data()[i];
        let numeric = central(x0, h, |v| {
            probe.data_mut()[i] = v;
            eval(&probe)
        })?;
        probe.data_mut()[i] = x0;
        report.record(format!("index {i}"), analytic.data()[i], numeric);
    }
    Ok(report)
}

/// Picks `count` distinct `(parameter, flat index)` entries of a store.
pub fn sample_entries(store: &ParamStore<f64>, count: usize, rng: &mut impl Rng) -> Vec<(String, usize)> {
    let all: Vec<(String, usize)> = store
        .iter()
        .flat_map(|(name, t)| (0..t.numel()).map(move |i| (name.clone(), i)))
        .collect();
    let count = count.min(all.len());
    let mut picked: Vec<usize> = sample(rng, all.len(), count).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| all[i].clone()).collect()
}

/// Gradient check over selected scalar entries of a parameter store.
pub fn gradcheck_params<F>(
    name: &str,
    f: F,
    store: &ParamStore<f64>,
    entries: &[(String, usize)],
    h: f64,
    tol: f64,
) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&Bound<'t, f64>) -> Result<Var<'t, f64>>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::new();
        let bound = Bound::new(&tape, s);
        Ok(f(&bound)?.item())
    };
    let tape = Tape::new();
    let bound = Bound::new(&tape, store);
    let y = f(&bound)?;
    let grads = bound.grads(&tape.backward(y)?);
    let mut report = GradcheckReport::new(name, tol);
    let mut probe = store.clone();
    for (pname, i) in entries {
        let x0 = store.get(pname).expect("sampled from store").data()[*i];
        let numeric = central(x0, h, |v| {
            probe.get_mut(pname).unwrap().data_mut()[*i] = v;
            eval(&probe)
        })?;
        probe.get_mut(pname).unwrap().data_mut()[*i] = x0;
        let analytic = grads.get(pname).unwrap().data()[*i];
        report.record(format!("{pname}[{i}]"), analytic, numeric);
    }
    Ok(report)
}
