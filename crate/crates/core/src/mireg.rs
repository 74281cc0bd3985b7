//! Mutual-information regularization: per-modality Gaussian latent heads
//! and closed-form KL bounds between them.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::scalar::Real;
use crate::tensor::{Bound, ParamStore, Var};

pub const LOGVAR_CLAMP: f64 = 10.0;

/// Two-layer head mapping `C` channels to a `d`-dimensional diagonal Gaussian.
#[derive(Clone, Debug)]
pub struct HeadSpec {
    pub prefix: String,
    pub channels: usize,
    pub latent: usize,
}

impl HeadSpec {
    pub fn new(prefix: impl Into<String>, channels: usize, latent: usize) -> Self {
        Self {
            prefix: prefix.into(),
            channels,
            latent,
        }
    }

    fn name(&self, p: &str) -> String {
        format!("{}.{}", self.prefix, p)
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let (c, h) = (self.channels, 2 * self.latent);
        store.init_fan_in(&self.name("w1"), &[c, h], c, rng);
        store.init_const(&self.name("b1"), &[h], 0.0);
        store.init_normal(&self.name("w2"), &[h, h], 0.1 / (h as f64).sqrt(), rng);
        store.init_const(&self.name("b2"), &[h], 0.0);
    }
}

/// Per-location mean and clamped log-variance, both `M x d`.
#[derive(Clone, Copy)]
pub struct Latent<'t, T: Real> {
    pub mu: Var<'t, T>,
    pub logvar: Var<'t, T>,
}

pub fn encode_latent<'t, T: Real>(b: &Bound<'t, T>, head: &HeadSpec, feature: Var<'t, T>) -> Result<Latent<'t, T>> {
    let shape = feature.shape();
    let c = *shape.last().unwrap_or(&0);
    if c != head.channels {
        return Err(shape_err!(
            "{} expects {} channels, got feature {:?}",
            head.prefix,
            head.channels,
            shape
        ));
    }
    let m = feature.value().numel() / c;
    let d = head.latent;
    let hidden = feature
        .reshape(&[m, c])?
        .matmul(b.param(&head.name("w1"))?)?
        .add(b.param(&head.name("b1"))?)?
        .leaky_relu()?;
    let out = hidden.matmul(b.param(&head.name("w2"))?)?.add(b.param(&head.name("b2"))?)?;
    let lim = T::lit(LOGVAR_CLAMP);
    Ok(Latent {
        mu: out.narrow(1, 0, d)?,
        logvar: out.narrow(1, d, d)?.clamp(-lim, lim),
    })
}

/// `KL(a || b)` between diagonal Gaussians, summed over latent dimensions
/// and averaged over locations.
pub fn kl_gaussians<'t, T: Real>(a: &Latent<'t, T>, b: &Latent<'t, T>) -> Result<Var<'t, T>> {
    let shape = a.mu.shape();
    if b.mu.shape() != shape || a.logvar.shape() != shape || b.logvar.shape() != shape {
        return Err(shape_err!(
            "latent shapes differ: {:?} vs {:?}",
            shape,
            b.mu.shape()
        ));
    }
    let m = shape[0];
    let dl = a.logvar.sub(b.logvar)?;
    let var_term = dl.expm1()?.sub(dl)?;
    let mean_term = b.mu.sub(a.mu)?.square()?.mul(b.logvar.neg()?.exp()?)?;
    Ok(var_term.add(mean_term)?.sum().scale(T::lit(0.5 / m as f64)))
}

/// Symmetrized KL between the latents of two modalities.
pub fn mi_pair<'t, T: Real>(
    b: &Bound<'t, T>,
    (fa, ha): (Var<'t, T>, &HeadSpec),
    (fb, hb): (Var<'t, T>, &HeadSpec),
) -> Result<Var<'t, T>> {
    let la = encode_latent(b, ha, fa)?;
    let lb = encode_latent(b, hb, fb)?;
    pair_from_latents(&la, &lb)
}

fn pair_from_latents<'t, T: Real>(la: &Latent<'t, T>, lb: &Latent<'t, T>) -> Result<Var<'t, T>> {
    Ok(kl_gaussians(la, lb)?.add(kl_gaussians(lb, la)?)?.scale(T::lit(0.5)))
}

/// Three pairwise terms and their sum.
pub struct TripleTerms<'t, T: Real> {
    /// `(0,1)`, `(1,2)`, `(0,2)`.
    pub pairs: [Var<'t, T>; 3],
    pub total: Var<'t, T>,
}

/// Interaction-information bound over three modalities: the sum of the
/// three pairwise bounds. Each latent is encoded once.
pub fn mi_triple<'t, T: Real>(b: &Bound<'t, T>, inputs: [(Var<'t, T>, &HeadSpec); 3]) -> Result<TripleTerms<'t, T>> {
    let l: Vec<Latent<'t, T>> = inputs
        .iter()
        .map(|(f, h)| encode_latent(b, h, *f))
        .collect::<Result<_>>()?;
    let pairs = [
        pair_from_latents(&l[0], &l[1])?,
        pair_from_latents(&l[1], &l[2])?,
        pair_from_latents(&l[0], &l[2])?,
    ];
    let total = pairs[0].add(pairs[1])?.add(pairs[2])?;
    Ok(TripleTerms { pairs, total })
}
