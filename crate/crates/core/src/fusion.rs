//! Multimodal attention fusion: auxiliary channel alignment followed by
//! channel-wise cross attention with a residual connection, for grid (2D)
//! and point (3D) primaries.

use std::rc::Rc;

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::geometry::{bilinear_matrix, project, splat_weights, CameraIntrinsics, PointSet};
use crate::scalar::Real;
use crate::tensor::{concat, Bound, ParamStore, SparseRows, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    /// `H x W x C` grids; Q/K/V use depthwise 3x3 convolutions.
    Planar,
    /// `N x C` point rows; Q/K/V use per-channel scales.
    Points,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    Attention,
    /// Ablation baseline: `X + [X, aux] W_c`.
    Concat,
}

/// Shape and naming of one fusion module's parameters.
#[derive(Clone, Debug)]
pub struct MafSpec {
    pub prefix: String,
    pub channels: usize,
    pub aux_channels: Vec<usize>,
    pub branch: Branch,
    pub mode: FusionMode,
}

impl MafSpec {
    pub fn new(prefix: impl Into<String>, channels: usize, aux_channels: Vec<usize>, branch: Branch) -> Self {
        Self {
            prefix: prefix.into(),
            channels,
            aux_channels,
            branch,
            mode: FusionMode::Attention,
        }
    }

    pub fn with_mode(mut self, mode: FusionMode) -> Self {
        self.mode = mode;
        self
    }

    fn name(&self, p: &str) -> String {
        format!("{}.{}", self.prefix, p)
    }

    fn aux_total(&self) -> usize {
        self.aux_channels.iter().sum()
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let c = self.channels;
        let ca = self.aux_total();
        if self.mode == FusionMode::Concat {
            store.init_normal(&self.name("wc"), &[c + ca, c], 0.1 / ((c + ca) as f64).sqrt(), rng);
            return;
        }
        store.init_fan_in(&self.name("wa"), &[ca, c], ca, rng);
        for ln in ["ln_x", "ln_y"] {
            store.init_const(&self.name(&format!("{ln}.g")), &[c], 1.0);
            store.init_const(&self.name(&format!("{ln}.b")), &[c], 0.0);
        }
        for w in ["wq", "wk", "wv"] {
            match self.branch {
                Branch::Planar => store.init_fan_in(&self.name(w), &[3, 3, c], 9, rng),
                Branch::Points => store.init_const(&self.name(w), &[c], 1.0),
            }
        }
        store.init_normal(&self.name("wp"), &[c, c], 0.1 / (c as f64).sqrt(), rng);
        store.init_const(&self.name("theta"), &[1], (c as f64).sqrt().ln());
    }
}

/// Channel concatenation of the auxiliary features followed by a 1x1
/// mixing to the primary channel count.
pub fn align_aux<'t, T: Real>(b: &Bound<'t, T>, spec: &MafSpec, aux: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let y = concat_channels(aux)?;
    channel_mix(y, b.param(&spec.name("wa"))?)
}

fn concat_channels<'t, T: Real>(xs: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    if xs.len() == 1 {
        return Ok(xs[0]);
    }
    let axis = xs[0].shape().len().saturating_sub(1);
    concat(xs, axis)
}

/// Right-multiplies the channel axis of a grid or row set by `w` (`Cin x Cout`).
fn channel_mix<'t, T: Real>(x: Var<'t, T>, w: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let c = *shape.last().unwrap_or(&1);
    let m = x.value().numel() / c;
    let cout = w.shape()[1];
    let mut out_shape = shape.clone();
    *out_shape.last_mut().unwrap() = cout;
    x.reshape(&[m, c])?.matmul(w)?.reshape(&out_shape)
}

/// Fused feature and the `C x C` attention matrix that produced it.
pub struct Fused<'t, T: Real> {
    pub output: Var<'t, T>,
    pub attention: Option<Var<'t, T>>,
}

/// `X' = W_p (V A) + X` with `A = softmax_0(Q^T K / tau)`, where Q, K, V
/// are `M x C` after flattening the spatial support.
pub fn cross_attention<'t, T: Real>(
    b: &Bound<'t, T>,
    spec: &MafSpec,
    x: Var<'t, T>,
    y: Var<'t, T>,
) -> Result<Fused<'t, T>> {
    let shape = x.shape();
    if y.shape() != shape {
        return Err(shape_err!(
            "cross attention needs matching primary {:?} and auxiliary {:?}",
            shape,
            y.shape()
        ));
    }
    let c = *shape.last().unwrap();
    if c != spec.channels {
        return Err(shape_err!("{} expects {} channels, got {}", spec.prefix, spec.channels, c));
    }
    let axis = shape.len() - 1;
    let m = x.value().numel() / c;
    let xn = x.layernorm(axis, b.param(&spec.name("ln_x.g"))?, b.param(&spec.name("ln_x.b"))?)?;
    let yn = y.layernorm(axis, b.param(&spec.name("ln_y.g"))?, b.param(&spec.name("ln_y.b"))?)?;
    let transform = |v: Var<'t, T>, w: &str| -> Result<Var<'t, T>> {
        let w = b.param(&spec.name(w))?;
        let out = match spec.branch {
            Branch::Planar => v.depthwise_conv2d(w, 1, 1)?,
            Branch::Points => v.mul(w)?,
        };
        out.reshape(&[m, c])
    };
    let q = transform(xn, "wq")?;
    let k = transform(yn, "wk")?;
    let v = transform(yn, "wv")?;
    let inv_tau = b.param(&spec.name("theta"))?.neg()?.exp()?;
    let logits = q.t()?.matmul(k)?.mul(inv_tau)?;
    let attention = logits.softmax(0)?;
    let out = v
        .matmul(attention)?
        .matmul(b.param(&spec.name("wp"))?)?
        .reshape(&shape)?
        .add(x)?;
    Ok(Fused {
        output: out,
        attention: Some(attention),
    })
}

fn fuse<'t, T: Real>(b: &Bound<'t, T>, spec: &MafSpec, x: Var<'t, T>, aux: &[Var<'t, T>]) -> Result<Fused<'t, T>> {
    for (i, a) in aux.iter().enumerate() {
        let (xs, as_) = (x.shape(), a.shape());
        if xs[..xs.len() - 1] != as_[..as_.len().saturating_sub(1)] {
            return Err(shape_err!(
                "{}: auxiliary {} support {:?} differs from primary {:?}",
                spec.prefix,
                i,
                as_,
                xs
            ));
        }
    }
    match spec.mode {
        FusionMode::Attention => {
            let y = align_aux(b, spec, aux)?;
            cross_attention(b, spec, x, y)
        }
        FusionMode::Concat => {
            let mut parts = vec![x];
            parts.extend_from_slice(aux);
            let mixed = channel_mix(concat_channels(&parts)?, b.param(&spec.name("wc"))?)?;
            Ok(Fused {
                output: x.add(mixed)?,
                attention: None,
            })
        }
    }
}

/// Auxiliary input for a grid primary.
pub enum PlanarAux<'a, 't, T: Real> {
    Grid(Var<'t, T>),
    /// Point features with their image-plane coordinates, splatted onto the grid.
    Points { features: Var<'t, T>, coords: &'a Tensor<T> },
}

/// Fusion with an `H x W x C` primary. Point auxiliaries go through a
/// normalized bilinear splat; pixels without points receive zeros.
pub fn maf_2d<'t, T: Real>(
    b: &Bound<'t, T>,
    spec: &MafSpec,
    primary: Var<'t, T>,
    aux: &[PlanarAux<'_, 't, T>],
) -> Result<Fused<'t, T>> {
    let shape = primary.shape();
    if shape.len() != 3 {
        return Err(shape_err!("planar fusion needs an H x W x C primary, got {:?}", shape));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut grids = Vec::with_capacity(aux.len());
    for a in aux {
        grids.push(match a {
            PlanarAux::Grid(g) => *g,
            PlanarAux::Points { features, coords } => {
                let splat = Rc::new(splat_weights(coords, h, w).normalize_rows());
                let c = features.shape()[1];
                features.sparse_rows(&splat)?.reshape(&[h, w, c])?
            }
        });
    }
    fuse(b, spec, primary, &grids)
}

/// Fusion with an `N x C` point primary; grid auxiliaries are sampled
/// bilinearly at the projections of `points`.
pub fn maf_3d<'t, T: Real>(
    b: &Bound<'t, T>,
    spec: &MafSpec,
    primary: Var<'t, T>,
    points: &PointSet<T>,
    cam: &CameraIntrinsics,
    grids: &[Var<'t, T>],
) -> Result<Fused<'t, T>> {
    let coords = project(points, cam)?;
    maf_3d_at(b, spec, primary, &coords, grids)
}

/// `maf_3d` with precomputed image-plane coordinates.
pub fn maf_3d_at<'t, T: Real>(
    b: &Bound<'t, T>,
    spec: &MafSpec,
    primary: Var<'t, T>,
    coords: &Tensor<T>,
    grids: &[Var<'t, T>],
) -> Result<Fused<'t, T>> {
    let n = primary.shape()[0];
    if coords.shape() != [n, 2] {
        return Err(shape_err!("{} points but coordinates {:?}", n, coords.shape()));
    }
    let mut sampled = Vec::with_capacity(grids.len());
    let mut cache: Option<(usize, usize, Rc<SparseRows<T>>)> = None;
    for g in grids {
        let gs = g.shape();
        if gs.len() != 3 {
            return Err(shape_err!("auxiliary grid must be H x W x C, got {:?}", gs));
        }
        let map = match &cache {
            Some((h, w, m)) if *h == gs[0] && *w == gs[1] => Rc::clone(m),
            _ => {
                let m = Rc::new(bilinear_matrix(coords, gs[0], gs[1]));
                cache = Some((gs[0], gs[1], Rc::clone(&m)));
                m
            }
        };
        sampled.push(g.sparse_rows(&map)?);
    }
    fuse(b, spec, primary, &sampled)
}
