use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::array::Tensor;
use super::kernels;
use super::sparse::SparseRows;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Expm1,
    Log,
    Neg,
    Relu,
    LeakyRelu,
    Square,
    Sqrt,
}

/// Slope of the negative half of [`UnaryKind::LeakyRelu`].
pub const LEAKY_SLOPE: f64 = 0.1;

/// Epsilon added to the variance in [`Var::normalize`].
pub const NORM_EPS: f64 = 1e-5;

pub(crate) enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Unary {
        kind: UnaryKind,
        x: usize,
    },
    Scale {
        x: usize,
        k: T,
    },
    Offset {
        x: usize,
    },
    Clamp {
        x: usize,
        lo: T,
        hi: T,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Transpose {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    Normalize {
        x: usize,
        axis: usize,
        rstd: Vec<T>,
    },
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
        depthwise: bool,
    },
    Sum {
        x: usize,
    },
    SumAxis {
        x: usize,
        axis: usize,
    },
    MaxAxis {
        x: usize,
        argmax: Vec<usize>,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    SparseRows {
        x: usize,
        map: Rc<SparseRows<T>>,
    },
    BilinearSample {
        feat: usize,
        coords: usize,
    },
    Correlation {
        a: usize,
        b: usize,
        radius: usize,
    },
    RowNorm {
        x: usize,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } | Op::MatMul { a, b } | Op::Correlation { a, b, .. } => {
                vec![*a, *b]
            }
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::BilinearSample { feat, coords } => vec![*feat, *coords],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Unary { x, .. }
            | Op::Scale { x, .. }
            | Op::Offset { x }
            | Op::Clamp { x, .. }
            | Op::Transpose { x }
            | Op::Reshape { x }
            | Op::Softmax { x, .. }
            | Op::Normalize { x, .. }
            | Op::Sum { x }
            | Op::SumAxis { x, .. }
            | Op::MaxAxis { x, .. }
            | Op::Narrow { x, .. }
            | Op::SparseRows { x, .. }
            | Op::RowNorm { x } => vec![*x],
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    tracked: bool,
}

/// Ordered record of executed operations.
///
/// Node ids are assigned in execution order, so every record follows the
/// producers of its inputs and the backward pass is a single reverse sweep.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives a gradient.
    pub fn var(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var { tape: self, id }
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let tracked = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].tracked)
        };
        self.push_raw(value, op, tracked)
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar output. Each record is visited once.
    pub fn backward(&self, output: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let out_val = &nodes[output.id].value;
        if out_val.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got shape {:?}",
                out_val.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; output.id + 1];
        grads[output.id] = Some(vec![T::one()]);
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.tracked {
                grads[id] = Some(g);
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes[..=output.id]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect::<Vec<_>>();
        let grads = grads
            .into_iter()
            .zip(shapes)
            .map(|(g, s)| g.map(|g| Tensor::new(&s, g).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], id: usize, contrib: Vec<T>) {
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn accumulate_with<T: Real>(
    grads: &mut [Option<Vec<T>>],
    id: usize,
    len: usize,
    f: impl FnOnce(&mut [T]),
) {
    let slot = grads[id].get_or_insert_with(|| vec![T::zero(); len]);
    f(slot);
}

fn backprop<T: Real>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    let out = &node.value;
    let val = |i: usize| &nodes[i].value;
    let tracked = |i: usize| nodes[i].tracked;
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let (ga, gb) = kernels::binary_backward(*kind, av, bv, out.shape(), g);
            if tracked(*a) {
                accumulate(grads, *a, ga);
            }
            if tracked(*b) {
                accumulate(grads, *b, gb);
            }
        }
        Op::Unary { kind, x } => {
            let xv = val(*x).data();
            let yv = out.data();
            let slope = T::lit(LEAKY_SLOPE);
            let two = T::lit(2.0);
            let contrib = g
                .iter()
                .zip(xv.iter().zip(yv))
                .map(|(&g, (&x, &y))| {
                    g * match kind {
                        UnaryKind::Exp => y,
                        UnaryKind::Expm1 => y + T::one(),
                        UnaryKind::Log => T::one() / x,
                        UnaryKind::Neg => -T::one(),
                        UnaryKind::Relu => {
                            if x > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        UnaryKind::LeakyRelu => {
                            if x > T::zero() {
                                T::one()
                            } else {
                                slope
                            }
                        }
                        UnaryKind::Square => two * x,
                        UnaryKind::Sqrt => {
                            if y > T::zero() {
                                T::one() / (two * y)
                            } else {
                                T::zero()
                            }
                        }
                    }
                })
                .collect();
            accumulate(grads, *x, contrib);
        }
        Op::Scale { x, k } => accumulate(grads, *x, g.iter().map(|&g| g * *k).collect()),
        Op::Offset { x } | Op::Reshape { x } => accumulate(grads, *x, g.to_vec()),
        Op::Clamp { x, lo, hi } => {
            let xv = val(*x).data();
            let contrib = g
                .iter()
                .zip(xv)
                .map(|(&g, &x)| if x < *lo || x > *hi { T::zero() } else { g })
                .collect();
            accumulate(grads, *x, contrib);
        }
        Op::MatMul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let (ga, gb) = kernels::matmul_backward(av, bv, g, tracked(*a), tracked(*b));
            if let Some(ga) = ga {
                accumulate(grads, *a, ga);
            }
            if let Some(gb) = gb {
                accumulate(grads, *b, gb);
            }
        }
        Op::Transpose { x } => {
            let s = val(*x).shape();
            accumulate(grads, *x, kernels::transpose2(g, s[1], s[0]));
        }
        Op::Softmax { x, axis } => {
            let (outer, n, inner) = out.axis_split(*axis).expect("axis");
            let y = out.data();
            let mut dx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let dot: T = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..n {
                        dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            accumulate(grads, *x, dx);
        }
        Op::Normalize { x, axis, rstd } => {
            let (outer, n, inner) = out.axis_split(*axis).expect("axis");
            let xhat = out.data();
            let nf = T::from_usize(n).unwrap();
            let mut dx = vec![T::zero(); xhat.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let mg: T = (0..n).map(|j| g[at(j)]).sum::<T>() / nf;
                    let mgx: T = (0..n).map(|j| g[at(j)] * xhat[at(j)]).sum::<T>() / nf;
                    let r = rstd[o * inner + i];
                    for j in 0..n {
                        dx[at(j)] = r * (g[at(j)] - mg - xhat[at(j)] * mgx);
                    }
                }
            }
            accumulate(grads, *x, dx);
        }
        Op::Conv2d {
            x,
            w,
            stride,
            pad,
            depthwise,
        } => {
            let (xv, wv) = (val(*x), val(*w));
            let geom = kernels::ConvGeom::new(xv.shape(), wv.shape(), *stride, *pad, *depthwise)
                .expect("validated in forward");
            if tracked(*x) {
                accumulate_with(grads, *x, xv.numel(), |gx| {
                    kernels::conv2d_backward_input(&geom, wv.data(), g, gx)
                });
            }
            if tracked(*w) {
                accumulate_with(grads, *w, wv.numel(), |gw| {
                    kernels::conv2d_backward_weight(&geom, xv.data(), g, gw)
                });
            }
        }
        Op::Sum { x } => {
            let n = val(*x).numel();
            accumulate(grads, *x, vec![g[0]; n]);
        }
        Op::SumAxis { x, axis } => {
            let xv = val(*x);
            let (outer, n, inner) = xv.axis_split(*axis).expect("axis");
            let mut dx = vec![T::zero(); xv.numel()];
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        dx[(o * n + j) * inner + i] = g[o * inner + i];
                    }
                }
            }
            accumulate(grads, *x, dx);
        }
        Op::MaxAxis { x, argmax } => {
            let len = val(*x).numel();
            accumulate_with(grads, *x, len, |dx| {
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] = dx[src] + gv;
                }
            });
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = out.axis_split(*axis).expect("axis");
            let mut start = 0;
            for &xi in xs {
                let n = val(xi).shape()[*axis];
                if tracked(xi) {
                    let mut dx = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        dx.extend_from_slice(&g[base..base + n * inner]);
                    }
                    accumulate(grads, xi, dx);
                }
                start += n;
            }
        }
        Op::Narrow { x, axis, start } => {
            let xv = val(*x);
            let (outer, total, inner) = xv.axis_split(*axis).expect("axis");
            let n = out.shape()[*axis];
            accumulate_with(grads, *x, xv.numel(), |dx| {
                for o in 0..outer {
                    let base = (o * total + start) * inner;
                    let src = &g[o * n * inner..(o + 1) * n * inner];
                    for (d, &s) in dx[base..base + n * inner].iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            });
        }
        Op::SparseRows { x, map } => {
            let xv = val(*x);
            let width = xv.numel() / map.cols();
            accumulate_with(grads, *x, xv.numel(), |dx| {
                map.apply_transpose_into(g, width, dx)
            });
        }
        Op::BilinearSample { feat, coords } => {
            let (fv, cv) = (val(*feat), val(*coords));
            let (gf, gc) = kernels::bilinear_backward(fv, cv, g, tracked(*feat), tracked(*coords));
            if let Some(gf) = gf {
                accumulate(grads, *feat, gf);
            }
            if let Some(gc) = gc {
                accumulate(grads, *coords, gc);
            }
        }
        Op::Correlation { a, b, radius } => {
            let (av, bv) = (val(*a), val(*b));
            let (ga, gb) = kernels::correlation_backward(av, bv, *radius, g);
            if tracked(*a) {
                accumulate(grads, *a, ga);
            }
            if tracked(*b) {
                accumulate(grads, *b, gb);
            }
        }
        Op::RowNorm { x } => {
            let xv = val(*x);
            let d = xv.shape()[1];
            let norms = out.data();
            let mut dx = vec![T::zero(); xv.numel()];
            for (r, (&nrm, &gv)) in norms.iter().zip(g).enumerate() {
                if nrm > T::zero() {
                    for c in 0..d {
                        dx[r * d + c] = gv * xv.data()[r * d + c] / nrm;
                    }
                }
            }
            accumulate(grads, *x, dx);
        }
    }
}

/// Gradients of one backward sweep, indexed by tape record.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient w.r.t. `v`, zeros when the output does not depend on it.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

/// Handle to a tape record.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        self.tape.push(value, op)
    }
}
