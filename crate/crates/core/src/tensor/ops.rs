use std::rc::Rc;

use super::array::{axis_split, broadcast_shape, Tensor};
use super::kernels;
use super::sparse::SparseRows;
use super::tape::{BinaryKind, Op, UnaryKind, Var, LEAKY_SLOPE, NORM_EPS};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Real;

impl<'t, T: Real> Var<'t, T> {
    fn binary(self, other: Var<'t, T>, kind: BinaryKind) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(a.shape(), b.shape())?;
        if kind == BinaryKind::Div && b.data().iter().any(|&v| v == T::zero()) {
            return Err(Error::Domain("division by exact zero".into()));
        }
        let data = kernels::binary_forward(kind, &a, &b, &shape);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
        ))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Div)
    }

    fn unary(self, kind: UnaryKind) -> Result<Var<'t, T>> {
        let x = self.value();
        match kind {
            UnaryKind::Log if x.data().iter().any(|&v| v <= T::zero()) => {
                return Err(Error::Domain("log of non-positive value".into()))
            }
            UnaryKind::Sqrt if x.data().iter().any(|&v| v < T::zero()) => {
                return Err(Error::Domain("sqrt of negative value".into()))
            }
            _ => {}
        }
        let slope = T::lit(LEAKY_SLOPE);
        let y = x.map(|v| match kind {
            UnaryKind::Exp => v.exp(),
            UnaryKind::Expm1 => v.exp_m1(),
            UnaryKind::Log => v.ln(),
            UnaryKind::Neg => -v,
            UnaryKind::Relu => v.max(T::zero()),
            UnaryKind::LeakyRelu => {
                if v > T::zero() {
                    v
                } else {
                    v * slope
                }
            }
            UnaryKind::Square => v * v,
            UnaryKind::Sqrt => v.sqrt(),
        });
        Ok(self.push(y, Op::Unary { kind, x: self.id }))
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Exp)
    }

    pub fn expm1(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Expm1)
    }

    pub fn ln(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Log)
    }

    pub fn neg(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Neg)
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Relu)
    }

    pub fn leaky_relu(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::LeakyRelu)
    }

    pub fn square(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Square)
    }

    pub fn sqrt(self) -> Result<Var<'t, T>> {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn scale(self, k: T) -> Var<'t, T> {
        let y = self.value().map(|v| v * k);
        self.push(y, Op::Scale { x: self.id, k })
    }

    pub fn offset(self, k: T) -> Var<'t, T> {
        let y = self.value().map(|v| v + k);
        self.push(y, Op::Offset { x: self.id })
    }

    pub fn clamp(self, lo: T, hi: T) -> Var<'t, T> {
        let y = self.value().map(|v| v.max(lo).min(hi));
        self.push(y, Op::Clamp { x: self.id, lo, hi })
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = kernels::matmul_forward(&self.value(), &other.value())?;
        Ok(self.push(
            y,
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
        ))
    }

    /// Rank-2 transpose.
    pub fn t(self) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(shape_err!("transpose needs rank 2, got {:?}", x.shape()));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let y = Tensor::new(&[c, r], kernels::transpose2(x.data(), r, c))?;
        Ok(self.push(y, Op::Transpose { x: self.id }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let y = Tensor::new(shape, self.value().data().to_vec())?;
        Ok(self.push(y, Op::Reshape { x: self.id }))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (outer, n, inner) = x.axis_split(axis)?;
        let xd = x.data();
        let mut y = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| xd[at(j)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for j in 0..n {
                    let e = (xd[at(j)] - m).exp();
                    y[at(j)] = e;
                    s = s + e;
                }
                for j in 0..n {
                    y[at(j)] = y[at(j)] / s;
                }
            }
        }
        Ok(self.push(
            Tensor::new(x.shape(), y)?,
            Op::Softmax { x: self.id, axis },
        ))
    }

    /// Zero-mean, unit-variance standardization along `axis` (no affine).
    pub fn normalize(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (outer, n, inner) = x.axis_split(axis)?;
        if n < 2 {
            return Err(shape_err!("normalization axis extent {} < 2", n));
        }
        let nf = T::from_usize(n).unwrap();
        let eps = T::lit(NORM_EPS);
        let xd = x.data();
        let mut y = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mean = (0..n).map(|j| xd[at(j)]).sum::<T>() / nf;
                let var = (0..n)
                    .map(|j| {
                        let d = xd[at(j)] - mean;
                        d * d
                    })
                    .sum::<T>()
                    / nf;
                let r = T::one() / (var + eps).sqrt();
                rstd[o * inner + i] = r;
                for j in 0..n {
                    y[at(j)] = (xd[at(j)] - mean) * r;
                }
            }
        }
        Ok(self.push(
            Tensor::new(x.shape(), y)?,
            Op::Normalize {
                x: self.id,
                axis,
                rstd,
            },
        ))
    }

    /// Layer normalization along `axis` followed by the affine `gamma * x + beta`.
    /// `gamma` and `beta` hold one value per position along `axis`.
    pub fn layernorm(self, axis: usize, gamma: Var<'t, T>, beta: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let (_, n, _) = axis_split(&shape, axis)?;
        let mut affine_shape = vec![n];
        affine_shape.extend(std::iter::repeat(1).take(shape.len() - axis - 1));
        if gamma.value().numel() != n || beta.value().numel() != n {
            return Err(shape_err!("layernorm affine parameters must have {} entries", n));
        }
        let xhat = self.normalize(axis)?;
        xhat.mul(gamma.reshape(&affine_shape)?)?
            .add(beta.reshape(&affine_shape)?)
    }

    pub fn conv2d(self, w: Var<'t, T>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        self.conv(w, stride, pad, false)
    }

    pub fn depthwise_conv2d(self, w: Var<'t, T>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        self.conv(w, stride, pad, true)
    }

    fn conv(self, w: Var<'t, T>, stride: usize, pad: usize, depthwise: bool) -> Result<Var<'t, T>> {
        let (x, wv) = (self.value(), w.value());
        let g = kernels::ConvGeom::new(x.shape(), wv.shape(), stride, pad, depthwise)?;
        let y = kernels::conv2d_forward(&g, x.data(), wv.data());
        Ok(self.push(
            Tensor::new(&[g.oh, g.ow, g.cout], y)?,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                stride,
                pad,
                depthwise,
            },
        ))
    }

    pub fn sum(self) -> Var<'t, T> {
        let s = self.value().sum();
        self.push(Tensor::scalar(s), Op::Sum { x: self.id })
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = T::from_usize(self.value().numel()).unwrap();
        self.sum().scale(T::one() / n)
    }

    /// Sum over `axis`, removing it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (outer, n, inner) = x.axis_split(axis)?;
        let mut y = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    y[o * inner + i] = y[o * inner + i] + x.data()[(o * n + j) * inner + i];
                }
            }
        }
        let shape = reduced_shape(x.shape(), axis);
        Ok(self.push(Tensor::new(&shape, y)?, Op::SumAxis { x: self.id, axis }))
    }

    /// Maximum over `axis`, removing it from the shape.
    pub fn max_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (outer, n, inner) = x.axis_split(axis)?;
        let mut y = vec![T::zero(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * n) * inner + i;
                for j in 1..n {
                    let at = (o * n + j) * inner + i;
                    if x.data()[at] > x.data()[best] {
                        best = at;
                    }
                }
                y[o * inner + i] = x.data()[best];
                argmax[o * inner + i] = best;
            }
        }
        let shape = reduced_shape(x.shape(), axis);
        Ok(self.push(Tensor::new(&shape, y)?, Op::MaxAxis { x: self.id, argmax }))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (outer, total, inner) = x.axis_split(axis)?;
        if len == 0 || start + len > total {
            return Err(shape_err!(
                "narrow [{}, {}) out of range for extent {}",
                start,
                start + len,
                total
            ));
        }
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * total + start) * inner;
            y.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        Ok(self.push(
            Tensor::new(&shape, y)?,
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
        ))
    }

    /// Applies a constant sparse row map to the leading axis. A rank-3
    /// `H x W x C` input is treated as `(H*W) x C`; the result is `rows x C`.
    pub fn sparse_rows(self, map: &Rc<SparseRows<T>>) -> Result<Var<'t, T>> {
        let x = self.value();
        let width = if x.rank() >= 2 { x.shape()[x.rank() - 1] } else { 1 };
        let lead = x.numel() / width;
        if lead != map.cols() {
            return Err(shape_err!(
                "sparse map expects {} rows, input {:?} has {}",
                map.cols(),
                x.shape(),
                lead
            ));
        }
        let y = map.apply(x.data(), width);
        Ok(self.push(
            Tensor::new(&[map.rows(), width], y)?,
            Op::SparseRows {
                x: self.id,
                map: Rc::clone(map),
            },
        ))
    }

    /// Bilinear sampling of an `H x W x C` grid at `N x 2` pixel coordinates
    /// `(u, v)`; coordinates outside the grid clamp to the border.
    pub fn bilinear_sample(self, coords: Var<'t, T>) -> Result<Var<'t, T>> {
        let (f, c) = (self.value(), coords.value());
        if f.rank() != 3 || c.rank() != 2 || c.shape()[1] != 2 {
            return Err(shape_err!(
                "bilinear_sample needs HxWxC features and Nx2 coords, got {:?} and {:?}",
                f.shape(),
                c.shape()
            ));
        }
        let y = kernels::bilinear_forward(&f, &c);
        Ok(self.push(
            Tensor::new(&[c.shape()[0], f.shape()[2]], y)?,
            Op::BilinearSample {
                feat: self.id,
                coords: coords.id,
            },
        ))
    }

    /// Local correlation between two `H x W x C` maps over displacements in
    /// `[-radius, radius]^2`, normalized by channel count.
    pub fn correlation(self, other: Var<'t, T>, radius: usize) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 3 || a.shape() != b.shape() {
            return Err(shape_err!(
                "correlation needs equal HxWxC maps, got {:?} and {:?}",
                a.shape(),
                b.shape()
            ));
        }
        let d = 2 * radius + 1;
        let y = kernels::correlation_forward(&a, &b, radius);
        Ok(self.push(
            Tensor::new(&[a.shape()[0], a.shape()[1], d * d], y)?,
            Op::Correlation {
                a: self.id,
                b: other.id,
                radius,
            },
        ))
    }

    /// Euclidean norm of each row of an `N x D` matrix. The gradient at a
    /// zero row is taken as zero.
    pub fn row_norm(self) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(shape_err!("row_norm needs rank 2, got {:?}", x.shape()));
        }
        let d = x.shape()[1];
        let y = x
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        Ok(self.push(Tensor::new(&[x.shape()[0]], y)?, Op::RowNorm { x: self.id }))
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'t, T: Real>(xs: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let first = xs
        .first()
        .ok_or_else(|| shape_err!("concat of an empty list"))?;
    if xs.len() == 1 {
        return Ok(*first);
    }
    let vals: Vec<_> = xs.iter().map(|v| v.value()).collect();
    let base = vals[0].shape();
    let mut total = 0;
    for v in &vals {
        let s = v.shape();
        if s.len() != base.len()
            || axis >= s.len()
            || s.iter()
                .zip(base)
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(shape_err!(
                "concat along {} of mismatched shapes {:?} and {:?}",
                axis,
                base,
                s
            ));
        }
        total += s[axis];
    }
    let (outer, _, inner) = axis_split(base, axis)?;
    let mut y = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for v in &vals {
            let n = v.shape()[axis];
            y.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
        }
    }
    let mut shape = base.to_vec();
    shape[axis] = total;
    Ok(first.push(
        Tensor::new(&shape, y)?,
        Op::Concat {
            xs: xs.iter().map(|v| v.id).collect(),
            axis,
        },
    ))
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &d)| d)
        .collect()
}
