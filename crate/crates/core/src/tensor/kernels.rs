//! Forward/backward loops for the heavier tape operations.

use super::array::{broadcast_map, Tensor};
use super::tape::BinaryKind;
use crate::error::{shape_err, Result};
use crate::scalar::Real;

pub(crate) fn binary_forward<T: Real>(
    kind: BinaryKind,
    a: &Tensor<T>,
    b: &Tensor<T>,
    out_shape: &[usize],
) -> Vec<T> {
    let f = |x: T, y: T| match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
        BinaryKind::Div => x / y,
    };
    if a.shape() == b.shape() {
        return a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    }
    let ma = broadcast_map(a.shape(), out_shape);
    let mb = broadcast_map(b.shape(), out_shape);
    ma.iter()
        .zip(&mb)
        .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
        .collect()
}

pub(crate) fn binary_backward<T: Real>(
    kind: BinaryKind,
    a: &Tensor<T>,
    b: &Tensor<T>,
    out_shape: &[usize],
    g: &[T],
) -> (Vec<T>, Vec<T>) {
    let same = a.shape() == b.shape();
    let ma = if same {
        (0..g.len()).collect()
    } else {
        broadcast_map(a.shape(), out_shape)
    };
    let mb = if same {
        (0..g.len()).collect()
    } else {
        broadcast_map(b.shape(), out_shape)
    };
    let mut ga = vec![T::zero(); a.numel()];
    let mut gb = vec![T::zero(); b.numel()];
    let (ad, bd) = (a.data(), b.data());
    for (k, &gv) in g.iter().enumerate() {
        let (i, j) = (ma[k], mb[k]);
        let (x, y) = (ad[i], bd[j]);
        let (da, db) = match kind {
            BinaryKind::Add => (gv, gv),
            BinaryKind::Sub => (gv, -gv),
            BinaryKind::Mul => (gv * y, gv * x),
            BinaryKind::Div => (gv / y, -gv * x / (y * y)),
        };
        ga[i] = ga[i] + da;
        gb[j] = gb[j] + db;
    }
    (ga, gb)
}

/// `(batch, m, k, n)` for rank-2 or equal-batch rank-3 operands.
pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (a.len(), b.len()) {
        (2, 2) if a[1] == b[0] => Ok((1, a[0], a[1], b[1])),
        (3, 3) if a[0] == b[0] && a[2] == b[1] => Ok((a[0], a[1], a[2], b[2])),
        _ => Err(shape_err!("matmul inner extents mismatch: {:?} x {:?}", a, b)),
    }
}

fn gemm_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

pub(crate) fn transpose2<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

pub(crate) fn matmul_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, m, k, n) = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![T::zero(); batch * m * n];
    for bi in 0..batch {
        gemm_acc(
            &a.data()[bi * m * k..(bi + 1) * m * k],
            &b.data()[bi * k * n..(bi + 1) * k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    }
    let shape = if a.rank() == 2 {
        vec![m, n]
    } else {
        vec![batch, m, n]
    };
    Tensor::new(&shape, out)
}

pub(crate) fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &[T],
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (batch, m, k, n) = matmul_dims(a.shape(), b.shape()).expect("validated");
    let mut ga = need_a.then(|| vec![T::zero(); a.numel()]);
    let mut gb = need_b.then(|| vec![T::zero(); b.numel()]);
    for bi in 0..batch {
        let gs = &g[bi * m * n..(bi + 1) * m * n];
        let asl = &a.data()[bi * m * k..(bi + 1) * m * k];
        let bsl = &b.data()[bi * k * n..(bi + 1) * k * n];
        if let Some(ga) = ga.as_mut() {
            // dA = G * B^T
            let bt = transpose2(bsl, k, n);
            gemm_acc(gs, &bt, &mut ga[bi * m * k..(bi + 1) * m * k], m, n, k);
        }
        if let Some(gb) = gb.as_mut() {
            // dB = A^T * G
            let at = transpose2(asl, m, k);
            gemm_acc(&at, gs, &mut gb[bi * k * n..(bi + 1) * k * n], k, m, n);
        }
    }
    (ga, gb)
}

/// Shape bookkeeping for an HWC convolution.
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
    pub depthwise: bool,
}

impl ConvGeom {
    pub fn new(
        x: &[usize],
        w: &[usize],
        stride: usize,
        pad: usize,
        depthwise: bool,
    ) -> Result<Self> {
        if x.len() != 3 {
            return Err(shape_err!("conv2d input must be HxWxC, got {:?}", x));
        }
        let (h, wd, cin) = (x[0], x[1], x[2]);
        let (k, cout) = if depthwise {
            if w.len() != 3 || w[0] != w[1] || w[2] != cin {
                return Err(shape_err!(
                    "depthwise weights must be k x k x {}, got {:?}",
                    cin,
                    w
                ));
            }
            (w[0], cin)
        } else {
            if w.len() != 4 || w[0] != w[1] || w[2] != cin {
                return Err(shape_err!(
                    "conv weights must be k x k x {} x Cout, got {:?}",
                    cin,
                    w
                ));
            }
            (w[0], w[3])
        };
        if k % 2 == 0 {
            return Err(shape_err!("conv kernel extent {} must be odd", k));
        }
        if stride == 0 {
            return Err(shape_err!("conv stride must be positive"));
        }
        if k > h + 2 * pad || k > wd + 2 * pad {
            return Err(shape_err!(
                "kernel {} larger than padded input {}x{} (pad {})",
                k,
                h,
                wd,
                pad
            ));
        }
        Ok(Self {
            h,
            w: wd,
            cin,
            cout,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (wd + 2 * pad - k) / stride + 1,
            depthwise,
        })
    }

    /// Visits every (output pixel, kernel tap, input pixel) triple in bounds.
    #[inline]
    fn taps(&self, mut f: impl FnMut(usize, usize, usize)) {
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let o = oy * self.ow + ox;
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        f(o, ky * self.k + kx, iy as usize * self.w + ix as usize);
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.oh * g.ow * g.cout];
    let (cin, cout) = (g.cin, g.cout);
    g.taps(|o, tap, i| {
        let xin = &x[i * cin..(i + 1) * cin];
        let dst = &mut out[o * cout..(o + 1) * cout];
        if g.depthwise {
            let wt = &w[tap * cin..(tap + 1) * cin];
            for ((d, &xv), &wv) in dst.iter_mut().zip(xin).zip(wt) {
                *d = *d + xv * wv;
            }
        } else {
            for (ci, &xv) in xin.iter().enumerate() {
                let wrow = &w[(tap * cin + ci) * cout..(tap * cin + ci + 1) * cout];
                for (d, &wv) in dst.iter_mut().zip(wrow) {
                    *d = *d + xv * wv;
                }
            }
        }
    });
    out
}

pub(crate) fn conv2d_backward_input<T: Real>(g: &ConvGeom, w: &[T], go: &[T], gx: &mut [T]) {
    let (cin, cout) = (g.cin, g.cout);
    g.taps(|o, tap, i| {
        let gout = &go[o * cout..(o + 1) * cout];
        let dst = &mut gx[i * cin..(i + 1) * cin];
        if g.depthwise {
            let wt = &w[tap * cin..(tap + 1) * cin];
            for ((d, &gv), &wv) in dst.iter_mut().zip(gout).zip(wt) {
                *d = *d + gv * wv;
            }
        } else {
            for (ci, d) in dst.iter_mut().enumerate() {
                let wrow = &w[(tap * cin + ci) * cout..(tap * cin + ci + 1) * cout];
                let s: T = wrow.iter().zip(gout).map(|(&wv, &gv)| wv * gv).sum();
                *d = *d + s;
            }
        }
    });
}

pub(crate) fn conv2d_backward_weight<T: Real>(g: &ConvGeom, x: &[T], go: &[T], gw: &mut [T]) {
    let (cin, cout) = (g.cin, g.cout);
    g.taps(|o, tap, i| {
        let gout = &go[o * cout..(o + 1) * cout];
        let xin = &x[i * cin..(i + 1) * cin];
        if g.depthwise {
            let dst = &mut gw[tap * cin..(tap + 1) * cin];
            for ((d, &gv), &xv) in dst.iter_mut().zip(gout).zip(xin) {
                *d = *d + gv * xv;
            }
        } else {
            for (ci, &xv) in xin.iter().enumerate() {
                let dst = &mut gw[(tap * cin + ci) * cout..(tap * cin + ci + 1) * cout];
                for (d, &gv) in dst.iter_mut().zip(gout) {
                    *d = *d + xv * gv;
                }
            }
        }
    });
}

/// Bilinear stencil of one clamped sample: the four source pixels, their
/// weights, and the partial derivatives of each weight w.r.t. (u, v).
pub(crate) struct Stencil<T> {
    pub idx: [usize; 4],
    pub wts: [T; 4],
    pub du: [T; 4],
    pub dv: [T; 4],
}

pub(crate) fn stencil<T: Real>(u: T, v: T, h: usize, w: usize) -> Stencil<T> {
    let wmax = T::from_usize(w - 1).unwrap();
    let hmax = T::from_usize(h - 1).unwrap();
    let (uc, u_in) = clamp_coord(u, wmax);
    let (vc, v_in) = clamp_coord(v, hmax);
    let x0 = uc.floor().to_usize().unwrap().min(w - 1);
    let y0 = vc.floor().to_usize().unwrap().min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let ax = uc - T::from_usize(x0).unwrap();
    let ay = vc - T::from_usize(y0).unwrap();
    let one = T::one();
    let zero = T::zero();
    let su = if u_in && x1 != x0 { one } else { zero };
    let sv = if v_in && y1 != y0 { one } else { zero };
    Stencil {
        idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        wts: [
            (one - ax) * (one - ay),
            ax * (one - ay),
            (one - ax) * ay,
            ax * ay,
        ],
        du: [
            -(one - ay) * su,
            (one - ay) * su,
            -ay * su,
            ay * su,
        ],
        dv: [
            -(one - ax) * sv,
            -ax * sv,
            (one - ax) * sv,
            ax * sv,
        ],
    }
}

fn clamp_coord<T: Real>(c: T, max: T) -> (T, bool) {
    if c < T::zero() {
        (T::zero(), false)
    } else if c > max {
        (max, false)
    } else {
        (c, true)
    }
}

pub(crate) fn bilinear_forward<T: Real>(feat: &Tensor<T>, coords: &Tensor<T>) -> Vec<T> {
    let (h, w, c) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    let n = coords.shape()[0];
    let fd = feat.data();
    let cd = coords.data();
    let mut out = vec![T::zero(); n * c];
    for p in 0..n {
        let st = stencil(cd[2 * p], cd[2 * p + 1], h, w);
        let dst = &mut out[p * c..(p + 1) * c];
        for (&i, &wt) in st.idx.iter().zip(&st.wts) {
            if wt == T::zero() {
                continue;
            }
            for (d, &f) in dst.iter_mut().zip(&fd[i * c..(i + 1) * c]) {
                *d = *d + wt * f;
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward<T: Real>(
    feat: &Tensor<T>,
    coords: &Tensor<T>,
    g: &[T],
    need_feat: bool,
    need_coords: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (h, w, c) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    let n = coords.shape()[0];
    let fd = feat.data();
    let cd = coords.data();
    let mut gf = need_feat.then(|| vec![T::zero(); feat.numel()]);
    let mut gc = need_coords.then(|| vec![T::zero(); coords.numel()]);
    for p in 0..n {
        let st = stencil(cd[2 * p], cd[2 * p + 1], h, w);
        let gp = &g[p * c..(p + 1) * c];
        if let Some(gf) = gf.as_mut() {
            for (&i, &wt) in st.idx.iter().zip(&st.wts) {
                for (d, &gv) in gf[i * c..(i + 1) * c].iter_mut().zip(gp) {
                    *d = *d + wt * gv;
                }
            }
        }
        if let Some(gc) = gc.as_mut() {
            let mut du = T::zero();
            let mut dv = T::zero();
            for k in 0..4 {
                let i = st.idx[k];
                let dot: T = fd[i * c..(i + 1) * c]
                    .iter()
                    .zip(gp)
                    .map(|(&f, &gv)| f * gv)
                    .sum();
                du = du + st.du[k] * dot;
                dv = dv + st.dv[k] * dot;
            }
            gc[2 * p] = gc[2 * p] + du;
            gc[2 * p + 1] = gc[2 * p + 1] + dv;
        }
    }
    (gf, gc)
}

pub(crate) fn correlation_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, r: usize) -> Vec<T> {
    let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let d = 2 * r + 1;
    let inv_c = T::one() / T::from_usize(c).unwrap();
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); h * w * d * d];
    for y in 0..h {
        for x in 0..w {
            let fa = &ad[(y * w + x) * c..(y * w + x + 1) * c];
            for dy in 0..d {
                let yy = y as isize + dy as isize - r as isize;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in 0..d {
                    let xx = x as isize + dx as isize - r as isize;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let j = yy as usize * w + xx as usize;
                    let fb = &bd[j * c..(j + 1) * c];
                    let dot: T = fa.iter().zip(fb).map(|(&p, &q)| p * q).sum();
                    out[(y * w + x) * d * d + dy * d + dx] = dot * inv_c;
                }
            }
        }
    }
    out
}

pub(crate) fn correlation_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    r: usize,
    g: &[T],
) -> (Vec<T>, Vec<T>) {
    let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let d = 2 * r + 1;
    let inv_c = T::one() / T::from_usize(c).unwrap();
    let (ad, bd) = (a.data(), b.data());
    let mut ga = vec![T::zero(); ad.len()];
    let mut gb = vec![T::zero(); bd.len()];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            for dy in 0..d {
                let yy = y as isize + dy as isize - r as isize;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in 0..d {
                    let xx = x as isize + dx as isize - r as isize;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let gv = g[i * d * d + dy * d + dx] * inv_c;
                    if gv == T::zero() {
                        continue;
                    }
                    let j = yy as usize * w + xx as usize;
                    for ch in 0..c {
                        ga[i * c + ch] = ga[i * c + ch] + gv * bd[j * c + ch];
                        gb[j * c + ch] = gb[j * c + ch] + gv * ad[i * c + ch];
                    }
                }
            }
        }
    }
    (ga, gb)
}
