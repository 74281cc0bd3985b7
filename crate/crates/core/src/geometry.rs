//! Pinhole camera and all 2D/3D feature transport: projection, bilinear
//! sampling, splatting, inverse-distance interpolation and warping.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Real;
use crate::tensor::{concat, SparseRows, Tensor, Var};

/// Epsilon added to neighbor distances in inverse-distance weights.
pub const IDW_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(f: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            f,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Principal point at the image center.
    pub fn centered(f: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(f, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::Geometry(format!("invalid intrinsics {self:?}")));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::Geometry(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Intrinsics of a feature map downsampled by `factor` with pixel
    /// centers kept aligned, at the given extents.
    pub fn downscaled(&self, factor: usize, width: usize, height: usize) -> Self {
        let s = factor as f64;
        Self {
            f: self.f / s,
            cx: (self.cx + 0.5) / s - 0.5,
            cy: (self.cy + 0.5) / s - 0.5,
            width,
            height,
        }
    }
}

/// 3D positions in the camera frame (z forward), stored `N x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet<T> {
    positions: Tensor<T>,
}

impl<T: Real> PointSet<T> {
    pub fn new(positions: Tensor<T>) -> Result<Self> {
        if positions.rank() != 2 || positions.shape()[1] != 3 {
            return Err(shape_err!("point set must be N x 3, got {:?}", positions.shape()));
        }
        if !positions.all_finite() {
            return Err(Error::Geometry("non-finite point position".into()));
        }
        Ok(Self { positions })
    }

    pub fn from_points(points: &[[T; 3]]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptySet("point set has no points".into()));
        }
        let data = points.iter().flat_map(|p| p.iter().copied()).collect();
        Self::new(Tensor::new(&[points.len(), 3], data)?)
    }

    pub fn len(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn positions(&self) -> &Tensor<T> {
        &self.positions
    }

    pub fn point(&self, i: usize) -> [T; 3] {
        let d = self.positions.data();
        [d[3 * i], d[3 * i + 1], d[3 * i + 2]]
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::EmptySet("empty point subset".into()));
        }
        let data = idx.iter().flat_map(|&i| self.point(i)).collect();
        Self::new(Tensor::new(&[idx.len(), 3], data)?)
    }

    /// Positions displaced by an `N x 3` flow.
    pub fn displaced(&self, flow: &Tensor<T>) -> Result<Self> {
        if flow.shape() != self.positions.shape() {
            return Err(shape_err!(
                "scene flow {:?} does not match {} points",
                flow.shape(),
                self.len()
            ));
        }
        let data = self
            .positions
            .data()
            .iter()
            .zip(flow.data())
            .map(|(&p, &s)| p + s)
            .collect();
        Self::new(Tensor::new(self.positions.shape(), data)?)
    }
}

fn check_depth<T: Real>(points: &PointSet<T>) -> Result<()> {
    for i in 0..points.len() {
        if points.point(i)[2] <= T::zero() {
            return Err(Error::Geometry(format!(
                "point {i} has non-positive depth {}",
                points.point(i)[2]
            )));
        }
    }
    Ok(())
}

/// `u = f x / z + cx`, `v = f y / z + cy`, returned as `N x 2`.
pub fn project<T: Real>(points: &PointSet<T>, cam: &CameraIntrinsics) -> Result<Tensor<T>> {
    check_depth(points)?;
    let (f, cx, cy) = (T::lit(cam.f), T::lit(cam.cx), T::lit(cam.cy));
    let data = (0..points.len())
        .flat_map(|i| {
            let [x, y, z] = points.point(i);
            [f * x / z + cx, f * y / z + cy]
        })
        .collect();
    Tensor::new(&[points.len(), 2], data)
}

/// Differentiable projection of `N x 3` positions.
pub fn project_var<'t, T: Real>(positions: Var<'t, T>, cam: &CameraIntrinsics) -> Result<Var<'t, T>> {
    check_depth(&PointSet::new((*positions.value()).clone())?)?;
    let x = positions.narrow(1, 0, 1)?;
    let y = positions.narrow(1, 1, 1)?;
    let z = positions.narrow(1, 2, 1)?;
    let f = T::lit(cam.f);
    let u = x.div(z)?.scale(f).offset(T::lit(cam.cx));
    let v = y.div(z)?.scale(f).offset(T::lit(cam.cy));
    concat(&[u, v], 1)
}

/// Lifts every valid pixel of an `H x W` depth map to a 3D point. Returns
/// the points and the `(x, y)` pixel each came from.
pub fn backproject<T: Real>(
    depth: &Tensor<T>,
    valid: Option<&[bool]>,
    cam: &CameraIntrinsics,
) -> Result<(PointSet<T>, Vec<(usize, usize)>)> {
    if depth.rank() != 2 {
        return Err(shape_err!("depth map must be H x W, got {:?}", depth.shape()));
    }
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    if let Some(m) = valid {
        if m.len() != h * w {
            return Err(shape_err!("validity mask has {} entries for {}x{}", m.len(), h, w));
        }
    }
    let (f, cx, cy) = (T::lit(cam.f), T::lit(cam.cx), T::lit(cam.cy));
    let mut pts = Vec::new();
    let mut pix = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let z = depth.data()[i];
            if valid.map_or(false, |m| !m[i]) || !(z > T::zero()) {
                continue;
            }
            let u = T::from_usize(x).unwrap();
            let v = T::from_usize(y).unwrap();
            pts.push([(u - cx) * z / f, (v - cy) * z / f, z]);
            pix.push((x, y));
        }
    }
    if pts.is_empty() {
        return Err(Error::EmptySet("depth map has no valid pixels".into()));
    }
    Ok((PointSet::from_points(&pts)?, pix))
}

/// Differentiable bilinear sampling with border clamping.
pub fn bilinear_sample<'t, T: Real>(feat: Var<'t, T>, coords: Var<'t, T>) -> Result<Var<'t, T>> {
    feat.bilinear_sample(coords)
}

/// Fixed-coordinate bilinear sampling as a sparse map from an `H x W` grid
/// to `N` rows; coordinates clamp to the border.
pub fn bilinear_matrix<T: Real>(coords: &Tensor<T>, height: usize, width: usize) -> SparseRows<T> {
    let n = coords.shape()[0];
    let wmax = T::from_usize(width - 1).unwrap();
    let hmax = T::from_usize(height - 1).unwrap();
    let mut b = SparseRows::builder(height * width);
    for p in 0..n {
        let u = coords.data()[2 * p].max(T::zero()).min(wmax);
        let v = coords.data()[2 * p + 1].max(T::zero()).min(hmax);
        let x0 = u.floor().to_usize().unwrap().min(width - 1);
        let y0 = v.floor().to_usize().unwrap().min(height - 1);
        let ax = u - T::from_usize(x0).unwrap();
        let ay = v - T::from_usize(y0).unwrap();
        let x1 = (x0 + 1).min(width - 1);
        let y1 = (y0 + 1).min(height - 1);
        let one = T::one();
        for (x, y, wt) in [
            (x0, y0, (one - ax) * (one - ay)),
            (x1, y0, ax * (one - ay)),
            (x0, y1, (one - ax) * ay),
            (x1, y1, ax * ay),
        ] {
            if wt != T::zero() {
                b.push(y * width + x, wt);
            }
        }
        b.end_row();
    }
    b.finish()
}

/// Raw (unnormalized) bilinear splat weights: one row per pixel of the
/// `H x W` grid, one column per point. Corners outside the image are
/// dropped.
pub fn splat_weights<T: Real>(coords: &Tensor<T>, height: usize, width: usize) -> SparseRows<T> {
    let n = coords.shape()[0];
    let mut rows: Vec<Vec<(usize, T)>> = vec![Vec::new(); height * width];
    let one = T::one();
    for p in 0..n {
        let u = coords.data()[2 * p];
        let v = coords.data()[2 * p + 1];
        if !u.is_finite() || !v.is_finite() {
            continue;
        }
        let fx = u.floor();
        let fy = v.floor();
        let ax = u - fx;
        let ay = v - fy;
        let (Some(x0), Some(y0)) = (fx.to_i64(), fy.to_i64()) else { continue };
        for (dx, dy, wt) in [
            (0, 0, (one - ax) * (one - ay)),
            (1, 0, ax * (one - ay)),
            (0, 1, (one - ax) * ay),
            (1, 1, ax * ay),
        ] {
            let (x, y) = (x0 + dx, y0 + dy);
            if wt == T::zero() || x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
                continue;
            }
            rows[y as usize * width + x as usize].push((p, wt));
        }
    }
    crate::tensor::sparse_from_rows(n, &rows)
}

/// Dense `H x W x C` map from per-point features: normalized bilinear
/// splatting (empty pixels stay zero) followed by a learnable `C x C'`
/// channel mixing.
pub fn scatter_interpolate<'t, T: Real>(
    features: Var<'t, T>,
    coords: &Tensor<T>,
    height: usize,
    width: usize,
    mix: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let splat = Rc::new(splat_weights(coords, height, width).normalize_rows());
    let dense = splat_dense(features, &splat)?;
    let c_out = mix.value().shape()[1];
    dense.matmul(mix)?.reshape(&[height, width, c_out])
}

/// Applies a precomputed normalized splat; returns `(H*W) x C`.
pub fn splat_dense<'t, T: Real>(features: Var<'t, T>, splat: &Rc<SparseRows<T>>) -> Result<Var<'t, T>> {
    features.sparse_rows(splat)
}

/// Backward warp: `out(x) = feat2(x + flow(x))`, bilinear with border clamp.
pub fn warp2d<'t, T: Real>(feat2: Var<'t, T>, flow: Var<'t, T>) -> Result<Var<'t, T>> {
    let fs = feat2.shape();
    let (h, w) = (fs[0], fs[1]);
    if flow.shape() != [h, w, 2] {
        return Err(shape_err!(
            "flow {:?} does not match feature grid {}x{}",
            flow.shape(),
            h,
            w
        ));
    }
    let grid = Tensor::from_fn(&[h * w, 2], |i| {
        let p = i / 2;
        T::from_usize(if i % 2 == 0 { p % w } else { p / w }).unwrap()
    });
    let coords = flow.reshape(&[h * w, 2])?.add(flow.tape().constant(grid))?;
    feat2
        .bilinear_sample(coords)?
        .reshape(&[h, w, fs[2]])
}

fn dist2<T: Real>(a: [T; 3], b: [T; 3]) -> T {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

/// `k` nearest reference points of every query, nearest first, with
/// Euclidean distances. Ties break toward the lower index.
pub fn knn<T: Real>(query: &PointSet<T>, reference: &PointSet<T>, k: usize) -> Vec<Vec<(usize, T)>> {
    let k = k.min(reference.len());
    (0..query.len())
        .map(|i| {
            let q = query.point(i);
            let mut d: Vec<(usize, T)> = (0..reference.len())
                .map(|j| (j, dist2(q, reference.point(j))))
                .collect();
            if k < d.len() {
                d.select_nth_unstable_by(k - 1, |a, b| cmp_dist(a, b));
                d.truncate(k);
            }
            d.sort_by(cmp_dist);
            d.into_iter().map(|(j, d2)| (j, d2.sqrt())).collect()
        })
        .collect()
}

fn cmp_dist<T: Real>(a: &(usize, T), b: &(usize, T)) -> std::cmp::Ordering {
    a.1.partial_cmp(&b.1)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

/// Inverse-distance interpolation weights over the `k` nearest reference
/// points, `1 / (d + 1e-8)` normalized per query.
pub fn idw_matrix<T: Real>(query: &PointSet<T>, reference: &PointSet<T>, k: usize) -> Result<SparseRows<T>> {
    if reference.is_empty() {
        return Err(Error::Geometry("inverse-distance gather from an empty point set".into()));
    }
    let eps = T::lit(IDW_EPS);
    let rows: Vec<Vec<(usize, T)>> = knn(query, reference, k)
        .into_iter()
        .map(|nb| nb.into_iter().map(|(j, d)| (j, T::one() / (d + eps))).collect())
        .collect();
    Ok(crate::tensor::sparse_from_rows(reference.len(), &rows).normalize_rows())
}

/// Gathers frame-2 point features at frame-1 points displaced by their
/// scene flow, by inverse-distance weighting over the `k` nearest frame-2
/// points. Neighbour selection follows the current scene-flow value; the
/// weights are differentiable in both the features and the scene flow.
pub fn warp3d<'t, T: Real>(
    feat2: Var<'t, T>,
    pc2: &PointSet<T>,
    pc1: &PointSet<T>,
    sceneflow: Var<'t, T>,
    k: usize,
) -> Result<Var<'t, T>> {
    let sv = sceneflow.value();
    if sv.shape() != [pc1.len(), 3] {
        return Err(shape_err!(
            "scene flow {:?} does not match {} frame-1 points",
            sv.shape(),
            pc1.len()
        ));
    }
    if pc2.is_empty() {
        return Err(Error::Geometry("warp3d with empty frame-2 set".into()));
    }
    let c = feat2.shape()[1];
    let n = pc1.len();
    let query = pc1.displaced(&sv)?;
    let nb = knn(&query, pc2, k);
    let k = nb[0].len();
    let gather = Rc::new(crate::tensor::sparse_from_rows(
        pc2.len(),
        &nb.iter().flatten().map(|&(j, _)| vec![(j, T::one())]).collect::<Vec<_>>(),
    ));
    let repeat = Rc::new(repeat_rows::<T>(n, k));
    let tape = feat2.tape();
    let base = Tensor::from_fn(&[n * k, 3], |i| {
        let (r, d) = (i / 3, i % 3);
        pc2.point(nb[r / k][r % k].0)[d] - pc1.point(r / k)[d]
    });
    let dist = tape.constant(base).sub(sceneflow.sparse_rows(&repeat)?)?.row_norm()?;
    let inv = tape.constant(Tensor::ones(&[n * k])).div(dist.offset(T::lit(IDW_EPS)))?;
    let norm = inv.reshape(&[n, k])?.sum_axis(1)?.reshape(&[n, 1])?;
    let w = inv.reshape(&[n, k])?.div(norm)?.reshape(&[n * k, 1])?;
    feat2
        .sparse_rows(&gather)?
        .mul(w)?
        .reshape(&[n, k, c])?
        .sum_axis(1)
}

/// `(n*k) x n` map repeating every row `k` times.
pub fn repeat_rows<T: Real>(n: usize, k: usize) -> SparseRows<T> {
    let rows: Vec<Vec<(usize, T)>> = (0..n * k).map(|r| vec![(r / k, T::one())]).collect();
    crate::tensor::sparse_from_rows(n, &rows)
}

/// Greedy furthest-point sampling starting from point 0.
pub fn furthest_point_sample<T: Real>(points: &PointSet<T>, count: usize) -> Vec<usize> {
    let n = points.len();
    let count = count.min(n);
    if count == 0 {
        return Vec::new();
    }
    let mut chosen = Vec::with_capacity(count);
    let mut best = vec![T::infinity(); n];
    let mut cur = 0;
    for _ in 0..count {
        chosen.push(cur);
        let p = points.point(cur);
        let mut next = 0;
        let mut far = T::neg_infinity();
        for j in 0..n {
            let d = dist2(p, points.point(j));
            if d < best[j] {
                best[j] = d;
            }
            if best[j] > far {
                far = best[j];
                next = j;
            }
        }
        cur = next;
    }
    chosen
}

/// Sparse map for x2 bilinear upsampling of an `h x w` grid to
/// `out_h x out_w`, pixel centers aligned.
pub fn upsample_matrix<T: Real>(h: usize, w: usize, out_h: usize, out_w: usize) -> SparseRows<T> {
    let half = T::lit(0.5);
    let coords = Tensor::from_fn(&[out_h * out_w, 2], |i| {
        let p = i / 2;
        let c = if i % 2 == 0 { p % out_w } else { p / out_w };
        (T::from_usize(c).unwrap() + half) * half - half
    });
    bilinear_matrix(&coords, h, w)
}

/// Area-mean downsampling of an `H x W x C` grid by an integer factor;
/// partial border blocks average the pixels they contain.
pub fn area_downsample<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if x.rank() != 3 || factor == 0 {
        return Err(shape_err!("area_downsample needs HxWxC and factor > 0"));
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h.div_ceil(factor), w.div_ceil(factor));
    let mut out = vec![T::zero(); oh * ow * c];
    let mut cnt = vec![0usize; oh * ow];
    for y in 0..h {
        for xx in 0..w {
            let o = (y / factor) * ow + xx / factor;
            cnt[o] += 1;
            for ch in 0..c {
                out[o * c + ch] = out[o * c + ch] + x.data()[(y * w + xx) * c + ch];
            }
        }
    }
    for (o, &n) in cnt.iter().enumerate() {
        let nf = T::from_usize(n).unwrap();
        for ch in 0..c {
            out[o * c + ch] = out[o * c + ch] / nf;
        }
    }
    Tensor::new(&[oh, ow, c], out)
}
