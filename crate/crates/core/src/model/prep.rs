//! Per-sample constant structures: level extents, point hierarchies,
//! projections, grouping maps and inter-level interpolation maps.

use std::rc::Rc;

use crate::error::{shape_err, Result};
use crate::geometry::{furthest_point_sample, idw_matrix, knn, project, upsample_matrix, CameraIntrinsics, PointSet};
use crate::scalar::Real;
use crate::tensor::{sparse_from_rows, SparseRows, Tensor};

use super::ModelConfig;

/// Neighbours used when interpolating values between point sets.
pub const INTERP_K: usize = 3;

/// One network input: two grayscale frames, two point clouds, the event
/// voxel grid between them and the camera.
#[derive(Clone, Debug)]
pub struct ModelInputs<T> {
    /// `H x W` intensities for frame 1 and frame 2.
    pub rgb: [Tensor<T>; 2],
    pub points: [PointSet<T>; 2],
    /// `H x W x B`.
    pub voxels: Tensor<T>,
    pub cam: CameraIntrinsics,
}

impl<T: Real> ModelInputs<T> {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let (h, w) = (self.cam.height, self.cam.width);
        for (k, im) in self.rgb.iter().enumerate() {
            if im.shape() != [h, w] {
                return Err(shape_err!("frame {} is {:?}, camera is {}x{}", k + 1, im.shape(), h, w));
            }
        }
        if self.voxels.shape() != [h, w, cfg.event_bins] {
            return Err(shape_err!(
                "voxel grid {:?} does not match {}x{}x{}",
                self.voxels.shape(),
                h,
                w,
                cfg.event_bins
            ));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelInputs<U> {
        ModelInputs {
            rgb: [self.rgb[0].cast(), self.rgb[1].cast()],
            points: [
                PointSet::new(self.points[0].positions().cast()).expect("valid"),
                PointSet::new(self.points[1].positions().cast()).expect("valid"),
            ],
            voxels: self.voxels.cast(),
            cam: self.cam.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LevelGeometry<T> {
    pub height: usize,
    pub width: usize,
    pub cam: CameraIntrinsics,
    pub points: [PointSet<T>; 2],
    /// Indices of this level's points in the input clouds.
    pub indices: [Vec<usize>; 2],
    /// Image-plane coordinates of the points at this level's resolution.
    pub coords: [Tensor<T>; 2],
    /// One-hot gather of the `k` neighbours (in the previous level) of
    /// every point, `(n*k)` rows.
    pub group: [Rc<SparseRows<T>>; 2],
    /// Neighbour offsets `p_j - p_i`, `(n*k) x 3`.
    pub rel: [Tensor<T>; 2],
    pub group_k: [usize; 2],
}

#[derive(Clone, Debug)]
pub struct SampleGeometry<T> {
    pub height: usize,
    pub width: usize,
    /// Finest first.
    pub levels: Vec<LevelGeometry<T>>,
    /// Entry `i` maps level `i + 1` grids onto level `i`.
    pub up2d: Vec<Rc<SparseRows<T>>>,
    /// Entry `i` interpolates frame-1 values from level `i + 1` points to level `i` points.
    pub up3d: Vec<Rc<SparseRows<T>>>,
    /// Level 0 grid to input resolution.
    pub full2d: Rc<SparseRows<T>>,
    /// Level 0 frame-1 points to input frame-1 points.
    pub full3d: Rc<SparseRows<T>>,
}

/// One-hot neighbour gather and offsets for grouping `queries` (indices
/// into `reference`) over their `k` nearest reference points.
pub fn grouping<T: Real>(reference: &PointSet<T>, queries: &PointSet<T>, k: usize) -> (SparseRows<T>, Tensor<T>, usize) {
    let nb = knn(queries, reference, k);
    let k = nb.first().map_or(0, |v| v.len());
    let mut rows = Vec::with_capacity(queries.len() * k);
    let mut rel = Vec::with_capacity(queries.len() * k * 3);
    for (i, list) in nb.iter().enumerate() {
        let q = queries.point(i);
        for &(j, _) in list {
            rows.push(vec![(j, T::one())]);
            let p = reference.point(j);
            rel.extend_from_slice(&[p[0] - q[0], p[1] - q[1], p[2] - q[2]]);
        }
    }
    let rel = Tensor::new(&[rows.len(), 3], rel).expect("consistent offsets");
    (sparse_from_rows(reference.len(), &rows), rel, k)
}

impl<T: Real> SampleGeometry<T> {
    pub fn new(inputs: &ModelInputs<T>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        inputs.validate(cfg)?;
        let (h, w) = (inputs.cam.height, inputs.cam.width);
        let mut levels: Vec<LevelGeometry<T>> = Vec::with_capacity(cfg.levels);
        let (mut lh, mut lw) = (h, w);
        for lvl in 0..cfg.levels {
            lh = lh.div_ceil(2);
            lw = lw.div_ceil(2);
            let cam = inputs.cam.downscaled(1 << (lvl + 1), lw, lh);
            let build = |frame: usize| -> Result<_> {
                let (prev, prev_idx): (&PointSet<T>, Vec<usize>) = match levels.last() {
                    Some(l) => (&l.points[frame], l.indices[frame].clone()),
                    None => (&inputs.points[frame], (0..inputs.points[frame].len()).collect()),
                };
                let count = ((prev.len() as f64 * cfg.point_ratio).round() as usize).max(1);
                let pick = furthest_point_sample(prev, count);
                let points = prev.subset(&pick)?;
                let (group, rel, k) = grouping(prev, &points, cfg.knn);
                let coords = project(&points, &cam)?;
                let indices: Vec<usize> = pick.iter().map(|&i| prev_idx[i]).collect();
                Ok((points, indices, coords, Rc::new(group), rel, k))
            };
            let f1 = build(0)?;
            let f2 = build(1)?;
            levels.push(LevelGeometry {
                height: lh,
                width: lw,
                cam,
                points: [f1.0, f2.0],
                indices: [f1.1, f2.1],
                coords: [f1.2, f2.2],
                group: [f1.3, f2.3],
                rel: [f1.4, f2.4],
                group_k: [f1.5, f2.5],
            });
        }
        let mut up2d = Vec::new();
        let mut up3d = Vec::new();
        for lvl in 0..cfg.levels - 1 {
            let (fine, coarse) = (&levels[lvl], &levels[lvl + 1]);
            up2d.push(Rc::new(upsample_matrix(coarse.height, coarse.width, fine.height, fine.width)));
            up3d.push(Rc::new(idw_matrix(&fine.points[0], &coarse.points[0], INTERP_K)?));
        }
        let l0 = &levels[0];
        let full2d = Rc::new(upsample_matrix(l0.height, l0.width, h, w));
        let full3d = Rc::new(idw_matrix(&inputs.points[0], &l0.points[0], INTERP_K)?);
        Ok(Self {
            height: h,
            width: w,
            levels,
            up2d,
            up3d,
            full2d,
            full3d,
        })
    }
}
