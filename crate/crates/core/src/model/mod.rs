//! The pyramid network: Siamese encoders for images, events and points,
//! feature / motion / estimation stage fusion, 2D and 3D cost volumes and
//! coarse-to-fine flow estimation.

mod config;
mod prep;

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{maf_2d, maf_3d_at, Branch, FusionMode, MafSpec, PlanarAux};
use crate::geometry::{bilinear_matrix, repeat_rows, warp2d, warp3d};
use crate::mireg::{mi_pair, mi_triple, HeadSpec};
use crate::scalar::Real;
use crate::tensor::{concat, Bound, ParamStore, Tensor, Var};

pub use config::ModelConfig;
pub use prep::{grouping, LevelGeometry, ModelInputs, SampleGeometry, INTERP_K};

/// Weight scale of the residual estimator heads relative to fan-in init.
const HEAD_GAIN: f64 = 0.01;

/// The four regularization terms of one level.
#[derive(Clone, Copy)]
pub struct MiTerms<'t, T: Real> {
    pub fs1: Var<'t, T>,
    pub fs2: Var<'t, T>,
    pub ms: Var<'t, T>,
    pub es: Var<'t, T>,
}

#[derive(Clone, Copy)]
pub struct LevelOutput<'t, T: Real> {
    /// `h x w x 2`, in this level's pixels.
    pub flow: Var<'t, T>,
    /// `n x 3` at this level's frame-1 points.
    pub sceneflow: Var<'t, T>,
    pub mi: MiTerms<'t, T>,
}

pub struct ForwardOutput<'t, T: Real> {
    /// Finest first.
    pub levels: Vec<LevelOutput<'t, T>>,
    /// Finest estimate upsampled to input resolution, `H x W x 2`.
    pub flow: Var<'t, T>,
    /// Finest estimate interpolated to every input frame-1 point, `N x 3`.
    pub sceneflow: Var<'t, T>,
}

#[derive(Clone, Debug)]
pub struct Network {
    cfg: ModelConfig,
}

#[derive(Clone, Copy)]
enum Stage {
    Feature,
    Motion,
    Estimation,
}

impl Stage {
    fn tag(self) -> &'static str {
        match self {
            Stage::Feature => "fs",
            Stage::Motion => "ms",
            Stage::Estimation => "es",
        }
    }
}

fn check<T: Real>(v: &Var<'_, T>, level: usize, stage: &str) -> Result<()> {
    if v.value().all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            level,
            stage: stage.to_string(),
        })
    }
}

impl Network {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn c2(&self, l: usize) -> usize {
        self.cfg.channels_2d[l]
    }

    fn c3(&self, l: usize) -> usize {
        self.cfg.channels_3d[l]
    }

    fn corr_channels(&self) -> usize {
        (2 * self.cfg.corr_radius + 1).pow(2)
    }

    fn maf_spec(&self, stage: Stage, branch: Branch, l: usize) -> MafSpec {
        let (c2, c3) = (self.c2(l), self.c3(l));
        let (prefix, c, aux) = match (stage, branch) {
            (Stage::Feature, Branch::Planar) => ("maf2d", c2, vec![c3]),
            (Stage::Feature, Branch::Points) => ("maf3d", c3, vec![c2]),
            (_, Branch::Planar) => ("maf2d", c2, vec![c3, c2]),
            (_, Branch::Points) => ("maf3d", c3, vec![c2, c2]),
        };
        let mode = if self.cfg.concat_fusion {
            FusionMode::Concat
        } else {
            FusionMode::Attention
        };
        MafSpec::new(format!("{}.l{l}.{prefix}", stage.tag()), c, aux, branch).with_mode(mode)
    }

    /// MI heads of a stage, in the order image-like, point, event.
    fn heads(&self, stage: Stage, l: usize) -> Vec<HeadSpec> {
        let (c2, c3, d) = (self.c2(l), self.c3(l), self.cfg.latent_dim);
        let p = |n: &str| format!("{}.l{l}.mi.{n}", stage.tag());
        match stage {
            Stage::Feature => vec![HeadSpec::new(p("r"), c2, d), HeadSpec::new(p("pc"), c3, d)],
            _ => vec![
                HeadSpec::new(p("m2"), c2, d),
                HeadSpec::new(p("m3"), c3, d),
                HeadSpec::new(p("ev"), c2, d),
            ],
        }
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let cfg = &self.cfg;
        for l in 0..cfg.levels {
            let (c2, c3) = (self.c2(l), self.c3(l));
            let in_rgb = if l == 0 { 1 } else { self.c2(l - 1) };
            let in_ev = if l == 0 { cfg.event_bins } else { self.c2(l - 1) };
            let in_pc = if l == 0 { 3 } else { self.c3(l - 1) } + 3;
            for (enc, cin) in [("rgb", in_rgb), ("ev", in_ev)] {
                s.init_fan_in(&format!("enc.{enc}.l{l}.c1"), &[3, 3, cin, c2], 9 * cin, &mut rng);
                s.init_fan_in(&format!("enc.{enc}.l{l}.c2"), &[3, 3, c2, c2], 9 * c2, &mut rng);
            }
            s.init_fan_in(&format!("enc.pc.l{l}.w1"), &[in_pc, c3], in_pc, &mut rng);
            s.init_fan_in(&format!("enc.pc.l{l}.w2"), &[c3, c3], c3, &mut rng);

            for stage in [Stage::Feature, Stage::Motion, Stage::Estimation] {
                self.maf_spec(stage, Branch::Planar, l).init(&mut s, &mut rng);
                self.maf_spec(stage, Branch::Points, l).init(&mut s, &mut rng);
                for h in self.heads(stage, l) {
                    h.init(&mut s, &mut rng);
                }
            }

            let cv_in = 3 * c3 + 3;
            s.init_fan_in(&format!("cv3d.l{l}.w"), &[cv_in, c3], cv_in, &mut rng);
            let m2_in = self.corr_channels() + c2 + 2;
            s.init_fan_in(&format!("motion.l{l}.w2d"), &[3, 3, m2_in, c2], 9 * m2_in, &mut rng);
            let m3_in = 2 * c3 + 3;
            s.init_fan_in(&format!("motion.l{l}.w3d"), &[m3_in, c3], m3_in, &mut rng);
            for k in 1..=3 {
                s.init_fan_in(&format!("dec.l{l}.c{k}"), &[3, 3, c2, c2], 9 * c2, &mut rng);
                s.init_fan_in(&format!("dec.l{l}.m{k}"), &[c3, c3], c3, &mut rng);
            }
            let std2 = HEAD_GAIN * (2.0 / (9 * c2) as f64).sqrt();
            s.init_normal(&format!("head.l{l}.flow"), &[3, 3, c2, 2], std2, &mut rng);
            let std3 = HEAD_GAIN * (2.0 / c3 as f64).sqrt();
            s.init_normal(&format!("head.l{l}.sf"), &[c3, 3], std3, &mut rng);
        }
        s
    }

    fn encode_grid<'t, T: Real>(&self, b: &Bound<'t, T>, name: &str, input: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let mut x = input;
        let mut out = Vec::with_capacity(self.cfg.levels);
        for l in 0..self.cfg.levels {
            x = x.conv2d(b.param(&format!("enc.{name}.l{l}.c1"))?, 2, 1)?.leaky_relu()?;
            x = x.conv2d(b.param(&format!("enc.{name}.l{l}.c2"))?, 1, 1)?.leaky_relu()?;
            check(&x, l, "encode")?;
            out.push(x);
        }
        Ok(out)
    }

    fn encode_points<'t, T: Real>(
        &self,
        b: &Bound<'t, T>,
        inputs: &ModelInputs<T>,
        geom: &SampleGeometry<T>,
        frame: usize,
    ) -> Result<Vec<Var<'t, T>>> {
        let mut x = b.constant(inputs.points[frame].positions().clone());
        let mut out = Vec::with_capacity(self.cfg.levels);
        for (l, lg) in geom.levels.iter().enumerate() {
            let (n, k, c) = (lg.points[frame].len(), lg.group_k[frame], self.c3(l));
            let grouped = concat(&[x.sparse_rows(&lg.group[frame])?, b.constant(lg.rel[frame].clone())], 1)?;
            x = grouped
                .matmul(b.param(&format!("enc.pc.l{l}.w1"))?)?
                .leaky_relu()?
                .reshape(&[n, k, c])?
                .max_axis(1)?
                .matmul(b.param(&format!("enc.pc.l{l}.w2"))?)?
                .leaky_relu()?;
            check(&x, l, "encode")?;
            out.push(x);
        }
        Ok(out)
    }

    /// Per-neighbour matching features between frame-1 points and frame-2
    /// points around `pc1 + s`, max-pooled over the neighbourhood.
    fn cost_volume_3d<'t, T: Real>(
        &self,
        b: &Bound<'t, T>,
        l: usize,
        lg: &LevelGeometry<T>,
        feat1: Var<'t, T>,
        feat2: Var<'t, T>,
        s: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let (p1, p2) = (&lg.points[0], &lg.points[1]);
        let n = p1.len();
        let query = p1.displaced(&s.value())?;
        let (gather, rel, k) = grouping(p2, &query, self.cfg.knn);
        let repeat = Rc::new(repeat_rows(n, k));
        // offsets p2_j - p1_i - s_i, differentiable in s
        let s_rep = s.sparse_rows(&repeat)?;
        let sv = s_rep.value();
        let base = Tensor::from_fn(rel.shape(), |i| rel.data()[i] + sv.data()[i]);
        let offsets = b.constant(base).sub(s_rep)?;
        let warped = warp3d(feat2, p2, p1, s, INTERP_K)?;
        let parts = [
            feat1.sparse_rows(&repeat)?,
            warped.sparse_rows(&repeat)?,
            feat2.sparse_rows(&Rc::new(gather))?,
            offsets,
        ];
        concat(&parts, 1)?
            .matmul(b.param(&format!("cv3d.l{l}.w"))?)?
            .leaky_relu()?
            .reshape(&[n, k, self.c3(l)])?
            .max_axis(1)
    }

    pub fn forward<'t, T: Real>(
        &self,
        b: &Bound<'t, T>,
        inputs: &ModelInputs<T>,
        geom: &SampleGeometry<T>,
    ) -> Result<ForwardOutput<'t, T>> {
        inputs.validate(&self.cfg)?;
        let cfg = &self.cfg;
        if geom.levels.len() != cfg.levels {
            return Err(Error::Contract(format!(
                "sample geometry has {} levels, model has {}",
                geom.levels.len(),
                cfg.levels
            )));
        }
        let (h, w) = (geom.height, geom.width);
        let half = T::lit(0.5);
        let rgb_in = |k: usize| -> Result<Var<'t, T>> {
            Ok(b.constant(inputs.rgb[k].map(|v| v - half).reshape(&[h, w, 1])?))
        };
        let r1 = self.encode_grid(b, "rgb", rgb_in(0)?)?;
        let r2 = self.encode_grid(b, "rgb", rgb_in(1)?)?;
        let ev = self.encode_grid(b, "ev", b.constant(inputs.voxels.clone()))?;
        let pc1 = self.encode_points(b, inputs, geom, 0)?;
        let pc2 = self.encode_points(b, inputs, geom, 1)?;

        let mut outs: Vec<LevelOutput<'t, T>> = Vec::with_capacity(cfg.levels);
        let mut f_prior: Option<Var<'t, T>> = None;
        let mut s_prior: Option<Var<'t, T>> = None;
        for l in (0..cfg.levels).rev() {
            let lg = &geom.levels[l];
            let (lh, lw, n1) = (lg.height, lg.width, lg.points[0].len());
            let sample: [Rc<_>; 2] = [
                Rc::new(bilinear_matrix(&lg.coords[0], lh, lw)),
                Rc::new(bilinear_matrix(&lg.coords[1], lh, lw)),
            ];

            // feature stage: image and points of each frame, no events
            let fs2 = self.maf_spec(Stage::Feature, Branch::Planar, l);
            let fs3 = self.maf_spec(Stage::Feature, Branch::Points, l);
            let fs_heads = self.heads(Stage::Feature, l);
            let mut fused_r = Vec::with_capacity(2);
            let mut fused_pc = Vec::with_capacity(2);
            let mut fs_mi = Vec::with_capacity(2);
            for (k, (r, pc)) in [(r1[l], pc1[l]), (r2[l], pc2[l])].into_iter().enumerate() {
                let coords = &lg.coords[k];
                let rf = maf_2d(b, &fs2, r, &[PlanarAux::Points { features: pc, coords }])?.output;
                let pf = maf_3d_at(b, &fs3, pc, coords, &[r])?.output;
                let mi = mi_pair(b, (r.sparse_rows(&sample[k])?, &fs_heads[0]), (pc, &fs_heads[1]))?;
                check(&rf, l, "feature fusion")?;
                check(&pf, l, "feature fusion")?;
                fused_r.push(rf);
                fused_pc.push(pf);
                fs_mi.push(mi);
            }

            // cost volumes against the warped second frame
            let f = f_prior.unwrap_or_else(|| b.constant(Tensor::zeros(&[lh, lw, 2])));
            let s = s_prior.unwrap_or_else(|| b.constant(Tensor::zeros(&[n1, 3])));
            let corr = fused_r[0].correlation(warp2d(fused_r[1], f)?, cfg.corr_radius)?;
            let cost3 = self.cost_volume_3d(b, l, lg, fused_pc[0], fused_pc[1], s)?;
            check(&corr, l, "cost volume")?;
            check(&cost3, l, "cost volume")?;
            let m2 = concat(&[corr, fused_r[0], f], 2)?
                .conv2d(b.param(&format!("motion.l{l}.w2d"))?, 1, 1)?
                .leaky_relu()?;
            let m3 = concat(&[cost3, fused_pc[0], s], 1)?
                .matmul(b.param(&format!("motion.l{l}.w3d"))?)?
                .leaky_relu()?;

            // motion stage: both motion branches with the event feature
            let e = ev[l];
            let coords1 = &lg.coords[0];
            let (m2f, m3f, ms) = self.three_way(b, Stage::Motion, l, m2, m3, e, coords1, &sample[0])?;

            // decoders
            let mut d2 = m2f;
            let mut d3 = m3f;
            for k in 1..=3 {
                d2 = d2.conv2d(b.param(&format!("dec.l{l}.c{k}"))?, 1, 1)?.leaky_relu()?;
                d3 = d3.matmul(b.param(&format!("dec.l{l}.m{k}"))?)?.leaky_relu()?;
            }
            check(&d2, l, "decode")?;
            check(&d3, l, "decode")?;
            let (d2f, d3f, es) = self.three_way(b, Stage::Estimation, l, d2, d3, e, coords1, &sample[0])?;

            let flow = f.add(d2f.conv2d(b.param(&format!("head.l{l}.flow"))?, 1, 1)?)?;
            let sceneflow = s.add(d3f.matmul(b.param(&format!("head.l{l}.sf"))?)?)?;
            check(&flow, l, "estimate")?;
            check(&sceneflow, l, "estimate")?;
            outs.push(LevelOutput {
                flow,
                sceneflow,
                mi: MiTerms {
                    fs1: fs_mi[0],
                    fs2: fs_mi[1],
                    ms,
                    es,
                },
            });
            if l > 0 {
                let fine = &geom.levels[l - 1];
                f_prior = Some(
                    flow.sparse_rows(&geom.up2d[l - 1])?
                        .reshape(&[fine.height, fine.width, 2])?
                        .scale(T::lit(2.0)),
                );
                s_prior = Some(sceneflow.sparse_rows(&geom.up3d[l - 1])?);
            }
        }
        outs.reverse();
        let flow = outs[0].flow.sparse_rows(&geom.full2d)?.reshape(&[h, w, 2])?.scale(T::lit(2.0));
        let sceneflow = outs[0].sceneflow.sparse_rows(&geom.full3d)?;
        Ok(ForwardOutput {
            levels: outs,
            flow,
            sceneflow,
        })
    }

    /// Motion or estimation stage fusion: each branch is the primary of its
    /// own module with the other branch and the event feature as
    /// auxiliaries; the three-way bound is taken on frame-1 points.
    #[allow(clippy::too_many_arguments)]
    fn three_way<'t, T: Real>(
        &self,
        b: &Bound<'t, T>,
        stage: Stage,
        l: usize,
        grid: Var<'t, T>,
        points: Var<'t, T>,
        events: Var<'t, T>,
        coords: &Tensor<T>,
        sample: &Rc<crate::tensor::SparseRows<T>>,
    ) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
        let s2 = self.maf_spec(stage, Branch::Planar, l);
        let s3 = self.maf_spec(stage, Branch::Points, l);
        let g = maf_2d(
            b,
            &s2,
            grid,
            &[PlanarAux::Points { features: points, coords }, PlanarAux::Grid(events)],
        )?
        .output;
        let p = maf_3d_at(b, &s3, points, coords, &[grid, events])?.output;
        let heads = self.heads(stage, l);
        let ii = mi_triple(
            b,
            [
                (grid.sparse_rows(sample)?, &heads[0]),
                (points, &heads[1]),
                (events.sparse_rows(sample)?, &heads[2]),
            ],
        )?
        .total;
        let name = match stage {
            Stage::Motion => "motion fusion",
            _ => "estimation fusion",
        };
        check(&g, l, name)?;
        check(&p, l, name)?;
        Ok((g, p, ii))
    }
}
