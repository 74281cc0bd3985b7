//! Central-difference gradient checks over every differentiable operation
//! and one full forward pass of a tiny network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpeflow::fusion::{cross_attention, maf_2d, maf_3d, Branch, FusionMode, MafSpec, PlanarAux};
use rpeflow::geometry::{project, project_var, scatter_interpolate, warp2d, warp3d, CameraIntrinsics, PointSet};
use rpeflow::mireg::{encode_latent, kl_gaussians, mi_pair, mi_triple, HeadSpec};
use rpeflow::model::{ModelConfig, ModelInputs, Network, SampleGeometry};
use rpeflow::objectives::{feature_loss, pyramid_targets, task_loss, total_loss, LevelMi, LossWeights};
use rpeflow::tensor::{concat, gradcheck_params, sample_entries, sparse_from_rows, Bound, GradcheckReport, ParamStore, Tape, Tensor, Var};
use rpeflow::Result;

pub const STEP: f64 = 1e-6;
/// Parameter entries sampled for the full-network check.
pub const NETWORK_ENTRIES: usize = 50;

#[derive(Clone, Debug, serde::Serialize)]
pub struct Suite {
    pub name: &'static str,
    pub reports: Vec<GradcheckReport>,
}

impl Suite {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(|r| r.passed())
    }

    pub fn max_rel_err(&self) -> f64 {
        self.reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }
}

struct Ctx {
    rng: ChaCha8Rng,
    tol: f64,
}

impl Ctx {
    fn tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| self.rng.gen_range(lo..hi))
    }

    /// Checks every entry of `inputs` for the scalar `sum(f(..) * probe)`.
    fn check<F>(&mut self, name: &str, inputs: Vec<(&str, Tensor<f64>)>, f: F) -> Result<GradcheckReport>
    where
        F: for<'t> Fn(&Bound<'t, f64>) -> Result<Var<'t, f64>>,
    {
        let mut store = ParamStore::new();
        for (n, t) in inputs {
            store.insert(n, t);
        }
        let shape = {
            let tape = Tape::new();
            let b = Bound::new(&tape, &store);
            f(&b)?.shape()
        };
        let probe = self.tensor(&shape, -1.0, 1.0);
        let entries: Vec<(String, usize)> = store
            .iter()
            .flat_map(|(n, t)| (0..t.numel()).map(move |i| (n.clone(), i)))
            .collect();
        gradcheck_params(
            name,
            |b| Ok(f(b)?.mul(b.constant(probe.clone()))?.sum()),
            &store,
            &entries,
            STEP,
            self.tol,
        )
    }
}

fn tensor_suite(c: &mut Ctx) -> Result<Vec<GradcheckReport>> {
    let mut out = Vec::new();
    let (a, b) = (c.tensor(&[3, 4], -1.0, 1.0), c.tensor(&[1, 4], -1.0, 1.0));
    let pos = c.tensor(&[3, 4], 0.5, 2.0);
    out.push(c.check("add", vec![("a", a.clone()), ("b", b.clone())], |s| s.param("a")?.add(s.param("b")?))?);
    out.push(c.check("sub", vec![("a", a.clone()), ("b", b.clone())], |s| s.param("a")?.sub(s.param("b")?))?);
    out.push(c.check("mul", vec![("a", a.clone()), ("b", b.clone())], |s| s.param("a")?.mul(s.param("b")?))?);
    out.push(c.check("div", vec![("a", a.clone()), ("p", pos.clone())], |s| s.param("a")?.div(s.param("p")?))?);
    out.push(c.check("exp", vec![("a", a.clone())], |s| s.param("a")?.exp())?);
    out.push(c.check("expm1", vec![("a", a.clone())], |s| s.param("a")?.expm1())?);
    out.push(c.check("ln", vec![("p", pos.clone())], |s| s.param("p")?.ln())?);
    out.push(c.check("sqrt", vec![("p", pos.clone())], |s| s.param("p")?.sqrt())?);
    out.push(c.check("neg", vec![("a", a.clone())], |s| s.param("a")?.neg())?);
    out.push(c.check("square", vec![("a", a.clone())], |s| s.param("a")?.square())?);
    out.push(c.check("relu", vec![("a", a.clone())], |s| s.param("a")?.relu())?);
    out.push(c.check("leaky_relu", vec![("a", a.clone())], |s| s.param("a")?.leaky_relu())?);
    out.push(c.check("scale_offset_clamp", vec![("a", a.clone())], |s| {
        Ok(s.param("a")?.scale(1.7).offset(0.2).clamp(-5.0, 5.0))
    })?);
    let m = c.tensor(&[4, 5], -1.0, 1.0);
    out.push(c.check("matmul", vec![("a", a.clone()), ("m", m)], |s| s.param("a")?.matmul(s.param("m")?))?);
    out.push(c.check("transpose_reshape", vec![("a", a.clone())], |s| s.param("a")?.t()?.reshape(&[2, 6]))?);
    out.push(c.check("softmax0", vec![("a", a.clone())], |s| s.param("a")?.softmax(0))?);
    out.push(c.check("softmax1", vec![("a", a.clone())], |s| s.param("a")?.softmax(1))?);
    out.push(c.check("normalize", vec![("a", a.clone())], |s| s.param("a")?.normalize(1))?);
    let (g, be) = (c.tensor(&[4], 0.5, 1.5), c.tensor(&[4], -0.5, 0.5));
    out.push(c.check("layernorm", vec![("a", a.clone()), ("g", g), ("b", be)], |s| {
        s.param("a")?.layernorm(1, s.param("g")?, s.param("b")?)
    })?);
    let img = c.tensor(&[5, 4, 2], -1.0, 1.0);
    let w = c.tensor(&[3, 3, 2, 3], -0.5, 0.5);
    out.push(c.check("conv2d", vec![("x", img.clone()), ("w", w.clone())], |s| s.param("x")?.conv2d(s.param("w")?, 1, 1))?);
    out.push(c.check("conv2d_stride2", vec![("x", img.clone()), ("w", w)], |s| s.param("x")?.conv2d(s.param("w")?, 2, 1))?);
    let dw = c.tensor(&[3, 3, 2], -0.5, 0.5);
    out.push(c.check("depthwise_conv2d", vec![("x", img.clone()), ("w", dw)], |s| {
        s.param("x")?.depthwise_conv2d(s.param("w")?, 1, 1)
    })?);
    out.push(c.check("sum_mean", vec![("a", a.clone())], |s| {
        let x = s.param("a")?;
        x.sum().add(x.mean())
    })?);
    out.push(c.check("sum_axis", vec![("a", a.clone())], |s| s.param("a")?.sum_axis(0))?);
    out.push(c.check("max_axis", vec![("a", a.clone())], |s| s.param("a")?.max_axis(1))?);
    out.push(c.check("narrow_concat", vec![("a", a.clone()), ("b", b.clone())], |s| {
        let x = s.param("a")?;
        concat(&[x.narrow(1, 1, 2)?, s.param("b")?.narrow(1, 0, 2)?], 0)
    })?);
    let map = std::rc::Rc::new(sparse_from_rows(3, &[vec![(0, 0.5), (2, -1.0)], vec![], vec![(1, 2.0)], vec![(1, 1.0), (0, 0.25)]]));
    out.push(c.check("sparse_rows", vec![("a", a.clone())], move |s| s.param("a")?.sparse_rows(&map))?);
    let coords = c.tensor(&[6, 2], 0.1, 2.9);
    out.push(c.check("bilinear_sample", vec![("x", img.clone()), ("c", coords)], |s| {
        s.param("x")?.bilinear_sample(s.param("c")?)
    })?);
    let img2 = c.tensor(&[5, 4, 2], -1.0, 1.0);
    out.push(c.check("correlation", vec![("x", img), ("y", img2)], |s| {
        s.param("x")?.correlation(s.param("y")?, 1)
    })?);
    out.push(c.check("row_norm", vec![("a", a)], |s| s.param("a")?.row_norm())?);
    Ok(out)
}

fn geometry_suite(c: &mut Ctx) -> Result<Vec<GradcheckReport>> {
    let mut out = Vec::new();
    let cam = CameraIntrinsics::centered(6.0, 6, 5)?;
    let mut pts = c.tensor(&[5, 3], -0.5, 0.5);
    for i in 0..5 {
        pts.data_mut()[3 * i + 2] += 2.5;
    }
    let cam2 = cam.clone();
    out.push(c.check("project", vec![("p", pts.clone())], move |s| project_var(s.param("p")?, &cam2))?);
    let feat = c.tensor(&[5, 6, 2], -1.0, 1.0);
    let flow = c.tensor(&[5, 6, 2], -1.3, 1.3);
    out.push(c.check("warp2d", vec![("f", feat.clone()), ("u", flow)], |s| warp2d(s.param("f")?, s.param("u")?))?);
    let pc1 = PointSet::new(pts.clone())?;
    let pc2 = PointSet::new(c.tensor(&[7, 3], 0.0, 3.0))?;
    let f2 = c.tensor(&[7, 3], -1.0, 1.0);
    let sf = c.tensor(&[5, 3], -0.3, 0.3);
    out.push(c.check("warp3d", vec![("f", f2), ("s", sf)], |s| {
        warp3d(s.param("f")?, &pc2, &pc1, s.param("s")?, 3)
    })?);
    let coords = project(&pc1, &cam)?;
    let pf = c.tensor(&[5, 2], -1.0, 1.0);
    let mix = c.tensor(&[2, 3], -1.0, 1.0);
    out.push(c.check("scatter_interpolate", vec![("f", pf), ("m", mix)], |s| {
        scatter_interpolate(s.param("f")?, &coords, 5, 6, s.param("m")?)
    })?);
    Ok(out)
}

/// Fills a parameter store by `init`, then shifts every value so nothing
/// sits at a symmetric initial point.
fn perturbed(c: &mut Ctx, init: impl FnOnce(&mut ParamStore<f64>, &mut ChaCha8Rng)) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    init(&mut s, &mut c.rng);
    for (_, t) in s.iter_mut() {
        for v in t.data_mut() {
            *v += c.rng.gen_range(-0.3..0.3);
        }
    }
    s
}

fn check_store<F>(c: &mut Ctx, name: &str, store: &ParamStore<f64>, out_shape: &[usize], f: F) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&Bound<'t, f64>) -> Result<Var<'t, f64>>,
{
    let probe = c.tensor(out_shape, -1.0, 1.0);
    let entries: Vec<(String, usize)> = store
        .iter()
        .flat_map(|(n, t)| (0..t.numel()).map(move |i| (n.clone(), i)))
        .collect();
    gradcheck_params(name, |b| Ok(f(b)?.mul(b.constant(probe.clone()))?.sum()), store, &entries, STEP, c.tol)
}

fn fusion_suite(c: &mut Ctx) -> Result<Vec<GradcheckReport>> {
    let mut out = Vec::new();
    let planar = MafSpec::new("p", 3, vec![2, 3], Branch::Planar);
    let mut s = perturbed(c, |s, r| planar.init(s, r));
    s.insert("x", c.tensor(&[4, 3, 3], -1.0, 1.0));
    s.insert("g", c.tensor(&[4, 3, 3], -1.0, 1.0));
    s.insert("pf", c.tensor(&[5, 2], -1.0, 1.0));
    let coords = c.tensor(&[5, 2], 0.0, 2.0);
    out.push(check_store(c, "maf_2d", &s, &[4, 3, 3], |b| {
        let aux = [
            PlanarAux::Points { features: b.param("pf")?, coords: &coords },
            PlanarAux::Grid(b.param("g")?),
        ];
        Ok(maf_2d(b, &planar, b.param("x")?, &aux)?.output)
    })?);

    let points = MafSpec::new("q", 3, vec![2], Branch::Points);
    let mut s = perturbed(c, |s, r| points.init(s, r));
    s.insert("x", c.tensor(&[5, 3], -1.0, 1.0));
    s.insert("g", c.tensor(&[4, 3, 2], -1.0, 1.0));
    let cam = CameraIntrinsics::centered(3.0, 3, 4)?;
    let mut pts = c.tensor(&[5, 3], -0.4, 0.4);
    for i in 0..5 {
        pts.data_mut()[3 * i + 2] += 2.0;
    }
    let pc = PointSet::new(pts)?;
    out.push(check_store(c, "maf_3d", &s, &[5, 3], |b| {
        Ok(maf_3d(b, &points, b.param("x")?, &pc, &cam, &[b.param("g")?])?.output)
    })?);

    let concat_spec = MafSpec::new("k", 3, vec![2], Branch::Points).with_mode(FusionMode::Concat);
    let mut s = perturbed(c, |s, r| concat_spec.init(s, r));
    s.insert("x", c.tensor(&[5, 3], -1.0, 1.0));
    s.insert("g", c.tensor(&[4, 3, 2], -1.0, 1.0));
    out.push(check_store(c, "concat_fusion", &s, &[5, 3], |b| {
        Ok(maf_3d(b, &concat_spec, b.param("x")?, &pc, &cam, &[b.param("g")?])?.output)
    })?);

    let attn = MafSpec::new("a", 3, vec![3], Branch::Points);
    let mut s = perturbed(c, |s, r| attn.init(s, r));
    s.insert("x", c.tensor(&[5, 3], -1.0, 1.0));
    s.insert("y", c.tensor(&[5, 3], -1.0, 1.0));
    out.push(check_store(c, "cross_attention", &s, &[5, 3], |b| {
        Ok(cross_attention(b, &attn, b.param("x")?, b.param("y")?)?.output)
    })?);
    Ok(out)
}

fn mireg_suite(c: &mut Ctx) -> Result<Vec<GradcheckReport>> {
    let mut out = Vec::new();
    let heads = [HeadSpec::new("a", 3, 2), HeadSpec::new("b", 4, 2), HeadSpec::new("c", 2, 2)];
    let mut s = perturbed(c, |s, r| {
        for h in &heads {
            h.init(s, r);
        }
    });
    s.insert("fa", c.tensor(&[4, 3], -1.0, 1.0));
    s.insert("fb", c.tensor(&[4, 4], -1.0, 1.0));
    s.insert("fc", c.tensor(&[4, 2], -1.0, 1.0));
    out.push(check_store(c, "kl_gaussians", &s, &[1], |b| {
        let la = encode_latent(b, &heads[0], b.param("fa")?)?;
        let lb = encode_latent(b, &heads[1], b.param("fb")?)?;
        kl_gaussians(&la, &lb)?.reshape(&[1])
    })?);
    out.push(check_store(c, "mi_pair", &s, &[1], |b| {
        mi_pair(b, (b.param("fa")?, &heads[0]), (b.param("fb")?, &heads[1]))?.reshape(&[1])
    })?);
    out.push(check_store(c, "mi_triple", &s, &[1], |b| {
        mi_triple(
            b,
            [
                (b.param("fa")?, &heads[0]),
                (b.param("fb")?, &heads[1]),
                (b.param("fc")?, &heads[2]),
            ],
        )?
        .total
        .reshape(&[1])
    })?);
    Ok(out)
}

/// The tiny configuration used for the whole-network check.
pub fn network_config() -> ModelConfig {
    ModelConfig {
        levels: 2,
        channels_2d: vec![4, 6],
        channels_3d: vec![4, 6],
        corr_radius: 1,
        knn: 4,
        latent_dim: 3,
        event_bins: 3,
        ..ModelConfig::tiny()
    }
}

fn network_suite(c: &mut Ctx) -> Result<Vec<GradcheckReport>> {
    let cfg = network_config();
    let net = Network::new(cfg.clone())?;
    let store = net.init_params::<f64>(c.rng.gen());
    let (h, w, n) = (8, 8, 32);
    let cam = CameraIntrinsics::centered(8.0, w, h)?;
    let mut cloud = |shift: f64| -> Result<PointSet<f64>> {
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                let z: f64 = c.rng.gen_range(2.0..4.0);
                [c.rng.gen_range(-0.45..0.45) * z + shift, c.rng.gen_range(-0.45..0.45) * z, z]
            })
            .collect();
        PointSet::from_points(&pts)
    };
    let points = [cloud(0.0)?, cloud(0.05)?];
    let inputs = ModelInputs {
        rgb: [c.tensor(&[h, w], 0.0, 1.0), c.tensor(&[h, w], 0.0, 1.0)],
        points,
        voxels: c.tensor(&[h, w, cfg.event_bins], -1.0, 1.0),
        cam,
    };
    let geom = SampleGeometry::new(&inputs, &cfg)?;
    let flow = c.tensor(&[h, w, 2], -2.0, 2.0);
    let sf = c.tensor(&[n, 3], -0.2, 0.2);
    let targets = pyramid_targets(&flow, &vec![true; h * w], &sf, &geom)?;
    let weights = LossWeights::default();
    let entries = sample_entries(&store, NETWORK_ENTRIES, &mut c.rng);
    let report = gradcheck_params(
        "tiny network",
        |b| {
            let out = net.forward(b, &inputs, &geom)?;
            let task = task_loss(&out.levels, &targets, &weights)?;
            let mi: Vec<LevelMi<f64>> = out.levels.iter().map(|l| l.mi.into()).collect();
            total_loss(task, feature_loss(&mi)?, weights.beta)
        },
        &store,
        &entries,
        STEP,
        c.tol,
    )?;
    Ok(vec![report])
}

/// Runs all suites in a fixed order.
pub fn run_all(seed: u64, tol: f64) -> Result<Vec<Suite>> {
    let mut c = Ctx {
        rng: ChaCha8Rng::seed_from_u64(seed),
        tol,
    };
    Ok(vec![
        Suite { name: "tensor-core", reports: tensor_suite(&mut c)? },
        Suite { name: "geometry", reports: geometry_suite(&mut c)? },
        Suite { name: "fusion", reports: fusion_suite(&mut c)? },
        Suite { name: "mireg", reports: mireg_suite(&mut c)? },
        Suite { name: "network", reports: network_suite(&mut c)? },
    ])
}
