//! Procedural toy scenes: textured rigid objects in front of a static
//! background plane, ray cast at sub-frame steps, with analytic optical
//! flow, scene flow, occlusion masks and simulated events.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{simulate_events, EventStream, SimulatorConfig};
use crate::geometry::CameraIntrinsics;
use crate::tensor::Tensor;

/// Maximum pose draws per object before giving up.
pub const MAX_ATTEMPTS: usize = 10;
const NEAR: f64 = 0.5;
/// Relative depth tolerance when deciding whether a surface is still visible.
const OCCLUSION_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speed {
    Slow,
    Fast,
}

impl Speed {
    /// Multiplier applied to the drawn motion magnitudes.
    pub fn scale(self) -> f64 {
        match self {
            Speed::Slow => 0.4,
            Speed::Fast => 1.0,
        }
    }
}

/// Knobs for random scene drawing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels.
    pub focal: f64,
    pub num_points: usize,
    pub substeps: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Maximum rotation over the interval, degrees.
    pub max_rotation_deg: f64,
    /// Maximum translation as a fraction of the object's depth.
    pub max_translation: f64,
    /// Frame interval in seconds.
    pub interval: f64,
    /// Range of sphere radii and patch half-extents, scene units.
    pub object_size: [f64; 2],
    /// Texture wavelength range on object surfaces, scene units.
    pub object_wavelength: [f64; 2],
    /// Texture wavelength range on the background plane, scene units.
    pub background_wavelength: [f64; 2],
    pub simulator: SimulatorConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            focal: 32.0,
            num_points: 256,
            substeps: 16,
            min_objects: 1,
            max_objects: 5,
            max_rotation_deg: 15.0,
            max_translation: 0.2,
            interval: 0.05,
            object_size: [0.6, 1.3],
            object_wavelength: [0.3, 0.7],
            background_wavelength: [0.8, 1.6],
            simulator: SimulatorConfig::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.width < 2 || self.height < 2 || self.width > u16::MAX as usize || self.height > u16::MAX as usize {
            return bad("image extents must be in [2, 65535]");
        }
        if self.num_points == 0 || self.num_points > self.width * self.height {
            return bad("num_points must be in [1, width * height]");
        }
        if self.substeps == 0 {
            return bad("substeps must be positive");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > 5 {
            return bad("object count range must lie in [1, 5]");
        }
        if !(self.focal > 0.0) || !(self.interval > 0.0) {
            return bad("focal length and interval must be positive");
        }
        for [lo, hi] in [self.object_size, self.object_wavelength, self.background_wavelength] {
            if !(lo > 0.0 && lo < hi && hi.is_finite()) {
                return bad("object size and texture wavelength ranges must satisfy 0 < lo < hi");
            }
        }
        Ok(())
    }

    pub fn camera(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::centered(self.focal, self.width, self.height)
    }
}

/// Sum of sinusoids over surface coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub base: f64,
    /// `(kx, ky, kz, phase, amplitude)`.
    pub waves: Vec<[f64; 5]>,
}

impl Texture {
    pub fn flat(value: f64) -> Self {
        Self {
            base: value,
            waves: Vec::new(),
        }
    }

    pub fn random(rng: &mut impl Rng, wavelength: (f64, f64)) -> Self {
        let base = rng.gen_range(0.3..0.7);
        let waves = (0..3)
            .map(|_| {
                let lambda = rng.gen_range(wavelength.0..wavelength.1);
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                let k = std::f64::consts::TAU / lambda;
                let kz = rng.gen_range(-0.5..0.5) * k;
                [k * theta.cos(), k * theta.sin(), kz, rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.08..0.16)]
            })
            .collect();
        Self { base, waves }
    }

    pub fn eval(&self, q: [f64; 3]) -> f64 {
        let v = self.base
            + self
                .waves
                .iter()
                .map(|w| w[4] * (w[0] * q[0] + w[1] * q[1] + w[2] * q[2] + w[3]).sin())
                .sum::<f64>();
        v.clamp(0.02, 0.98)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    /// Rectangle in the local xy-plane.
    Patch { half_w: f64, half_h: f64 },
    Sphere { radius: f64 },
}

impl Shape {
    fn extent(&self) -> f64 {
        match *self {
            Shape::Patch { half_w, half_h } => half_w.hypot(half_h),
            Shape::Sphere { radius } => radius,
        }
    }
}

/// Rotation of `angle` radians about unit `axis` plus a translation, both
/// applied linearly in time over the frame interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidMotion {
    pub axis: [f64; 3],
    pub angle: f64,
    pub translation: [f64; 3],
}

impl RigidMotion {
    pub fn identity() -> Self {
        Self {
            axis: [0.0, 0.0, 1.0],
            angle: 0.0,
            translation: [0.0; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub center: [f64; 3],
    /// Initial local-to-camera rotation, row-major.
    pub orientation: [[f64; 3]; 3],
    pub texture: Texture,
    pub motion: RigidMotion,
}

/// Everything needed to render one sample deterministically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub speed: Speed,
    pub cam: CameraIntrinsics,
    pub substeps: usize,
    pub num_points: usize,
    pub interval: f64,
    pub background_depth: f64,
    pub background: Texture,
    pub objects: Vec<ObjectSpec>,
    pub simulator: SimulatorConfig,
}

type Mat3 = [[f64; 3]; 3];

fn rotation(axis: [f64; 3], angle: f64) -> Mat3 {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = if n > 0.0 { axis.map(|a| a / n) } else { [0.0, 0.0, 1.0] };
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

fn apply(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn apply_t(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[0][i] * v[0] + m[1][i] * v[1] + m[2][i] * v[2])
}

fn unit_vector(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [0; 3].map(|_| rng.gen_range(-1.0..1.0));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            return v.map(|a| a / n);
        }
    }
}

impl ObjectSpec {
    /// Pose at normalized time `tau` in `[0, 1]`.
    fn pose(&self, tau: f64) -> (Mat3, [f64; 3]) {
        let r = matmul(&rotation(self.motion.axis, self.motion.angle * tau), &self.orientation);
        let c = [0, 1, 2].map(|i| self.center[i] + self.motion.translation[i] * tau);
        (r, c)
    }

    fn to_world(&self, tau: f64, q: [f64; 3]) -> [f64; 3] {
        let (r, c) = self.pose(tau);
        let p = apply(&r, q);
        [p[0] + c[0], p[1] + c[1], p[2] + c[2]]
    }

    /// Nearest hit of the camera ray `t * d` (t > 0) as `(t, local point)`.
    fn intersect(&self, tau: f64, d: [f64; 3]) -> Option<(f64, [f64; 3])> {
        let (r, c) = self.pose(tau);
        let o = apply_t(&r, [-c[0], -c[1], -c[2]]);
        let dl = apply_t(&r, d);
        let at = |t: f64| [o[0] + t * dl[0], o[1] + t * dl[1], o[2] + t * dl[2]];
        match self.shape {
            Shape::Patch { half_w, half_h } => {
                if dl[2].abs() < 1e-12 {
                    return None;
                }
                let t = -o[2] / dl[2];
                let q = at(t);
                (t > 0.0 && q[0].abs() <= half_w && q[1].abs() <= half_h).then_some((t, [q[0], q[1], 0.0]))
            }
            Shape::Sphere { radius } => {
                let a = dl[0] * dl[0] + dl[1] * dl[1] + dl[2] * dl[2];
                let b = 2.0 * (o[0] * dl[0] + o[1] * dl[1] + o[2] * dl[2]);
                let cc = o[0] * o[0] + o[1] * o[1] + o[2] * o[2] - radius * radius;
                let disc = b * b - 4.0 * a * cc;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)].into_iter().find(|t| *t > 0.0)?;
                Some((t, at(t)))
            }
        }
    }
}

/// Surface seen through one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Hit {
    /// `None` for the background plane.
    object: Option<usize>,
    depth: f64,
    local: [f64; 3],
}

impl SceneSpec {
    fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cam.cx) / self.cam.f, (v - self.cam.cy) / self.cam.f, 1.0]
    }

    fn cast(&self, tau: f64, u: f64, v: f64) -> Hit {
        let d = self.ray(u, v);
        let z = self.background_depth;
        let mut best = Hit {
            object: None,
            depth: z,
            local: [d[0] * z, d[1] * z, 0.0],
        };
        for (i, o) in self.objects.iter().enumerate() {
            if let Some((t, q)) = o.intersect(tau, d) {
                if t < best.depth {
                    best = Hit {
                        object: Some(i),
                        depth: t,
                        local: q,
                    };
                }
            }
        }
        best
    }

    fn shade(&self, hit: &Hit) -> f64 {
        match hit.object {
            Some(i) => self.objects[i].texture.eval(hit.local),
            None => self.background.eval(hit.local),
        }
    }

    /// Camera-frame position at time `tau` of the surface point `hit` (seen at time 0).
    fn moved(&self, hit: &Hit, tau: f64) -> [f64; 3] {
        match hit.object {
            Some(i) => self.objects[i].to_world(tau, hit.local),
            None => [hit.local[0], hit.local[1], self.background_depth],
        }
    }

    /// Intensity image at normalized time `tau`.
    pub fn render(&self, tau: f64) -> Tensor<f64> {
        let (w, h) = (self.cam.width, self.cam.height);
        Tensor::from_fn(&[h, w], |i| self.shade(&self.cast(tau, (i % w) as f64, (i / w) as f64)))
    }

    /// Every object stays in front of the camera, with its centre inside
    /// the image and clear of the background, at every substep.
    fn object_ok(&self, o: &ObjectSpec) -> bool {
        (0..=self.substeps).all(|k| {
            let (_, c) = o.pose(k as f64 / self.substeps as f64);
            let e = o.shape.extent();
            let u = self.cam.f * c[0] / c[2] + self.cam.cx;
            let v = self.cam.f * c[1] / c[2] + self.cam.cy;
            c[2] - e > NEAR
                && c[2] + e < self.background_depth - 0.2
                && (0.0..=(self.cam.width - 1) as f64).contains(&u)
                && (0.0..=(self.cam.height - 1) as f64).contains(&v)
        })
    }

    /// Draws a random scene; motion magnitudes are drawn identically for
    /// both speed classes and then scaled.
    pub fn random(cfg: &SceneConfig, seed: u64, speed: Speed) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cam = cfg.camera()?;
        let background_depth = rng.gen_range(6.0..8.0);
        let background = Texture::random(&mut rng, (cfg.background_wavelength[0], cfg.background_wavelength[1]));
        let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
        let mut spec = Self {
            seed,
            speed,
            cam,
            substeps: cfg.substeps,
            num_points: cfg.num_points,
            interval: cfg.interval,
            background_depth,
            background,
            objects: Vec::with_capacity(count),
            simulator: cfg.simulator.clone(),
        };
        let half_fov_x = 0.5 * (cfg.width as f64 - 1.0) / cfg.focal;
        let half_fov_y = 0.5 * (cfg.height as f64 - 1.0) / cfg.focal;
        let size = cfg.object_size[0]..cfg.object_size[1];
        for idx in 0..count {
            let sphere = rng.gen_bool(0.5);
            let shape = if sphere {
                Shape::Sphere {
                    radius: rng.gen_range(size.clone()),
                }
            } else {
                Shape::Patch {
                    half_w: rng.gen_range(size.clone()),
                    half_h: rng.gen_range(size.clone()),
                }
            };
            let tilt = rotation(unit_vector(&mut rng), rng.gen_range(0.0..40f64.to_radians()));
            let texture = Texture::random(&mut rng, (cfg.object_wavelength[0], cfg.object_wavelength[1]));
            let mut placed = None;
            for _ in 0..MAX_ATTEMPTS {
                let z = rng.gen_range(2.5..4.0);
                let center = [
                    rng.gen_range(-0.7..0.7) * half_fov_x * z,
                    rng.gen_range(-0.7..0.7) * half_fov_y * z,
                    z,
                ];
                let axis = unit_vector(&mut rng);
                let angle = rng.gen_range(0.3..1.0) * cfg.max_rotation_deg.to_radians() * speed.scale();
                let dir = unit_vector(&mut rng);
                let mag = rng.gen_range(0.3..1.0) * cfg.max_translation * z * speed.scale();
                let obj = ObjectSpec {
                    shape: shape.clone(),
                    center,
                    orientation: tilt,
                    texture: texture.clone(),
                    motion: RigidMotion {
                        axis,
                        angle,
                        translation: dir.map(|d| d * mag),
                    },
                };
                if spec.object_ok(&obj) {
                    placed = Some(obj);
                    break;
                }
            }
            match placed {
                Some(o) => spec.objects.push(o),
                None => {
                    return Err(Error::Spec(format!(
                        "object {idx} of scene {seed} left the view in {MAX_ATTEMPTS} attempts"
                    )))
                }
            }
        }
        Ok(spec)
    }
}

/// A rendered sample with ground truth.
#[derive(Clone, Debug)]
pub struct Sample {
    pub spec: SceneSpec,
    /// `H x W` intensities at the start and end of the interval.
    pub rgb0: Tensor<f64>,
    pub rgb1: Tensor<f64>,
    /// `N x 3` points seen in frame 0 and frame 1 (independent pixel subsets).
    pub pc0: Tensor<f64>,
    pub pc1: Tensor<f64>,
    /// `N x 3` motion of the `pc0` points.
    pub sf_gt: Tensor<f64>,
    /// `H x W x 2`.
    pub of_gt: Tensor<f64>,
    /// Per pixel: the frame-0 surface is hidden or outside the image in frame 1.
    pub occ2d: Vec<bool>,
    /// Per `pc0` point, same criterion.
    pub occ3d: Vec<bool>,
    pub valid: Vec<bool>,
    pub events: EventStream,
}

fn project_pt(cam: &CameraIntrinsics, p: [f64; 3]) -> (f64, f64) {
    (cam.f * p[0] / p[2] + cam.cx, cam.f * p[1] / p[2] + cam.cy)
}

/// Renders all substeps, simulates events and derives ground truth.
pub fn generate(spec: &SceneSpec) -> Result<Sample> {
    spec.cam.validate()?;
    if spec.substeps == 0 {
        return Err(Error::Config("substeps must be positive".into()));
    }
    let (w, h) = (spec.cam.width, spec.cam.height);
    let npx = w * h;
    if spec.num_points == 0 || spec.num_points > npx {
        return Err(Error::Config(format!("cannot draw {} points from {npx} pixels", spec.num_points)));
    }
    for (i, o) in spec.objects.iter().enumerate() {
        if !spec.object_ok(o) {
            return Err(Error::Spec(format!("object {i} leaves the view or crosses the near plane")));
        }
    }
    let frames: Vec<Tensor<f64>> = (0..=spec.substeps)
        .map(|k| spec.render(k as f64 / spec.substeps as f64))
        .collect();
    let events = simulate_events(&frames, &spec.simulator, 0.0, spec.interval)?;

    let hits0: Vec<Hit> = (0..npx).map(|i| spec.cast(0.0, (i % w) as f64, (i / w) as f64)).collect();
    let mut of = vec![0.0; npx * 2];
    let mut sf_px = vec![[0.0; 3]; npx];
    let mut p0_px = vec![[0.0; 3]; npx];
    let mut occ2d = vec![false; npx];
    for (i, hit) in hits0.iter().enumerate() {
        let p0 = spec.moved(hit, 0.0);
        let p1 = spec.moved(hit, 1.0);
        let (u0, v0) = project_pt(&spec.cam, p0);
        let (u1, v1) = project_pt(&spec.cam, p1);
        of[2 * i] = u1 - u0;
        of[2 * i + 1] = v1 - v0;
        sf_px[i] = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
        p0_px[i] = p0;
        let inside = u1 >= -0.5 && v1 >= -0.5 && u1 < w as f64 - 0.5 && v1 < h as f64 - 0.5;
        occ2d[i] = if inside {
            let seen = spec.cast(1.0, u1, v1);
            seen.object != hit.object || (seen.depth - p1[2]).abs() > OCCLUSION_TOL * p1[2].max(1.0)
        } else {
            true
        };
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0f_9017);
    let pick = |rng: &mut ChaCha8Rng| {
        let mut idx = sample_indices(rng, npx, spec.num_points).into_vec();
        idx.sort_unstable();
        idx
    };
    let idx0 = pick(&mut rng);
    let idx1 = pick(&mut rng);
    let n = spec.num_points;
    let pc0 = Tensor::from_fn(&[n, 3], |i| p0_px[idx0[i / 3]][i % 3]);
    let sf_gt = Tensor::from_fn(&[n, 3], |i| sf_px[idx0[i / 3]][i % 3]);
    let pc1 = Tensor::from_fn(&[n, 3], |i| {
        let p = idx1[i / 3];
        let hit = spec.cast(1.0, (p % w) as f64, (p / w) as f64);
        let d = spec.ray((p % w) as f64, (p / w) as f64);
        d[i % 3] * hit.depth
    });
    let occ3d = idx0.iter().map(|&p| occ2d[p]).collect();
    Ok(Sample {
        spec: spec.clone(),
        rgb0: frames[0].clone(),
        rgb1: frames[spec.substeps].clone(),
        pc0,
        pc1,
        sf_gt,
        of_gt: Tensor::new(&[h, w, 2], of)?,
        occ2d,
        occ3d,
        valid: vec![true; npx],
        events,
    })
}
