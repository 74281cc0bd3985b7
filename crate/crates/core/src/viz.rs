//! Binary PPM renderings: flow color wheel, event polarity images and
//! scene-flow error scatter projections.

use crate::error::{shape_err, Error, Result};
use crate::events::EventStream;
use crate::geometry::{project, CameraIntrinsics, PointSet};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub type Rgb = [u8; 3];

pub const EVENT_BACKGROUND: Rgb = [255, 255, 255];
pub const EVENT_POSITIVE: Rgb = [200, 30, 30];
pub const EVENT_NEGATIVE: Rgb = [30, 60, 200];
pub const SCATTER_BACKGROUND: Rgb = [0, 0, 0];
/// Lowest, middle and highest error tercile.
pub const TERCILE_COLORS: [Rgb; 3] = [[40, 80, 255], [40, 200, 60], [255, 40, 40]];

/// An `h x w` RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl Image {
    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        Self {
            width,
            height,
            pixels: vec![color; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    /// Binary (P6) encoding.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("malformed PPM: {m}"));
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header encoding"))?);
        }
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(bad("expected P6 with maxval 255"));
        }
        let width: usize = fields[1].parse().map_err(|_| bad("width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("height"))?;
        let body = &bytes[pos + 1..];
        if body.len() != width * height * 3 {
            return Err(bad("pixel count"));
        }
        Ok(Self {
            width,
            height,
            pixels: body.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
        })
    }
}

/// The 55-entry Middlebury color wheel.
fn color_wheel() -> Vec<[f64; 3]> {
    let (ry, yg, gc, cb, bm, mr) = (15, 6, 4, 11, 13, 6);
    let mut w = Vec::with_capacity(55);
    let ramp = |i: usize, n: usize| 255.0 * i as f64 / n as f64;
    w.extend((0..ry).map(|i| [255.0, ramp(i, ry), 0.0]));
    w.extend((0..yg).map(|i| [255.0 - ramp(i, yg), 255.0, 0.0]));
    w.extend((0..gc).map(|i| [0.0, 255.0, ramp(i, gc)]));
    w.extend((0..cb).map(|i| [0.0, 255.0 - ramp(i, cb), 255.0]));
    w.extend((0..bm).map(|i| [ramp(i, bm), 0.0, 255.0]));
    w.extend((0..mr).map(|i| [255.0, 0.0, 255.0 - ramp(i, mr)]));
    w
}

/// Color of one flow vector already divided by the saturation magnitude.
fn flow_color(wheel: &[[f64; 3]], u: f64, v: f64) -> Rgb {
    let n = wheel.len();
    let rad = u.hypot(v);
    let a = (-v).atan2(-u) / std::f64::consts::PI;
    let fk = (a + 1.0) / 2.0 * (n - 1) as f64;
    let k0 = fk.floor() as usize % n;
    let k1 = (k0 + 1) % n;
    let f = fk - fk.floor();
    let mut out = [0u8; 3];
    for c in 0..3 {
        let col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
        let col = if rad <= 1.0 { 1.0 - rad * (1.0 - col) } else { col * 0.75 };
        out[c] = (255.0 * col).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Standard flow coloring of an `H x W x 2` field; magnitudes at or above
/// `max_flow` are fully saturated.
pub fn flow_image<T: Real>(flow: &Tensor<T>, max_flow: f64) -> Result<Image> {
    let s = flow.shape();
    if s.len() != 3 || s[2] != 2 {
        return Err(shape_err!("flow image needs H x W x 2, got {:?}", s));
    }
    if !(max_flow > 0.0) {
        return Err(Error::Config(format!("max flow must be positive, got {max_flow}")));
    }
    let wheel = color_wheel();
    let pixels = flow
        .data()
        .chunks(2)
        .map(|f| {
            let (mut u, mut v) = (f[0].as_f64() / max_flow, f[1].as_f64() / max_flow);
            let r = u.hypot(v);
            if r > 1.0 {
                u /= r;
                v /= r;
            }
            flow_color(&wheel, u, v)
        })
        .collect();
    Ok(Image {
        width: s[1],
        height: s[0],
        pixels,
    })
}

/// Pixels colored by the sign of their summed event polarity.
pub fn event_image(stream: &EventStream) -> Image {
    let (w, h) = (stream.width(), stream.height());
    let mut sum = vec![0i64; w * h];
    for e in stream.events() {
        sum[e.y as usize * w + e.x as usize] += e.p as i64;
    }
    Image {
        width: w,
        height: h,
        pixels: sum
            .into_iter()
            .map(|s| match s.signum() {
                1 => EVENT_POSITIVE,
                -1 => EVENT_NEGATIVE,
                _ => EVENT_BACKGROUND,
            })
            .collect(),
    }
}

/// Projects frame-1 points into the image and colors each by the tercile
/// of its scene-flow end-point error. Nearer points are drawn last.
pub fn sceneflow_error_image<T: Real>(
    points: &PointSet<T>,
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    cam: &CameraIntrinsics,
) -> Result<Image> {
    let n = points.len();
    if pred.shape() != [n, 3] || gt.shape() != [n, 3] {
        return Err(shape_err!(
            "scene flow {:?} / {:?} for {} points",
            pred.shape(),
            gt.shape(),
            n
        ));
    }
    let err: Vec<f64> = (0..n)
        .map(|i| {
            (0..3)
                .map(|k| (pred.data()[3 * i + k] - gt.data()[3 * i + k]).as_f64().powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut sorted = err.clone();
    sorted.sort_by(f64::total_cmp);
    let cut = |q: usize| if n == 0 { 0.0 } else { sorted[(q * n).div_ceil(3).max(1) - 1] };
    let (t1, t2) = (cut(1), cut(2));
    let uv = project(points, cam)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| points.point(b)[2].as_f64().total_cmp(&points.point(a)[2].as_f64()).then(a.cmp(&b)));
    let mut img = Image::filled(cam.width, cam.height, SCATTER_BACKGROUND);
    for i in order {
        let (x, y) = (uv.data()[2 * i].as_f64().round(), uv.data()[2 * i + 1].as_f64().round());
        if x < 0.0 || y < 0.0 || x >= cam.width as f64 || y >= cam.height as f64 {
            continue;
        }
        let tier = if err[i] <= t1 {
            0
        } else if err[i] <= t2 {
            1
        } else {
            2
        };
        img.pixels[y as usize * cam.width + x as usize] = TERCILE_COLORS[tier];
    }
    Ok(img)
}
