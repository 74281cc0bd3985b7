//! Event streams: voxelization into network input, a log-intensity
//! threshold simulator, and the packed binary event file format.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const FILE_MAGIC: &[u8; 4] = b"EVT1";
pub const HEADER_BYTES: usize = 16;
pub const RECORD_BYTES: usize = 13;

/// Percentile of `|EV|` the voxel grid is divided by.
pub const NORM_PERCENTILE: f64 = 98.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    /// Seconds.
    pub t: f64,
    /// +1 or -1.
    pub p: i8,
}

/// Time-sorted events of one inter-frame interval `[t0, t1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    events: Vec<Event>,
    t0: f64,
    t1: f64,
    width: usize,
    height: usize,
}

impl EventStream {
    pub fn new(events: Vec<Event>, t0: f64, t1: f64, width: usize, height: usize) -> Result<Self> {
        if !(t1 > t0) {
            return Err(Error::Config(format!("event interval [{t0}, {t1}] is empty")));
        }
        for (i, e) in events.iter().enumerate() {
            if e.x as usize >= width || e.y as usize >= height {
                return Err(Error::Data(format!(
                    "event {i} at ({}, {}) outside {width}x{height}",
                    e.x, e.y
                )));
            }
            if !(e.t >= t0 && e.t <= t1) {
                return Err(Error::Data(format!("event {i} time {} outside [{t0}, {t1}]", e.t)));
            }
            if e.p != 1 && e.p != -1 {
                return Err(Error::Data(format!("event {i} polarity {} not +-1", e.p)));
            }
            if i > 0 && events[i - 1].t > e.t {
                return Err(Error::Data(format!("events not sorted by time at {i}")));
            }
        }
        Ok(Self {
            events,
            t0,
            t1,
            width,
            height,
        })
    }

    pub fn empty(t0: f64, t1: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(Vec::new(), t0, t1, width, height)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.t0, self.t1)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn with_flipped_polarity(&self) -> Self {
        let mut s = self.clone();
        s.events.iter_mut().for_each(|e| e.p = -e.p);
        s
    }

    /// Time-ordered union of two streams over the same interval and sensor.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if (self.t0, self.t1, self.width, self.height) != (other.t0, other.t1, other.width, other.height) {
            return Err(Error::Data("cannot merge streams with different interval or size".into()));
        }
        let mut events: Vec<Event> = self.events.iter().chain(&other.events).copied().collect();
        sort_events(&mut events);
        Self::new(events, self.t0, self.t1, self.width, self.height)
    }
}

fn sort_events(events: &mut [Event]) {
    events.sort_by(|a, b| {
        a.t.partial_cmp(&b.t)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.y.cmp(&b.y))
            .then(a.x.cmp(&b.x))
    });
}

/// Signed bilinear temporal splatting into an `H x W x B` grid, before any
/// normalization. Each event contributes total absolute mass one.
pub fn voxelize_raw<T: Real>(stream: &EventStream, bins: usize, height: usize, width: usize) -> Result<Tensor<T>> {
    if bins == 0 {
        return Err(Error::Config("voxel grid needs at least one bin".into()));
    }
    if height != stream.height || width != stream.width {
        return Err(Error::Config(format!(
            "voxel grid {}x{} does not match stream sensor {}x{}",
            height, width, stream.height, stream.width
        )));
    }
    let (t0, t1) = stream.interval();
    let span = (bins - 1) as f64;
    let mut grid = vec![0.0f64; height * width * bins];
    for e in stream.events() {
        let ts = (e.t - t0) / (t1 - t0) * span;
        let b0 = (ts.floor() as usize).min(bins - 1);
        let frac = ts - b0 as f64;
        let base = (e.y as usize * width + e.x as usize) * bins;
        let p = e.p as f64;
        grid[base + b0] += p * (1.0 - frac);
        if b0 + 1 < bins && frac > 0.0 {
            grid[base + b0 + 1] += p * frac;
        }
    }
    Tensor::new(&[height, width, bins], grid.into_iter().map(T::lit).collect())
}

/// Linear-interpolated percentile of `values` (`q` in percent).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Voxel grid divided by the 98th percentile of its absolute values (left
/// unchanged when that percentile is zero).
pub fn voxelize<T: Real>(stream: &EventStream, bins: usize, height: usize, width: usize) -> Result<Tensor<T>> {
    let raw = voxelize_raw::<f64>(stream, bins, height, width)?;
    let abs: Vec<f64> = raw.data().iter().map(|v| v.abs()).collect();
    let scale = percentile(&abs, NORM_PERCENTILE);
    let grid = if scale > 0.0 { raw.map(|v| v / scale) } else { raw };
    Ok(grid.cast())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatorConfig {
    /// Contrast threshold on log intensity.
    pub threshold: f64,
    /// Floor added to intensity before the logarithm.
    pub eps: f64,
    /// Std-dev of per-pixel threshold jitter; zero disables it.
    #[serde(default)]
    pub threshold_noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            threshold: 0.15,
            eps: 1e-3,
            threshold_noise: 0.0,
            seed: 0,
        }
    }
}

/// Emits an event each time a pixel's linearly interpolated log intensity
/// moves one threshold away from its last event's reference level.
///
/// `frames` are `S + 1` intensity images (`H x W`, values in `[0, 1]`)
/// evenly spaced over `[t0, t1]`.
pub fn simulate_events(frames: &[Tensor<f64>], cfg: &SimulatorConfig, t0: f64, t1: f64) -> Result<EventStream> {
    if frames.len() < 2 {
        return Err(Error::Config("event simulation needs at least two frames".into()));
    }
    if !(cfg.threshold > 0.0) {
        return Err(Error::Config(format!("contrast threshold {} must be positive", cfg.threshold)));
    }
    let shape = frames[0].shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::Data(format!("frames must be H x W, got {shape:?}")));
    }
    for (k, f) in frames.iter().enumerate() {
        if f.shape() != shape.as_slice() {
            return Err(Error::Data(format!("frame {k} has shape {:?}, expected {shape:?}", f.shape())));
        }
        if !f.all_finite() {
            return Err(Error::Data(format!("frame {k} contains non-finite intensities")));
        }
    }
    let (h, w) = (shape[0], shape[1]);
    if w > u16::MAX as usize || h > u16::MAX as usize {
        return Err(Error::Config("sensor larger than the event format allows".into()));
    }
    let steps = frames.len() - 1;
    let dt = (t1 - t0) / steps as f64;
    let thresholds: Vec<(f64, f64)> = if cfg.threshold_noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n = Normal::new(cfg.threshold, cfg.threshold_noise)
            .map_err(|e| Error::Config(format!("threshold noise: {e}")))?;
        (0..h * w)
            .map(|_| {
                let up = n.sample(&mut rng).max(0.01);
                let down = n.sample(&mut rng).max(0.01);
                (up, down)
            })
            .collect()
    } else {
        vec![(cfg.threshold, cfg.threshold); h * w]
    };
    let log = |v: f64| (v + cfg.eps).ln();
    let mut events = Vec::new();
    for i in 0..h * w {
        let (cu, cd) = thresholds[i];
        let (x, y) = ((i % w) as u16, (i / w) as u16);
        let mut reference = log(frames[0].data()[i]);
        for k in 0..steps {
            let la = log(frames[k].data()[i]);
            let lb = log(frames[k + 1].data()[i]);
            let ta = t0 + k as f64 * dt;
            if lb > la {
                while lb >= reference + cu {
                    reference += cu;
                    let t = ta + (reference - la) / (lb - la) * dt;
                    events.push(Event { x, y, t: t.clamp(t0, t1), p: 1 });
                }
            } else if lb < la {
                while lb <= reference - cd {
                    reference -= cd;
                    let t = ta + (reference - la) / (lb - la) * dt;
                    events.push(Event { x, y, t: t.clamp(t0, t1), p: -1 });
                }
            }
        }
    }
    sort_events(&mut events);
    EventStream::new(events, t0, t1, w, h)
}

/// Serializes a stream: 16-byte header (`EVT1`, u16 W, u16 H, f64 zero)
/// followed by packed 13-byte little-endian records.
pub fn encode_events(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_BYTES + RECORD_BYTES * stream.len());
    out.extend_from_slice(FILE_MAGIC);
    out.extend_from_slice(&(stream.width as u16).to_le_bytes());
    out.extend_from_slice(&(stream.height as u16).to_le_bytes());
    out.extend_from_slice(&0f64.to_le_bytes());
    for e in stream.events() {
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.extend_from_slice(&e.t.to_le_bytes());
        out.push(e.p as u8);
    }
    out
}

/// Parses the packed format into `(width, height, events)`.
pub fn decode_events(bytes: &[u8]) -> Result<(usize, usize, Vec<Event>)> {
    if bytes.len() < HEADER_BYTES || &bytes[..4] != FILE_MAGIC {
        return Err(Error::Data("missing EVT1 header".into()));
    }
    let body = &bytes[HEADER_BYTES..];
    if body.len() % RECORD_BYTES != 0 {
        return Err(Error::Data(format!(
            "event payload of {} bytes is not a whole number of records",
            body.len()
        )));
    }
    let width = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let height = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let events = body
        .chunks_exact(RECORD_BYTES)
        .map(|r| Event {
            x: u16::from_le_bytes([r[0], r[1]]),
            y: u16::from_le_bytes([r[2], r[3]]),
            t: f64::from_le_bytes(r[4..12].try_into().unwrap()),
            p: r[12] as i8,
        })
        .collect();
    Ok((width, height, events))
}

pub fn write_events(path: &Path, stream: &EventStream) -> Result<()> {
    fs::write(path, encode_events(stream)).map_err(|e| Error::io(path, e))
}

/// Reads an event file; the interval is not stored in the file.
pub fn read_events(path: &Path, t0: f64, t1: f64) -> Result<EventStream> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, events) = decode_events(&bytes)?;
    EventStream::new(events, t0, t1, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_validation() {
        let e = |t, p| Event { x: 0, y: 0, t, p };
        assert!(EventStream::new(vec![e(0.5, 1)], 1.0, 1.0, 2, 2).is_err());
        assert!(EventStream::new(vec![e(0.5, 1), e(0.2, 1)], 0.0, 1.0, 2, 2).is_err());
        assert!(EventStream::new(vec![e(0.5, 0)], 0.0, 1.0, 2, 2).is_err());
        assert!(EventStream::new(vec![e(1.5, 1)], 0.0, 1.0, 2, 2).is_err());
        assert!(EventStream::new(vec![e(0.2, 1), e(0.5, -1)], 0.0, 1.0, 2, 2).is_ok());
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[0.0, 10.0], 50.0), 5.0);
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 100.0), 3.0);
        assert_eq!(percentile(&[], 98.0), 0.0);
    }

    #[test]
    fn file_layout() {
        let s = EventStream::new(
            vec![Event { x: 3, y: 1, t: 0.25, p: -1 }],
            0.0,
            1.0,
            5,
            4,
        )
        .unwrap();
        let bytes = encode_events(&s);
        assert_eq!(bytes.len(), 16 + 13);
        assert_eq!(&bytes[..4], b"EVT1");
        assert_eq!(&bytes[4..8], &[5, 0, 4, 0]);
        assert_eq!(&bytes[8..16], &[0; 8]);
        assert_eq!(bytes[28], 0xff);
        let (w, h, ev) = decode_events(&bytes).unwrap();
        assert_eq!((w, h), (5, 4));
        assert_eq!(ev, s.events());
        assert!(decode_events(&bytes[..20]).is_err());
    }
}
