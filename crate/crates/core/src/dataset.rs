//! On-disk sample layout, dataset generation and loading.
//!
//! Each `sample_XXXX/` directory holds `meta.json`, raw little-endian f32
//! arrays (`rgb0.f32`, `rgb1.f32`, `pc0.f32`, `pc1.f32`, `sf_gt.f32`,
//! `of_gt.f32`), byte masks (`occ2d.u8`, `occ3d.u8`, `valid.u8`) and
//! `events.evt`. `manifest.json` at the root lists the splits.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{read_events, voxelize, write_events};
use crate::geometry::{CameraIntrinsics, PointSet};
use crate::model::ModelInputs;
use crate::scalar::Real;
use crate::scenegen::{generate, Sample, SceneConfig, SceneSpec, Speed};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const META_FILE: &str = "meta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub width: usize,
    pub height: usize,
    pub num_points: usize,
    pub substeps: usize,
    pub seed: u64,
    pub speed: Speed,
    pub intrinsics: CameraIntrinsics,
    pub t0: f64,
    pub t1: f64,
    pub num_events: usize,
    pub scene: SceneSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeedMode {
    Slow,
    Fast,
    /// Each sample draws its class independently.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub speed: SpeedMode,
    pub scene: SceneConfig,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

impl Manifest {
    pub fn split(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            _ => Err(Error::Config(format!("unknown split {name:?} (expected train or val)"))),
        }
    }
}

fn write_f32(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path, len: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != 4 * len {
        return Err(Error::Data(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            4 * len
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn write_mask(path: &Path, mask: &[bool]) -> Result<()> {
    let bytes: Vec<u8> = mask.iter().map(|&m| m as u8).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_mask(path: &Path, len: usize) -> Result<Vec<bool>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != len {
        return Err(Error::Data(format!("{} holds {} bytes, expected {len}", path.display(), bytes.len())));
    }
    Ok(bytes.into_iter().map(|b| b != 0).collect())
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_sample(dir: &Path, s: &Sample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (t0, t1) = s.events.interval();
    let meta = SampleMeta {
        width: s.spec.cam.width,
        height: s.spec.cam.height,
        num_points: s.spec.num_points,
        substeps: s.spec.substeps,
        seed: s.spec.seed,
        speed: s.spec.speed,
        intrinsics: s.spec.cam.clone(),
        t0,
        t1,
        num_events: s.events.len(),
        scene: s.spec.clone(),
    };
    write_json(&dir.join(META_FILE), &meta)?;
    write_f32(&dir.join("rgb0.f32"), s.rgb0.data())?;
    write_f32(&dir.join("rgb1.f32"), s.rgb1.data())?;
    write_f32(&dir.join("pc0.f32"), s.pc0.data())?;
    write_f32(&dir.join("pc1.f32"), s.pc1.data())?;
    write_f32(&dir.join("sf_gt.f32"), s.sf_gt.data())?;
    write_f32(&dir.join("of_gt.f32"), s.of_gt.data())?;
    write_mask(&dir.join("occ2d.u8"), &s.occ2d)?;
    write_mask(&dir.join("occ3d.u8"), &s.occ3d)?;
    write_mask(&dir.join("valid.u8"), &s.valid)?;
    write_events(&dir.join("events.evt"), &s.events)
}

/// Loads a sample; array values carry the f32 rounding of the files.
pub fn read_sample(dir: &Path) -> Result<Sample> {
    let meta: SampleMeta = read_json(&dir.join(META_FILE))?;
    let (h, w, n) = (meta.height, meta.width, meta.num_points);
    let t = |name: &str, shape: &[usize]| -> Result<Tensor<f64>> {
        let len = shape.iter().product();
        Tensor::new(shape, read_f32(&dir.join(name), len)?)
    };
    let events = read_events(&dir.join("events.evt"), meta.t0, meta.t1)?;
    if events.width() != w || events.height() != h {
        return Err(Error::Data(format!("{}: event sensor size differs from meta", dir.display())));
    }
    Ok(Sample {
        rgb0: t("rgb0.f32", &[h, w])?,
        rgb1: t("rgb1.f32", &[h, w])?,
        pc0: t("pc0.f32", &[n, 3])?,
        pc1: t("pc1.f32", &[n, 3])?,
        sf_gt: t("sf_gt.f32", &[n, 3])?,
        of_gt: t("of_gt.f32", &[h, w, 2])?,
        occ2d: read_mask(&dir.join("occ2d.u8"), h * w)?,
        occ3d: read_mask(&dir.join("occ3d.u8"), n)?,
        valid: read_mask(&dir.join("valid.u8"), h * w)?,
        events,
        spec: meta.scene,
    })
}

/// Seed of sample `index` in a dataset seeded with `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.gen()
}

/// Generates `count` samples; the first `round(count * train_fraction)`
/// form the train split.
pub fn make_dataset(
    cfg: &SceneConfig,
    count: usize,
    train_fraction: f64,
    speed: SpeedMode,
    out: &Path,
    seed: u64,
) -> Result<Manifest> {
    if count == 0 {
        return Err(Error::Config("dataset needs at least one sample".into()));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Config(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let n_train = (count as f64 * train_fraction).round() as usize;
    let mut names = Vec::with_capacity(count);
    for i in 0..count {
        let s = sample_seed(seed, i);
        let class = match speed {
            SpeedMode::Slow => Speed::Slow,
            SpeedMode::Fast => Speed::Fast,
            SpeedMode::Mixed => {
                if s & 1 == 0 {
                    Speed::Slow
                } else {
                    Speed::Fast
                }
            }
        };
        let spec = SceneSpec::random(cfg, s, class)?;
        let sample = generate(&spec)?;
        let name = format!("sample_{i:04}");
        write_sample(&out.join(&name), &sample)?;
        names.push(name);
    }
    let manifest = Manifest {
        seed,
        speed,
        scene: cfg.clone(),
        val: names.split_off(n_train),
        train: names,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    read_json(&root.join(MANIFEST_FILE))
}

/// Loads every sample of a split, in manifest order.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<(PathBuf, Sample)>> {
    let manifest = read_manifest(root)?;
    manifest
        .split(split)?
        .iter()
        .map(|name| {
            let dir = root.join(name);
            read_sample(&dir).map(|s| (dir, s))
        })
        .collect()
}

/// Network inputs for a sample; with `use_events` false the voxel grid is zero.
pub fn model_inputs<T: Real>(s: &Sample, bins: usize, use_events: bool) -> Result<ModelInputs<T>> {
    let (h, w) = (s.spec.cam.height, s.spec.cam.width);
    let voxels = if use_events {
        voxelize::<T>(&s.events, bins, h, w)?
    } else {
        if bins == 0 {
            return Err(Error::Config("voxel grid needs at least one bin".into()));
        }
        Tensor::zeros(&[h, w, bins])
    };
    Ok(ModelInputs {
        rgb: [s.rgb0.cast(), s.rgb1.cast()],
        points: [PointSet::new(s.pc0.cast())?, PointSet::new(s.pc1.cast())?],
        voxels,
        cam: s.spec.cam.clone(),
    })
}
