//! On-disk datasets and the synthetic shapes generator.
//!
//! Layout: `root/images/<id>.t4` (f32 C×H×W), `root/labels/<id>.t4`
//! (u8 H×W), and one manifest per split (`train.txt`, `val.txt`) listing ids.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::labels::{IdGrid, LabelMap};
use crate::t4::{read_t4, read_t4_header, write_t4, Dtype, T4};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub fn manifest(self) -> &'static str {
        match self {
            Split::Train => "train.txt",
            Split::Val => "val.txt",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Parse(format!("unknown split `{other}` (expected train or val)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    /// C×H×W.
    pub image: Tensor<f32>,
    pub labels: LabelMap,
}

/// Validated list of sample ids for one split.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    root: PathBuf,
    ids: Vec<String>,
    channels: usize,
}

pub fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join("images").join(format!("{id}.t4"))
}

pub fn label_path(root: &Path, id: &str) -> PathBuf {
    root.join("labels").join(format!("{id}.t4"))
}

fn sample_err(id: &str, reason: impl Into<String>) -> Error {
    Error::Sample {
        id: id.to_string(),
        reason: reason.into(),
    }
}

/// Loads a split manifest, checking every pair's headers.
pub fn load_dataset(root: impl AsRef<Path>, split: Split) -> Result<DatasetIndex> {
    let root = root.as_ref().to_path_buf();
    let manifest = root.join(split.manifest());
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let ids: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    let mut channels = None;
    for id in &ids {
        let (ip, lp) = (image_path(&root, id), label_path(&root, id));
        for (p, what) in [(&ip, "image"), (&lp, "label")] {
            if !p.is_file() {
                return Err(sample_err(id, format!("missing {what} file {}", p.display())));
            }
        }
        let wrap = |e: Error| sample_err(id, e.to_string());
        let (idt, idims) = read_t4_header(&ip).map_err(wrap)?;
        let (ldt, ldims) = read_t4_header(&lp).map_err(wrap)?;
        if idt != Dtype::F32 || idims.len() != 3 {
            return Err(sample_err(
                id,
                format!("image must be f32 C×H×W, found {idt:?} {idims:?}"),
            ));
        }
        if ldt != Dtype::U8 || ldims.len() != 2 {
            return Err(sample_err(
                id,
                format!("labels must be u8 H×W, found {ldt:?} {ldims:?}"),
            ));
        }
        if idims[1..] != ldims[..] {
            return Err(sample_err(
                id,
                format!(
                    "image is {}x{} but labels are {}x{}",
                    idims[1], idims[2], ldims[0], ldims[1]
                ),
            ));
        }
        match channels {
            None => channels = Some(idims[0]),
            Some(c) if c != idims[0] => {
                return Err(sample_err(id, format!("has {} channels, dataset has {c}", idims[0])))
            }
            Some(_) => {}
        }
    }
    if ids.is_empty() {
        return Err(Error::Config(format!(
            "manifest {} lists no samples",
            manifest.display()
        )));
    }
    Ok(DatasetIndex {
        root,
        ids,
        channels: channels.unwrap_or(0),
    })
}

impl DatasetIndex {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn sample(&self, i: usize) -> Result<Sample> {
        let id = &self.ids[i];
        let wrap = |e: Error| sample_err(id, e.to_string());
        let image = read_t4(image_path(&self.root, id))
            .and_then(|t| t.to_tensor())
            .map_err(wrap)?;
        let labels = read_t4(label_path(&self.root, id))
            .and_then(|t| t.to_label_map())
            .map_err(wrap)?;
        Ok(Sample {
            id: id.clone(),
            image,
            labels,
        })
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.len()).map(|i| self.sample(i)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_samples: usize,
    pub val_samples: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub kinds: Vec<ShapeKind>,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_samples: 64,
            val_samples: 16,
            height: 64,
            width: 64,
            num_classes: 3,
            shapes_min: 1,
            shapes_max: 4,
            kinds: vec![ShapeKind::Rectangle, ShapeKind::Ellipse],
            noise_std: 0.05,
            seed: 7,
        }
    }
}

pub const SYNTH_CHANNELS: usize = 3;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 27 {
            return Err(Error::Config(format!(
                "synthetic num_classes {} must be in 2..=27",
                self.num_classes
            )));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config("synthetic images must be at least 4x4".into()));
        }
        if self.shapes_min > self.shapes_max || self.kinds.is_empty() {
            return Err(Error::Config(
                "need shapes_min <= shapes_max and at least one shape kind".into(),
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Base color of each class: points of the smallest n×n×n grid in [0,1]^3
/// with n^3 ≥ K, so that K ≤ 8 uses cube corners.
pub fn palette(num_classes: usize) -> Vec<[f32; SYNTH_CHANNELS]> {
    let mut n = 2;
    while n * n * n < num_classes {
        n += 1;
    }
    let level = |i: usize| i as f32 / (n - 1) as f32;
    (0..num_classes)
        .map(|c| [level(c % n), level((c / n) % n), level(c / (n * n))])
        .collect()
}

/// Draws one image/label pair.
pub fn synth_sample(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (Tensor<f32>, LabelMap) {
    let (h, w) = (cfg.height, cfg.width);
    let mut ids = vec![0u8; h * w];
    let count = rng.gen_range(cfg.shapes_min..=cfg.shapes_max);
    for _ in 0..count {
        let kind = cfg.kinds[rng.gen_range(0..cfg.kinds.len())];
        let class = rng.gen_range(1..cfg.num_classes) as u8;
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let ry = rng.gen_range(h as f64 / 8.0..h as f64 / 3.0);
        let rx = rng.gen_range(w as f64 / 8.0..w as f64 / 3.0);
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                let inside = match kind {
                    ShapeKind::Rectangle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
                    ShapeKind::Ellipse => dy * dy + dx * dx <= 1.0,
                };
                if inside {
                    ids[y * w + x] = class;
                }
            }
        }
    }
    let colors = palette(cfg.num_classes);
    let noise = Normal::new(0.0, cfg.noise_std).expect("validated noise_std");
    let mut data = vec![0f32; SYNTH_CHANNELS * h * w];
    for c in 0..SYNTH_CHANNELS {
        for (p, &id) in ids.iter().enumerate() {
            data[c * h * w + p] = colors[id as usize][c] + noise.sample(rng) as f32;
        }
    }
    let image = Tensor::new(&[SYNTH_CHANNELS, h, w], data).expect("sized above");
    let labels = LabelMap::new(h, w, ids).expect("sized above");
    (image, labels)
}

pub fn write_sample(root: &Path, id: &str, image: &Tensor<f32>, labels: &LabelMap) -> Result<()> {
    write_t4(image_path(root, id), &T4::from_tensor(image))?;
    write_t4(label_path(root, id), &T4::from_grid(labels))
}

/// Writes `num_samples` train and `val_samples` val pairs under `out_dir`
/// and returns the train index.
pub fn gen_synthetic(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<DatasetIndex> {
    cfg.validate()?;
    let root = out_dir.as_ref();
    for sub in ["images", "labels"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for (split, n) in [(Split::Train, cfg.num_samples), (Split::Val, cfg.val_samples)] {
        let mut manifest = String::new();
        for i in 0..n {
            let id = format!("{}_{i:04}", split.name());
            let (image, labels) = synth_sample(cfg, &mut rng);
            write_sample(root, &id, &image, &labels)?;
            manifest.push_str(&id);
            manifest.push('\n');
        }
        let path = root.join(split.manifest());
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    }
    load_dataset(root, Split::Train)
}

/// Per-channel mean over every pixel of every sample.
pub fn channel_means(samples: &[Sample]) -> Vec<f32> {
    let Some(first) = samples.first() else {
        return Vec::new();
    };
    let c = first.image.shape()[0];
    let mut sums = vec![0f64; c];
    let mut count = 0usize;
    for s in samples {
        let plane = s.labels.height() * s.labels.width();
        for (ch, sum) in sums.iter_mut().enumerate() {
            *sum += s.image.data()[ch * plane..(ch + 1) * plane]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
        count += plane;
    }
    sums.iter().map(|s| (s / count as f64) as f32).collect()
}
