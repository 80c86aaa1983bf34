//! Losses, learning-rate schedule, Adam, augmentation and the training loop.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BnMode, Gradients, Tape, Var};
use crate::checkpoint::save_checkpoint;
use crate::dataset::{channel_means, Sample};
use crate::error::{Error, Result};
use crate::kernels::bilinear_forward;
use crate::kv;
use crate::labels::{boundary_labels, downsample_labels, BoundaryConfig, BoundaryMap, IdGrid, LabelMap, IGNORE};
use crate::model::{CbsOutputSize, Model, ModelOutput};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the boundary term.
    pub lambda: f64,
    pub ignore_index: u8,
    pub cbs_output_size: CbsOutputSize,
    /// Chebyshev width of boundary targets.
    pub boundary_epsilon: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            ignore_index: IGNORE,
            cbs_output_size: CbsOutputSize::EighthScale,
            boundary_epsilon: 1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        if self.boundary_epsilon == 0 {
            return Err(Error::Config("boundary epsilon must be at least 1".into()));
        }
        Ok(())
    }
}

/// Tape handles of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub seg: Var,
    pub boundary: Option<Var>,
}

fn flatten_targets<G: IdGrid>(maps: &[G], n: usize, h: usize, w: usize, what: &str) -> Result<Vec<u8>> {
    if maps.len() != n {
        return Err(Error::Shape(format!("{} {what} maps for a batch of {n}", maps.len())));
    }
    let mut out = Vec::with_capacity(n * h * w);
    for m in maps {
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::Shape(format!(
                "{what} map is {}x{} but logits are {h}x{w}",
                m.height(),
                m.width()
            )));
        }
        out.extend_from_slice(m.ids());
    }
    Ok(out)
}

/// Cross entropy of full-resolution segmentation logits.
pub fn seg_loss<T: Real>(tape: &mut Tape<T>, seg_logits: Var, labels: &[LabelMap], cfg: &LossConfig) -> Result<Var> {
    let (n, _, h, w) = tape.value(seg_logits).dims4()?;
    let targets = flatten_targets(labels, n, h, w, "label")?;
    Ok(tape.softmax_cross_entropy(seg_logits, &targets, cfg.ignore_index)?.0)
}

pub fn boundary_loss<T: Real>(
    tape: &mut Tape<T>,
    boundary_logits: Var,
    gt: &[BoundaryMap],
    cfg: &LossConfig,
) -> Result<Var> {
    let (n, _, h, w) = tape.value(boundary_logits).dims4()?;
    let targets = flatten_targets(gt, n, h, w, "boundary")?;
    Ok(tape
        .softmax_cross_entropy(boundary_logits, &targets, cfg.ignore_index)?
        .0)
}

/// seg + λ·boundary; the boundary term is absent without boundary logits.
pub fn combined_loss<T: Real>(
    tape: &mut Tape<T>,
    output: &ModelOutput,
    labels: &[LabelMap],
    boundary_gt: Option<&[BoundaryMap]>,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let seg = seg_loss(tape, output.seg_logits, labels, cfg)?;
    let boundary = match (output.boundary_logits, boundary_gt) {
        (Some(logits), Some(gt)) => Some(boundary_loss(tape, logits, gt, cfg)?),
        (Some(_), None) => return Err(Error::Config("boundary logits given without boundary targets".into())),
        (None, _) => None,
    };
    let total = match boundary {
        Some(b) => {
            let weighted = tape.scale(b, cfg.lambda)?;
            tape.add(seg, weighted)?
        }
        None => seg,
    };
    Ok(LossTerms { total, seg, boundary })
}

/// Boundary targets at the resolution of the boundary head.
pub fn boundary_targets<T: Real>(
    model: &Model<T>,
    labels: &[LabelMap],
    epsilon: usize,
) -> Result<Option<Vec<BoundaryMap>>> {
    let cfg = model.config();
    let Some(mode) = cfg.boundary_mode else {
        return Ok(None);
    };
    let bcfg = BoundaryConfig::new(epsilon, mode, cfg.num_classes)?;
    let stride = cfg.boundary_stride();
    labels
        .iter()
        .map(|l| Ok(boundary_labels(&downsample_labels(l, stride)?, &bcfg)))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total)).
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    if step == 0 {
        return Ok(lr_max);
    }
    if step == total_steps {
        return Ok(lr_min);
    }
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment buffers for each parameter. A parameter whose gradient is absent
/// or all zero is left untouched, moments included.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub names: Vec<String>,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// Updates applied to each parameter.
    pub t: Vec<u64>,
    /// Calls to `adam_step`.
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(names: Vec<String>, sizes: &[usize]) -> Self {
        Self {
            names,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: vec![0; sizes.len()],
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    pub fn for_model(model: &Model<T>) -> Self {
        let names = model.params().iter().map(|p| p.name.clone()).collect();
        let sizes: Vec<usize> = model.params().iter().map(|p| p.value().numel()).collect();
        Self::new(names, &sizes)
    }
}

/// Decoupled weight decay θ ← θ − lr·wd·θ, then a bias-corrected Adam update.
/// Nothing is modified if any gradient is non-finite.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[Option<&[T]>],
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if let Some(g) = g {
            if g.len() != p.numel() || state.m[i].len() != p.numel() {
                return Err(Error::Shape(format!(
                    "gradient for `{}` has the wrong length",
                    state.names[i]
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(state.names[i].clone()));
            }
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g.filter(|g| g.iter().any(|v| *v != T::zero())) else {
            continue;
        };
        state.t[i] += 1;
        let t = state.t[i] as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let decay = 1.0 - lr * weight_decay;
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, theta) in p.data_mut().iter_mut().enumerate() {
            let gk = g[k].as_f64();
            let mk = b1 * m[k].as_f64() + (1.0 - b1) * gk;
            let vk = b2 * v[k].as_f64() + (1.0 - b2) * gk * gk;
            m[k] = T::from_f64(mk);
            v[k] = T::from_f64(vk);
            let th = theta.as_f64() * decay;
            *theta = T::from_f64(th - lr * (mk / c1) / ((vk / c2).sqrt() + state.eps));
        }
    }
    Ok(())
}

/// Applies one Adam step to every model parameter from tape gradients.
pub fn adam_step_model<T: Real>(
    model: &mut Model<T>,
    param_vars: &[Var],
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let gs: Vec<Option<Vec<T>>> = param_vars.iter().map(|v| grads.get(*v).map(<[T]>::to_vec)).collect();
    let refs: Vec<Option<&[T]>> = gs.iter().map(|g| g.as_deref()).collect();
    let n = model.params().len();
    let mut tensors: Vec<Tensor<T>> = (0..n).map(|i| model.params()[i].value().clone()).collect();
    {
        let mut muts: Vec<&mut Tensor<T>> = tensors.iter_mut().collect();
        adam_step(&mut muts, &refs, state, lr, weight_decay)?;
    }
    for (i, t) in tensors.into_iter().enumerate() {
        if refs[i].is_some() {
            model.set_param(i, t)?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub scale_range: (f64, f64),
    pub crop_h: usize,
    pub crop_w: usize,
    /// Subtracted per channel; padding uses these values before subtraction.
    pub channel_means: Vec<f32>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            scale_range: (0.5, 2.0),
            crop_h: 1024,
            crop_w: 1024,
            channel_means: Vec::new(),
        }
    }
}

/// Mirrors a C×H×W image and its labels left to right.
pub fn hflip(image: &Tensor<f32>, labels: &LabelMap) -> (Tensor<f32>, LabelMap) {
    let (h, w) = (labels.height(), labels.width());
    let flipped = Tensor::from_fn(image.shape(), |i| {
        let (row, x) = (i / w, i % w);
        image.data()[row * w + (w - 1 - x)]
    });
    let ids = (0..h * w).map(|i| labels.get(i / w, w - 1 - i % w)).collect();
    (flipped, LabelMap::new(h, w, ids).expect("same extent"))
}

/// Nearest-neighbour label resize with half-pixel centers.
pub fn resize_labels_nearest(labels: &LabelMap, out_h: usize, out_w: usize) -> LabelMap {
    let src =
        |dst: usize, inn: usize, out: usize| (((dst as f64 + 0.5) * inn as f64 / out as f64) as usize).min(inn - 1);
    let ids = (0..out_h * out_w)
        .map(|i| {
            let (y, x) = (i / out_w, i % out_w);
            labels.get(src(y, labels.height(), out_h), src(x, labels.width(), out_w))
        })
        .collect();
    LabelMap::new(out_h, out_w, ids).expect("nonzero extent")
}

/// Random scale → random horizontal flip → random crop (padding with channel
/// means and ignore labels) → mean subtraction.
pub fn augment_sample(
    image: &Tensor<f32>,
    labels: &LabelMap,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, LabelMap)> {
    let [c, h, w] = image.shape()[..] else {
        return Err(Error::Shape(format!("image must be C×H×W, got {:?}", image.shape())));
    };
    if (labels.height(), labels.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "image is {h}x{w} but labels are {}x{}",
            labels.height(),
            labels.width()
        )));
    }
    if cfg.crop_h == 0 || cfg.crop_w == 0 {
        return Err(Error::Config("crop size must be positive".into()));
    }
    if cfg.channel_means.len() != c {
        return Err(Error::Config(format!(
            "{} channel means for {c}-channel images",
            cfg.channel_means.len()
        )));
    }
    let (lo, hi) = cfg.scale_range;
    let scale = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
    let flip = rng.gen_bool(cfg.flip_prob.clamp(0.0, 1.0));

    let sh = ((h as f64 * scale).round() as usize).max(1);
    let sw = ((w as f64 * scale).round() as usize).max(1);
    let (mut img, mut lab) = if (sh, sw) == (h, w) {
        (image.clone(), labels.clone())
    } else {
        let resized = bilinear_forward(&image.clone().reshape(&[1, c, h, w])?, sh, sw)?.reshape(&[c, sh, sw])?;
        (resized, resize_labels_nearest(labels, sh, sw))
    };
    if flip {
        (img, lab) = hflip(&img, &lab);
    }

    let (ch, cw) = (cfg.crop_h, cfg.crop_w);
    let y0 = if sh > ch { rng.gen_range(0..=sh - ch) } else { 0 };
    let x0 = if sw > cw { rng.gen_range(0..=sw - cw) } else { 0 };
    let mut out = vec![0f32; c * ch * cw];
    let mut ids = vec![IGNORE; ch * cw];
    for y in 0..ch {
        for x in 0..cw {
            let (sy, sx) = (y0 + y, x0 + x);
            let inside = sy < sh && sx < sw;
            if inside {
                ids[y * cw + x] = lab.get(sy, sx);
            }
            for k in 0..c {
                let v = if inside {
                    img.data()[(k * sh + sy) * sw + sx]
                } else {
                    cfg.channel_means[k]
                };
                out[(k * ch + y) * cw + x] = v - cfg.channel_means[k];
            }
        }
    }
    Ok((Tensor::new(&[c, ch, cw], out)?, LabelMap::new(ch, cw, ids)?))
}

/// Subtracts channel means from a C×H×W image.
pub fn normalize_image(image: &Tensor<f32>, means: &[f32]) -> Result<Tensor<f32>> {
    let c = image.shape()[0];
    if means.len() != c {
        return Err(Error::Config(format!(
            "{} channel means for {c}-channel images",
            means.len()
        )));
    }
    let plane = image.numel() / c;
    Ok(Tensor::from_fn(image.shape(), |i| image.data()[i] - means[i / plane]))
}

/// Stacks equally sized C×H×W images into N×C×H×W.
pub fn stack_images(images: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let mut data = Vec::with_capacity(first.numel() * images.len());
    for im in images {
        if im.shape() != first.shape() {
            return Err(Error::Shape(format!(
                "batch mixes {:?} and {:?}",
                first.shape(),
                im.shape()
            )));
        }
        data.extend_from_slice(im.data());
    }
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(&shape, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub weight_decay: f64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub epochs: usize,
    /// Stop after this many steps; the schedule spans the shorter length.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Write a checkpoint every this many steps (the final one is always written).
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 12,
            weight_decay: 2.5e-5,
            lr_max: 1e-4,
            lr_min: 1e-6,
            epochs: 350,
            max_steps: None,
            seed: 0,
            augment: AugmentConfig::default(),
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, required_multiple: usize) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.lr_min <= self.lr_max && self.lr_min >= 0.0) {
            return Err(Error::Config(format!(
                "need 0 <= lr_min ({}) <= lr_max ({})",
                self.lr_min, self.lr_max
            )));
        }
        let (lo, hi) = self.augment.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!(
                "scale range [{lo}, {hi}] must satisfy 0 < low <= high"
            )));
        }
        let (ch, cw) = (self.augment.crop_h, self.augment.crop_w);
        if ch == 0 || cw == 0 || ch % required_multiple != 0 || cw % required_multiple != 0 {
            return Err(Error::Divisibility {
                height: ch,
                width: cw,
                multiple: required_multiple,
            });
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        let full = self.epochs.saturating_mul(self.steps_per_epoch(samples));
        self.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let a = &self.augment;
        let mut out = vec![
            ("train.batch_size", self.batch_size.to_string()),
            ("train.weight_decay", self.weight_decay.to_string()),
            ("train.lr_max", self.lr_max.to_string()),
            ("train.lr_min", self.lr_min.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.flip_prob", a.flip_prob.to_string()),
            ("train.scale_range", format!("{},{}", a.scale_range.0, a.scale_range.1)),
            ("train.crop", format!("{},{}", a.crop_h, a.crop_w)),
        ];
        if let Some(m) = self.max_steps {
            out.push(("train.max_steps", m.to_string()));
        }
        if !a.channel_means.is_empty() {
            out.push(("train.channel_means", kv::join(&a.channel_means)));
        }
        if let Some(c) = self.checkpoint_every {
            out.push(("train.checkpoint_every", c.to_string()));
        }
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Applies one `train.*` key; unknown keys are errors.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "train.batch_size" => self.batch_size = kv::value(key, raw)?,
            "train.weight_decay" => self.weight_decay = kv::value(key, raw)?,
            "train.lr_max" => self.lr_max = kv::value(key, raw)?,
            "train.lr_min" => self.lr_min = kv::value(key, raw)?,
            "train.epochs" => self.epochs = kv::value(key, raw)?,
            "train.max_steps" => self.max_steps = Some(kv::value(key, raw)?),
            "train.seed" => self.seed = kv::value(key, raw)?,
            "train.flip_prob" => self.augment.flip_prob = kv::value(key, raw)?,
            "train.scale_range" => self.augment.scale_range = pair(key, raw)?,
            "train.crop" => (self.augment.crop_h, self.augment.crop_w) = pair(key, raw)?,
            "train.channel_means" => self.augment.channel_means = kv::list(key, raw)?,
            "train.checkpoint_every" => self.checkpoint_every = Some(kv::value(key, raw)?),
            _ => return Err(kv::unknown_key(key)),
        }
        Ok(())
    }
}

impl LossConfig {
    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("loss.lambda".into(), self.lambda.to_string()),
            ("loss.ignore_index".into(), self.ignore_index.to_string()),
            ("boundary.epsilon".into(), self.boundary_epsilon.to_string()),
        ]
    }

    /// Applies one `loss.*` or `boundary.*` key.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "loss.lambda" => self.lambda = kv::value(key, raw)?,
            "loss.ignore_index" => self.ignore_index = kv::value(key, raw)?,
            "boundary.epsilon" => self.boundary_epsilon = kv::value(key, raw)?,
            _ => return Err(kv::unknown_key(key)),
        }
        Ok(())
    }
}

fn pair<A: std::str::FromStr, B: std::str::FromStr>(key: &str, raw: &str) -> Result<(A, B)>
where
    A::Err: std::fmt::Display,
    B::Err: std::fmt::Display,
{
    let (a, b) = raw
        .split_once(',')
        .ok_or_else(|| Error::Parse(format!("`{key}` expects two comma-separated values, got `{raw}`")))?;
    Ok((kv::value(key, a.trim())?, kv::value(key, b.trim())?))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub lr: f64,
    pub seg_loss: f64,
    pub boundary_loss: Option<f64>,
    pub total: f64,
    pub wall_ms: f64,
}

/// Log fields that depend on the wall clock and are excluded from
/// determinism comparisons.
pub const WALL_CLOCK_FIELDS: &[&str] = &["wall_ms"];

/// Drops `WALL_CLOCK_FIELDS` from one JSON log line.
pub fn strip_wall_clock(line: &str) -> Result<String> {
    let mut v: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse(e.to_string()))?;
    if let Some(obj) = v.as_object_mut() {
        for f in WALL_CLOCK_FIELDS {
            obj.remove(*f);
        }
    }
    Ok(v.to_string())
}

/// Loss values of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub seg: f64,
    pub boundary: Option<f64>,
    pub total: f64,
}

/// Forward and loss on one batch, returning the tape for backward.
fn forward_loss<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    images: &Tensor<T>,
    labels: &[LabelMap],
    boundary: Option<&[BoundaryMap]>,
    loss_cfg: &LossConfig,
    mode: BnMode,
) -> Result<(LossTerms, crate::model::Pass<T>)> {
    let mut bound = model.bind(tape, mode);
    let x = bound.tape().leaf(images.clone());
    let out = bound.forward(x)?;
    let pass = bound.finish();
    let terms = combined_loss(tape, &out, labels, boundary, loss_cfg)?;
    Ok((terms, pass))
}

fn read_losses<T: Real>(tape: &Tape<T>, terms: &LossTerms) -> StepLosses {
    let scalar = |v: Var| tape.value(v).data()[0].as_f64();
    StepLosses {
        seg: scalar(terms.seg),
        boundary: terms.boundary.map(scalar),
        total: scalar(terms.total),
    }
}

/// Losses on a batch without updating anything.
pub fn evaluate_batch<T: Real>(
    model: &Model<T>,
    images: &Tensor<T>,
    labels: &[LabelMap],
    loss_cfg: &LossConfig,
    mode: BnMode,
) -> Result<StepLosses> {
    let boundary = boundary_targets(model, labels, loss_cfg.boundary_epsilon)?;
    let mut tape = Tape::inference();
    let (terms, _) = forward_loss(model, &mut tape, images, labels, boundary.as_deref(), loss_cfg, mode)?;
    Ok(read_losses(&tape, &terms))
}

/// Forward, backward, Adam update and BN running-statistics commit on one
/// batch. Returns the losses before the update.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    adam: &mut AdamState<T>,
    images: &Tensor<T>,
    labels: &[LabelMap],
    loss_cfg: &LossConfig,
    lr: f64,
    weight_decay: f64,
    step: usize,
) -> Result<StepLosses> {
    let boundary = boundary_targets(model, labels, loss_cfg.boundary_epsilon)?;
    let mut tape = Tape::new();
    let (terms, pass) = forward_loss(
        model,
        &mut tape,
        images,
        labels,
        boundary.as_deref(),
        loss_cfg,
        BnMode::Train,
    )
    .map_err(|e| match e {
        Error::NonFinite(_) => Error::NonFiniteLoss { step },
        other => other,
    })?;
    let losses = read_losses(&tape, &terms);
    if !losses.total.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    let grads = tape.backward(terms.total)?;
    drop(tape);
    adam_step_model(model, &pass.param_vars, &grads, adam, lr, weight_decay)?;
    model.commit(&pass.bn_stats);
    Ok(losses)
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub log: Vec<LogEntry>,
    pub channel_means: Vec<f32>,
    pub total_steps: usize,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.t4c";

/// Trains `model` on in-memory samples. With `run_dir`, writes the JSONL log,
/// periodic `checkpoint_step<N>.t4c` files and a final `checkpoint.t4c`.
pub fn fit(
    model: &mut Model<f32>,
    samples: &[Sample],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    run_dir: Option<&Path>,
) -> Result<FitReport> {
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    cfg.validate(model.config().required_multiple())?;
    loss_cfg.validate()?;
    let mut aug = cfg.augment.clone();
    if aug.channel_means.is_empty() {
        aug.channel_means = channel_means(samples);
    }
    let mut log_file = match run_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };

    let total = cfg.total_steps(samples.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::for_model(model);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(total);
    let mut step = 0;
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if step == total {
                break 'epochs;
            }
            let started = Instant::now();
            let mut images = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (im, lab) = augment_sample(&samples[i].image, &samples[i].labels, &aug, &mut rng)?;
                images.push(im);
                labels.push(lab);
            }
            let batch = stack_images(&images)?;
            let lr = cosine_lr(step, total, cfg.lr_max, cfg.lr_min)?;
            let losses = train_step(model, &mut adam, &batch, &labels, loss_cfg, lr, cfg.weight_decay, step)?;
            let entry = LogEntry {
                step,
                lr,
                seg_loss: losses.seg,
                boundary_loss: losses.boundary,
                total: losses.total,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            };
            if let Some((file, path)) = log_file.as_mut() {
                let line = serde_json::to_string(&entry).map_err(|e| Error::Parse(e.to_string()))?;
                writeln!(file, "{line}").map_err(|e| Error::io(&*path, e))?;
            }
            log.push(entry);
            step += 1;
            if let (Some(dir), Some(every)) = (run_dir, cfg.checkpoint_every) {
                if every > 0 && step % every == 0 && step < total {
                    save_checkpoint(
                        dir.join(format!("checkpoint_step{step}.t4c")),
                        model,
                        &aug.channel_means,
                        step,
                    )?;
                }
            }
        }
    }
    if let Some(dir) = run_dir {
        save_checkpoint(dir.join(CHECKPOINT_FILE), model, &aug.channel_means, step)?;
    }
    Ok(FitReport {
        log,
        channel_means: aug.channel_means,
        total_steps: total,
    })
}
