//! Residual encoder, spatial-aware pooling pyramid, multi-feature fusion,
//! dual upsampling branches and the two heads.

mod config;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{
    boundary_mode_name, parse_boundary_mode, BranchFusion, CbsOutputSize, EncoderConfig, KernelMode, ModelConfig,
    SapConfig, SapSlot,
};

use crate::autograd::{BatchStats, BnMode, BnState, Tape, Var, BN_EPS};
use crate::error::{Error, Result};
use crate::kernels::fold_batch_norm;
use crate::labels::LabelMap;
use crate::tensor::{ConvSpec, Real, Tensor};

/// A named learnable tensor. Retired parameters were absorbed by BN folding.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    value: Arc<Tensor<T>>,
    retired: bool,
}

impl<T: Real> Param<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn is_retired(&self) -> bool {
        self.retired
    }
}

#[derive(Clone, Debug)]
pub struct BnSite<T> {
    pub name: String,
    gamma: usize,
    beta: usize,
    pub state: BnState<T>,
    folded: bool,
}

impl<T> BnSite<T> {
    pub fn is_folded(&self) -> bool {
        self.folded
    }

    pub fn gamma_index(&self) -> usize {
        self.gamma
    }

    pub fn beta_index(&self) -> usize {
        self.beta
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: usize,
    bias: Option<usize>,
    spec: ConvSpec,
}

/// conv → optional pointwise conv → optional BN → optional ReLU.
#[derive(Clone, Copy, Debug)]
struct Unit {
    first: Conv,
    pointwise: Option<Conv>,
    bn: Option<usize>,
    relu: bool,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    conv1: Unit,
    conv2: Unit,
    down: Option<Unit>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    bns: Vec<BnSite<T>>,
    stem: Unit,
    stem_pool: bool,
    stages: Vec<Vec<Block>>,
    sap_convs: BTreeMap<(usize, usize), Conv>,
    fusion: BTreeMap<usize, Unit>,
    /// Per branch, one unit per `config.decoder_ladder()` level.
    branches: Vec<Vec<Unit>>,
    merge: Option<Unit>,
    seg_head: Conv,
    boundary_head: Option<Conv>,
}

struct Builder<T> {
    params: Vec<Param<T>>,
    bns: Vec<BnSite<T>>,
    rng: ChaCha8Rng,
}

impl<T: Real> Builder<T> {
    fn param(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(Param {
            name,
            value: Arc::new(value.with_requires_grad()),
            retired: false,
        });
        self.params.len() - 1
    }

    /// Kaiming-normal weights, zero bias.
    fn conv(&mut self, name: &str, spec: ConvSpec) -> Conv {
        let shape = spec.weight_shape();
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let w = Tensor::randn(&shape, (2.0 / fan_in).sqrt(), &mut self.rng);
        let weight = self.param(format!("{name}.weight"), w);
        let bias = spec
            .has_bias
            .then(|| self.param(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels])));
        Conv { weight, bias, spec }
    }

    fn bn(&mut self, name: &str, channels: usize) -> usize {
        let gamma = self.param(format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
        let beta = self.param(format!("{name}.beta"), Tensor::zeros(&[channels]));
        self.bns.push(BnSite {
            name: name.to_string(),
            gamma,
            beta,
            state: BnState::new(channels),
            folded: false,
        });
        self.bns.len() - 1
    }

    fn conv_bn(&mut self, name: &str, spec: ConvSpec, relu: bool) -> Unit {
        let first = self.conv(&format!("{name}.conv"), spec);
        let bn = self.bn(&format!("{name}.bn"), spec.out_channels);
        Unit {
            first,
            pointwise: None,
            bn: Some(bn),
            relu,
        }
    }

    /// Separable k=3 conv + BN + ReLU.
    fn separable(&mut self, name: &str, in_channels: usize, out_channels: usize) -> Unit {
        let dw = ConvSpec::new(in_channels, in_channels, 3, 1, 1).with_groups(in_channels);
        let pw = ConvSpec::new(in_channels, out_channels, 1, 1, 0);
        let first = self.conv(&format!("{name}.dw"), dw);
        let pointwise = Some(self.conv(&format!("{name}.pw"), pw));
        let bn = self.bn(&format!("{name}.bn"), out_channels);
        Unit {
            first,
            pointwise,
            bn: Some(bn),
            relu: true,
        }
    }
}

/// Deterministically initialises a model from `seed`.
pub fn build_model<T: Real>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut b = Builder {
        params: Vec::new(),
        bns: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let enc = &config.encoder;
    let c1 = enc.stage_channels[0];
    let m1 = enc.stage_strides[0];
    let stem_stride = if m1 == 1 { 1 } else { 2 };
    let stem = b.conv_bn("stem", ConvSpec::new(enc.input_channels, c1, 7, stem_stride, 3), true);
    let stem_pool = m1 == 4;

    let mut stages = Vec::new();
    let mut in_c = c1;
    for (i, (&out_c, &blocks)) in enc.stage_channels.iter().zip(&enc.blocks_per_stage).enumerate() {
        let stride = if i == 0 {
            1
        } else {
            enc.stage_strides[i] / enc.stage_strides[i - 1]
        };
        let mut stage = Vec::new();
        for k in 0..blocks {
            let name = format!("stage{}.block{k}", i + 1);
            let (s, cin) = if k == 0 { (stride, in_c) } else { (1, out_c) };
            let conv1 = b.conv_bn(&format!("{name}.conv1"), ConvSpec::new(cin, out_c, 3, s, 1), true);
            let conv2 = b.conv_bn(&format!("{name}.conv2"), ConvSpec::new(out_c, out_c, 3, 1, 1), false);
            let down = (s != 1 || cin != out_c)
                .then(|| b.conv_bn(&format!("{name}.down"), ConvSpec::new(cin, out_c, 1, s, 0), false));
            stage.push(Block { conv1, conv2, down });
        }
        stages.push(stage);
        in_c = out_c;
    }

    let mut sap_convs = BTreeMap::new();
    if config.sap.kernel_mode == KernelMode::DilatedConv3x3 {
        for slot in config.sap_slots().into_iter().filter(|s| s.j > 0) {
            let c = enc.stage_channels[slot.stage];
            let s = 1 << slot.j;
            let spec = ConvSpec::new(c, c, 3, s, s).with_groups(c).with_dilation(s);
            let conv = b.conv(&format!("sap.stage{}.j{}", slot.stage + 1, slot.j), spec);
            sap_convs.insert((slot.stage, slot.j), conv);
        }
    }

    let fw = config.fusion_width;
    let mut fusion = BTreeMap::new();
    for (r, members) in config.pyramid_groups() {
        let cin = members.iter().map(|s| enc.stage_channels[s.stage]).sum();
        fusion.insert(r, b.separable(&format!("mfm.r{r}"), cin, fw));
    }

    let ladder = config.decoder_ladder();
    let branches = (0..config.branch_count)
        .map(|k| {
            ladder
                .iter()
                .map(|r| b.separable(&format!("branch{k}.r{r}"), 2 * fw, fw))
                .collect()
        })
        .collect();
    let merge = match config.branch_fusion {
        BranchFusion::Concat => Some(b.separable("merge", config.branch_count * fw, fw)),
        BranchFusion::None => None,
    };
    let seg_head = b.conv(
        "seg_head",
        ConvSpec::new(fw, config.num_classes, 1, 1, 0).with_bias(true),
    );
    let boundary_head = config
        .boundary_classes()
        .map(|k| b.conv("boundary_head", ConvSpec::new(fw, k, 1, 1, 0).with_bias(true)));

    Ok(Model {
        config: config.clone(),
        params: b.params,
        bns: b.bns,
        stem,
        stem_pool,
        stages,
        sap_convs,
        fusion,
        branches,
        merge,
        seg_head,
        boundary_head,
    })
}

/// One SAP output O_i^j.
#[derive(Clone, Copy, Debug)]
pub struct SapOutput {
    pub slot: SapSlot,
    pub value: Var,
}

/// Fused maps F_r keyed by resolution divisor r.
#[derive(Clone, Debug)]
pub struct FusedPyramid {
    pub levels: BTreeMap<usize, Var>,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub seg_features: Var,
    pub boundary_features: Option<Var>,
    /// Each branch's finest map, before any branch fusion.
    pub branches: Vec<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    pub seg_logits: Var,
    pub boundary_logits: Option<Var>,
}

/// Leaves and batch statistics of a finished pass.
#[derive(Clone, Debug)]
pub struct Pass<T> {
    /// Tape variable of each parameter, indexed like `Model::params`.
    pub param_vars: Vec<Var>,
    /// Train-mode statistics per BN site, to be committed after the step.
    pub bn_stats: Vec<(usize, BatchStats<T>)>,
}

/// A model bound to a tape for one forward pass.
pub struct Bound<'a, T: Real> {
    model: &'a Model<T>,
    tape: &'a mut Tape<T>,
    vars: Vec<Var>,
    mode: BnMode,
    stats: Vec<(usize, BatchStats<T>)>,
}

#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub seg_logits: Tensor<T>,
    pub boundary_logits: Option<Tensor<T>>,
}

impl<T: Real> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn bn_sites(&self) -> &[BnSite<T>] {
        &self.bns
    }

    pub fn bn_sites_mut(&mut self) -> &mut [BnSite<T>] {
        &mut self.bns
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name && !p.retired)
    }

    /// Mutable access; clones the tensor if a tape still shares it.
    pub fn param_mut(&mut self, index: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[index].value)
    }

    pub fn set_param(&mut self, index: usize, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.params[index];
        if slot.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{}` is {:?}, got {:?}",
                slot.name,
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = Arc::new(value.with_requires_grad());
        Ok(())
    }

    /// Learnable scalars, excluding parameters absorbed by folding.
    pub fn count_params(&self) -> usize {
        self.params.iter().filter(|p| !p.retired).map(|p| p.value.numel()).sum()
    }

    /// Learnable scalars of the stem and residual stages.
    pub fn count_encoder_params(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.retired && (p.name.starts_with("stem.") || p.name.starts_with("stage")))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn is_folded(&self) -> bool {
        self.bns.iter().any(|s| s.folded)
    }

    /// Registers every parameter on `tape` and returns a handle for one pass.
    pub fn bind<'a>(&'a self, tape: &'a mut Tape<T>, mode: BnMode) -> Bound<'a, T> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf_shared(Arc::clone(&p.value)))
            .collect();
        Bound {
            model: self,
            tape,
            vars,
            mode,
            stats: Vec::new(),
        }
    }

    /// Binds with caller-registered parameter leaves, one per `params()`
    /// entry and shaped like it.
    pub fn bind_with<'a>(&'a self, tape: &'a mut Tape<T>, mode: BnMode, vars: Vec<Var>) -> Result<Bound<'a, T>> {
        if vars.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "{} parameter leaves for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        if let Some((p, _)) = self
            .params
            .iter()
            .zip(&vars)
            .find(|(p, v)| tape.shape(**v) != p.value.shape())
        {
            return Err(Error::Shape(format!("leaf for `{}` has the wrong shape", p.name)));
        }
        Ok(Bound {
            model: self,
            tape,
            vars,
            mode,
            stats: Vec::new(),
        })
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn commit(&mut self, stats: &[(usize, BatchStats<T>)]) {
        for (site, s) in stats {
            self.bns[*site].state.update(s);
        }
    }

    /// Merges every eval-mode BN into its preceding convolution. Returns the
    /// number of sites folded.
    pub fn fold_batch_norms(&mut self) -> Result<usize> {
        let Model {
            params,
            bns,
            stem,
            stages,
            fusion,
            branches,
            merge,
            ..
        } = self;
        let mut units: Vec<&mut Unit> = vec![stem];
        for block in stages.iter_mut().flatten() {
            units.push(&mut block.conv1);
            units.push(&mut block.conv2);
            units.extend(block.down.as_mut());
        }
        units.extend(fusion.values_mut());
        units.extend(branches.iter_mut().flatten());
        units.extend(merge.as_mut());
        let mut folded = 0;
        for unit in units {
            let Some(site_index) = unit.bn.take() else { continue };
            let site = &mut bns[site_index];
            let conv = unit.pointwise.as_mut().unwrap_or(&mut unit.first);
            let (w, b) = fold_batch_norm(
                &params[conv.weight].value,
                conv.bias.map(|i| &*params[i].value),
                params[site.gamma].value.data(),
                params[site.beta].value.data(),
                &site.state.running_mean,
                &site.state.running_var,
                BN_EPS,
            )?;
            params[conv.weight].value = Arc::new(w.with_requires_grad());
            match conv.bias {
                Some(i) => params[i].value = Arc::new(b.with_requires_grad()),
                None => {
                    let name = params[conv.weight].name.replace(".weight", ".bias");
                    params.push(Param {
                        name,
                        value: Arc::new(b.with_requires_grad()),
                        retired: false,
                    });
                    conv.bias = Some(params.len() - 1);
                    conv.spec.has_bias = true;
                }
            }
            params[site.gamma].retired = true;
            params[site.beta].retired = true;
            site.folded = true;
            folded += 1;
        }
        Ok(folded)
    }

    /// Eval-mode forward on an unrecorded tape.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Prediction<T>> {
        let mut tape = Tape::inference();
        let mut bound = self.bind(&mut tape, BnMode::Eval);
        let x = bound.tape().leaf(input.clone());
        let out = bound.forward(x)?;
        drop(bound);
        Ok(Prediction {
            seg_logits: tape.value(out.seg_logits).clone(),
            boundary_logits: out.boundary_logits.map(|v| tape.value(v).clone()),
        })
    }

    /// Converts every parameter and running statistic to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: Arc::new(p.value.cast::<U>()),
                    retired: p.retired,
                })
                .collect(),
            bns: self
                .bns
                .iter()
                .map(|s| BnSite {
                    name: s.name.clone(),
                    gamma: s.gamma,
                    beta: s.beta,
                    state: BnState {
                        running_mean: s.state.running_mean.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                        running_var: s.state.running_var.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                        momentum: s.state.momentum,
                    },
                    folded: s.folded,
                })
                .collect(),
            stem: self.stem,
            stem_pool: self.stem_pool,
            stages: self.stages.clone(),
            sap_convs: self.sap_convs.clone(),
            fusion: self.fusion.clone(),
            branches: self.branches.clone(),
            merge: self.merge,
            seg_head: self.seg_head,
            boundary_head: self.boundary_head,
        }
    }
}

impl<'a, T: Real> Bound<'a, T> {
    pub fn tape(&mut self) -> &mut Tape<T> {
        self.tape
    }

    pub fn param_var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn finish(self) -> Pass<T> {
        Pass {
            param_vars: self.vars,
            bn_stats: self.stats,
        }
    }

    fn conv(&mut self, conv: &Conv, x: Var) -> Result<Var> {
        let bias = conv.bias.map(|i| self.vars[i]);
        self.tape.conv2d(x, self.vars[conv.weight], bias, &conv.spec)
    }

    fn unit(&mut self, unit: &Unit, x: Var) -> Result<Var> {
        let mut y = self.conv(&unit.first, x)?;
        if let Some(pw) = &unit.pointwise {
            y = self.conv(pw, y)?;
        }
        if let Some(site_index) = unit.bn {
            let site = &self.model.bns[site_index];
            let (g, b) = (self.vars[site.gamma], self.vars[site.beta]);
            y = match self.mode {
                BnMode::Train => {
                    let (out, stats) = self.tape.batch_norm_train(y, g, b, BN_EPS)?;
                    self.stats.push((site_index, stats));
                    out
                }
                BnMode::Eval => self.tape.batch_norm_eval(y, g, b, &site.state, BN_EPS)?,
            };
        }
        if unit.relu {
            y = self.tape.relu(y)?;
        }
        Ok(y)
    }

    fn check_input(&self, x: Var) -> Result<()> {
        let (_, c, h, w) = self.tape.value(x).dims4()?;
        let cfg = &self.model.config;
        if c != cfg.encoder.input_channels {
            return Err(Error::Shape(format!(
                "input has {c} channels, model expects {}",
                cfg.encoder.input_channels
            )));
        }
        cfg.check_input(h, w)
    }

    /// Stage outputs B_i.
    pub fn encoder_forward(&mut self, input: Var) -> Result<Vec<Var>> {
        self.check_input(input)?;
        let model = self.model;
        let mut x = self.unit(&model.stem, input)?;
        if model.stem_pool {
            x = self.tape.max_pool2d(x, 3, 2, 1)?;
        }
        let mut outputs = Vec::with_capacity(model.stages.len());
        for stage in &model.stages {
            for block in stage {
                let y = self.unit(&block.conv1, x)?;
                let y = self.unit(&block.conv2, y)?;
                let skip = match &block.down {
                    Some(d) => self.unit(d, x)?,
                    None => x,
                };
                let sum = self.tape.add(y, skip)?;
                x = self.tape.relu(sum)?;
            }
            outputs.push(x);
        }
        Ok(outputs)
    }

    /// O_i^j for every retained slot; O_i^0 is B_i itself.
    pub fn sap_expand(&mut self, stage_outputs: &[Var]) -> Result<Vec<SapOutput>> {
        let model = self.model;
        let slots = model.config.sap_slots();
        let mut out = Vec::with_capacity(slots.len());
        for slot in slots {
            let b = stage_outputs[slot.stage];
            let value = if slot.j == 0 {
                b
            } else {
                let s = 1 << slot.j;
                match model.config.sap.kernel_mode {
                    KernelMode::KernelTwoSPlusOne => self.tape.avg_pool2d(b, 2 * s + 1, s, s)?,
                    KernelMode::KernelEqualsStride => self.tape.avg_pool2d(b, s, s, 0)?,
                    KernelMode::DilatedConv3x3 => {
                        let conv = model.sap_convs[&(slot.stage, slot.j)];
                        self.conv(&conv, b)?
                    }
                }
            };
            out.push(SapOutput { slot, value });
        }
        Ok(out)
    }

    /// Concatenates same-resolution outputs and fuses each group.
    pub fn mfm_fuse(&mut self, outputs: &[SapOutput]) -> Result<FusedPyramid> {
        let mut groups: BTreeMap<usize, Vec<Var>> = BTreeMap::new();
        for o in outputs {
            groups.entry(o.slot.resolution).or_default().push(o.value);
        }
        let mut levels = BTreeMap::new();
        for (r, unit) in &self.model.fusion {
            let members = groups
                .get(r)
                .filter(|m| !m.is_empty())
                .ok_or_else(|| Error::Config(format!("resolution group 1/{r} is empty")))?;
            let cat = if members.len() == 1 {
                members[0]
            } else {
                self.tape.concat_channels(members)?
            };
            levels.insert(*r, self.unit(unit, cat)?);
        }
        Ok(FusedPyramid { levels })
    }

    pub fn decoder_forward(&mut self, pyramid: &FusedPyramid) -> Result<DecoderOutput> {
        let model = self.model;
        let cfg = &model.config;
        let deepest = cfg.deepest_resolution();
        let level = |r: usize| {
            pyramid
                .levels
                .get(&r)
                .copied()
                .ok_or_else(|| Error::Config(format!("missing pyramid level 1/{r}")))
        };
        let start = level(deepest)?;
        let ladder = cfg.decoder_ladder();
        let mut finals = Vec::with_capacity(model.branches.len());
        for branch in &model.branches {
            let mut x = start;
            for (unit, &r) in branch.iter().zip(&ladder) {
                let skip = level(r)?;
                let (_, _, h, w) = self.tape.value(skip).dims4()?;
                let up = self.tape.bilinear_resize(x, h, w)?;
                let cat = self.tape.concat_channels(&[up, skip])?;
                x = self.unit(unit, cat)?;
            }
            finals.push(x);
        }
        let seg_features = match &model.merge {
            Some(unit) => {
                let cat = if finals.len() == 1 {
                    finals[0]
                } else {
                    self.tape.concat_channels(&finals)?
                };
                self.unit(unit, cat)?
            }
            None => finals[0],
        };
        let boundary_features = cfg.boundary_mode.map(|_| *finals.last().expect("at least one branch"));
        Ok(DecoderOutput {
            seg_features,
            boundary_features,
            branches: finals,
        })
    }

    pub fn heads(&mut self, decoded: &DecoderOutput, height: usize, width: usize) -> Result<ModelOutput> {
        let model = self.model;
        let seg = self.conv(&model.seg_head, decoded.seg_features)?;
        let seg_logits = self.tape.bilinear_resize(seg, height, width)?;
        let boundary_logits = match (&model.boundary_head, decoded.boundary_features) {
            (Some(head), Some(features)) => {
                let b = self.conv(head, features)?;
                Some(match model.config.cbs_output_size {
                    CbsOutputSize::EighthScale => b,
                    CbsOutputSize::FullScale => self.tape.bilinear_resize(b, height, width)?,
                })
            }
            _ => None,
        };
        Ok(ModelOutput {
            seg_logits,
            boundary_logits,
        })
    }

    pub fn forward(&mut self, input: Var) -> Result<ModelOutput> {
        let (_, _, h, w) = self.tape.value(input).dims4()?;
        let stages = self.encoder_forward(input)?;
        let sap = self.sap_expand(&stages)?;
        let pyramid = self.mfm_fuse(&sap)?;
        let decoded = self.decoder_forward(&pyramid)?;
        self.heads(&decoded, h, w)
    }
}

/// Per-pixel argmax over the channel axis of N×K×H×W logits.
pub fn argmax_labels<T: Real>(logits: &Tensor<T>) -> Result<Vec<LabelMap>> {
    let (n, k, h, w) = logits.dims4()?;
    if k > 255 {
        return Err(Error::Shape(format!("{k} classes do not fit in u8 labels")));
    }
    let plane = h * w;
    let data = logits.data();
    (0..n)
        .map(|i| {
            let base = i * k * plane;
            let ids = (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if data[base + c * plane + p] > data[base + best * plane + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap::new(h, w, ids)
        })
        .collect()
}
