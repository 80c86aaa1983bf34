use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv;
use crate::labels::BoundaryMode;

/// Residual encoder: one entry per stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_channels: usize,
    pub stage_channels: Vec<usize>,
    /// Output stride m_i of each stage.
    pub stage_strides: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            stage_channels: vec![64, 128, 256, 512],
            stage_strides: vec![4, 8, 16, 32],
            blocks_per_stage: vec![2, 2, 2, 2],
        }
    }
}

/// How the j-th spatial-aware pooling of a stage is realised (stride s = 2^j).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KernelMode {
    /// Average pooling, kernel s, no padding.
    KernelEqualsStride,
    /// Average pooling, kernel 2s+1, padding s.
    KernelTwoSPlusOne,
    /// Depthwise 3×3 conv with dilation s, padding s, stride s.
    DilatedConv3x3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SapConfig {
    /// J: poolings per stage.
    pub pool_count: usize,
    /// Every stage pools down to the deepest resolution m_last·2^J.
    pub to_end: bool,
    pub kernel_mode: KernelMode,
    /// Drop pyramid levels finer than 1/8.
    pub exclude_quarter_resolution: bool,
}

impl Default for SapConfig {
    fn default() -> Self {
        Self {
            pool_count: 5,
            to_end: false,
            kernel_mode: KernelMode::KernelTwoSPlusOne,
            exclude_quarter_resolution: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BranchFusion {
    Concat,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CbsOutputSize {
    EighthScale,
    FullScale,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub sap: SapConfig,
    pub fusion_width: usize,
    pub num_classes: usize,
    pub branch_count: usize,
    pub branch_fusion: BranchFusion,
    /// `None` disables the boundary head.
    pub boundary_mode: Option<BoundaryMode>,
    pub cbs_output_size: CbsOutputSize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            sap: SapConfig::default(),
            fusion_width: 128,
            num_classes: 19,
            branch_count: 2,
            branch_fusion: BranchFusion::Concat,
            boundary_mode: Some(BoundaryMode::ClassBoundary),
            cbs_output_size: CbsOutputSize::EighthScale,
        }
    }
}

/// Where an SAP output sits: stage `stage`, pooling index `j`, divisor `r`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct SapSlot {
    pub stage: usize,
    pub j: usize,
    pub resolution: usize,
}

impl ModelConfig {
    /// Stages 8/16/32/64 at default strides, J=2, fusion width 16, K=3.
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig {
                stage_channels: vec![8, 16, 32, 64],
                ..EncoderConfig::default()
            },
            sap: SapConfig {
                pool_count: 2,
                ..SapConfig::default()
            },
            fusion_width: 16,
            num_classes: 3,
            ..Self::default()
        }
    }

    /// Stages 8/16/32/64 at strides 2/4/8/16, J=2, fusion width 32, K=3:
    /// trains on 64×64 inputs.
    pub fn micro() -> Self {
        Self {
            encoder: EncoderConfig {
                stage_channels: vec![8, 16, 32, 64],
                stage_strides: vec![2, 4, 8, 16],
                blocks_per_stage: vec![1, 1, 1, 1],
                ..EncoderConfig::default()
            },
            sap: SapConfig {
                pool_count: 2,
                ..SapConfig::default()
            },
            fusion_width: 32,
            num_classes: 3,
            ..Self::default()
        }
    }

    /// Stages 2/4/8/16 at strides 1/2/4/8, J=1: small enough for a
    /// finite-difference check on 16×16 inputs.
    pub fn gradient_micro() -> Self {
        Self {
            encoder: EncoderConfig {
                input_channels: 2,
                stage_channels: vec![2, 4, 8, 16],
                stage_strides: vec![1, 2, 4, 8],
                blocks_per_stage: vec![1, 1, 1, 1],
            },
            sap: SapConfig {
                pool_count: 1,
                ..SapConfig::default()
            },
            fusion_width: 4,
            num_classes: 3,
            ..Self::default()
        }
    }

    pub fn stages(&self) -> usize {
        self.encoder.stage_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let n = e.stage_channels.len();
        if n == 0 || e.stage_strides.len() != n || e.blocks_per_stage.len() != n {
            return Err(Error::Config(format!(
                "encoder lists must be non-empty and equally long: channels {}, strides {}, blocks {}",
                n,
                e.stage_strides.len(),
                e.blocks_per_stage.len()
            )));
        }
        if e.input_channels == 0 || e.stage_channels.contains(&0) || e.blocks_per_stage.contains(&0) {
            return Err(Error::Config("channel and block counts must be positive".into()));
        }
        if !e.stage_strides.iter().all(|s| s.is_power_of_two()) {
            return Err(Error::Config(format!(
                "stage strides {:?} must be powers of two",
                e.stage_strides
            )));
        }
        if e.stage_strides.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "stage strides {:?} must be strictly increasing",
                e.stage_strides
            )));
        }
        if e.stage_strides[0] > 4 {
            return Err(Error::Config(format!(
                "first stage stride {} must be 1, 2 or 4",
                e.stage_strides[0]
            )));
        }
        if self.sap.pool_count > 16 {
            return Err(Error::Config(format!("pool count {} exceeds 16", self.sap.pool_count)));
        }
        if self.fusion_width == 0 {
            return Err(Error::Config("fusion_width must be at least 1".into()));
        }
        if self.num_classes == 0 || self.num_classes > 253 {
            return Err(Error::Config(format!(
                "num_classes {} must be in 1..=253",
                self.num_classes
            )));
        }
        if !(1..=2).contains(&self.branch_count) {
            return Err(Error::Config(format!(
                "branch_count {} must be 1 or 2",
                self.branch_count
            )));
        }
        let levels = self.pyramid_resolutions();
        let (lo, hi) = (self.output_stride(), self.deepest_resolution());
        let mut r = lo;
        while r <= hi {
            if !levels.contains(&r) {
                return Err(Error::Config(format!(
                    "missing pyramid level 1/{r}: the decoder needs every power of two from 1/{lo} to 1/{hi}"
                )));
            }
            r *= 2;
        }
        Ok(())
    }

    /// Required divisor of the input height and width: m_last·2^J.
    pub fn required_multiple(&self) -> usize {
        self.deepest_resolution()
    }

    pub fn deepest_resolution(&self) -> usize {
        self.encoder.stage_strides.last().copied().unwrap_or(1) << self.sap.pool_count
    }

    /// Number of poolings applied to stage `i`.
    pub fn stage_pool_count(&self, i: usize) -> usize {
        if self.sap.to_end {
            let last = *self.encoder.stage_strides.last().expect("validated");
            self.sap.pool_count + (last / self.encoder.stage_strides[i]).trailing_zeros() as usize
        } else {
            self.sap.pool_count
        }
    }

    /// Finest divisor kept in the pyramid; the heads run at this stride.
    pub fn output_stride(&self) -> usize {
        if self.sap.exclude_quarter_resolution {
            8
        } else {
            self.encoder.stage_strides[0]
        }
    }

    /// Every SAP output that survives the resolution filter, ordered by
    /// stage then j.
    pub fn sap_slots(&self) -> Vec<SapSlot> {
        let floor = self.output_stride();
        let mut out = Vec::new();
        for (stage, &m) in self.encoder.stage_strides.iter().enumerate() {
            for j in 0..=self.stage_pool_count(stage) {
                let resolution = m << j;
                if resolution >= floor {
                    out.push(SapSlot { stage, j, resolution });
                }
            }
        }
        out
    }

    /// SAP slots grouped by resolution, ascending.
    pub fn pyramid_groups(&self) -> BTreeMap<usize, Vec<SapSlot>> {
        let mut groups: BTreeMap<usize, Vec<SapSlot>> = BTreeMap::new();
        for slot in self.sap_slots() {
            groups.entry(slot.resolution).or_default().push(slot);
        }
        groups
    }

    pub fn pyramid_resolutions(&self) -> Vec<usize> {
        self.pyramid_groups().into_keys().collect()
    }

    /// Resolutions visited by each decoder branch after its start level,
    /// coarse to fine.
    pub fn decoder_ladder(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut r = self.deepest_resolution() / 2;
        while r >= self.output_stride() {
            out.push(r);
            r /= 2;
        }
        out
    }

    pub fn boundary_classes(&self) -> Option<usize> {
        self.boundary_mode.map(|m| match m {
            BoundaryMode::ClassBoundary => self.num_classes + 1,
            BoundaryMode::ZeroOneBoundary => 2,
        })
    }

    /// Stride of the boundary logits relative to the input.
    pub fn boundary_stride(&self) -> usize {
        match self.cbs_output_size {
            CbsOutputSize::EighthScale => self.output_stride(),
            CbsOutputSize::FullScale => 1,
        }
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let multiple = self.required_multiple();
        if height == 0 || width == 0 || !height.is_multiple_of(multiple) || !width.is_multiple_of(multiple) {
            return Err(Error::Divisibility {
                height,
                width,
                multiple,
            });
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let e = &self.encoder;
        let boundary = match self.boundary_mode {
            None => "off".to_string(),
            Some(m) => boundary_mode_name(m).to_string(),
        };
        [
            ("model.input_channels", e.input_channels.to_string()),
            ("model.stage_channels", kv::join(&e.stage_channels)),
            ("model.stage_strides", kv::join(&e.stage_strides)),
            ("model.blocks_per_stage", kv::join(&e.blocks_per_stage)),
            ("model.sap.pool_count", self.sap.pool_count.to_string()),
            ("model.sap.to_end", self.sap.to_end.to_string()),
            ("model.sap.kernel_mode", self.sap.kernel_mode.to_string()),
            (
                "model.sap.exclude_quarter_resolution",
                self.sap.exclude_quarter_resolution.to_string(),
            ),
            ("model.fusion_width", self.fusion_width.to_string()),
            ("model.num_classes", self.num_classes.to_string()),
            ("model.branch_count", self.branch_count.to_string()),
            ("model.branch_fusion", self.branch_fusion.to_string()),
            ("model.boundary_mode", boundary),
            ("model.cbs_output_size", self.cbs_output_size.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Applies one `model.*` key; unknown keys are errors.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let e = &mut self.encoder;
        match key {
            "model.input_channels" => e.input_channels = kv::value(key, raw)?,
            "model.stage_channels" => e.stage_channels = kv::list(key, raw)?,
            "model.stage_strides" => e.stage_strides = kv::list(key, raw)?,
            "model.blocks_per_stage" => e.blocks_per_stage = kv::list(key, raw)?,
            "model.sap.pool_count" => self.sap.pool_count = kv::value(key, raw)?,
            "model.sap.to_end" => self.sap.to_end = kv::value(key, raw)?,
            "model.sap.kernel_mode" => self.sap.kernel_mode = kv::value(key, raw)?,
            "model.sap.exclude_quarter_resolution" => self.sap.exclude_quarter_resolution = kv::value(key, raw)?,
            "model.fusion_width" => self.fusion_width = kv::value(key, raw)?,
            "model.num_classes" => self.num_classes = kv::value(key, raw)?,
            "model.branch_count" => self.branch_count = kv::value(key, raw)?,
            "model.branch_fusion" => self.branch_fusion = kv::value(key, raw)?,
            "model.boundary_mode" => self.boundary_mode = parse_boundary_mode(raw)?,
            "model.cbs_output_size" => self.cbs_output_size = kv::value(key, raw)?,
            _ => return Err(kv::unknown_key(key)),
        }
        Ok(())
    }

    pub fn from_kv(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn boundary_mode_name(mode: BoundaryMode) -> &'static str {
    match mode {
        BoundaryMode::ClassBoundary => "class",
        BoundaryMode::ZeroOneBoundary => "zero_one",
    }
}

/// `class`, `zero_one`, or `off`.
pub fn parse_boundary_mode(raw: &str) -> Result<Option<BoundaryMode>> {
    match raw {
        "class" => Ok(Some(BoundaryMode::ClassBoundary)),
        "zero_one" => Ok(Some(BoundaryMode::ZeroOneBoundary)),
        "off" => Ok(None),
        other => Err(Error::Parse(format!(
            "unknown boundary mode `{other}` (expected class, zero_one or off)"
        ))),
    }
}

macro_rules! named_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    other => Err(format!(
                        "unknown value `{other}`, expected one of: {}",
                        [$($name),+].join(", ")
                    )),
                }
            }
        }
    };
}

named_enum!(KernelMode {
    KernelEqualsStride => "equals_stride",
    KernelTwoSPlusOne => "two_s_plus_one",
    DilatedConv3x3 => "dilated_conv3x3",
});

named_enum!(BranchFusion {
    Concat => "concat",
    None => "none",
});

named_enum!(CbsOutputSize {
    EighthScale => "eighth",
    FullScale => "full",
});
