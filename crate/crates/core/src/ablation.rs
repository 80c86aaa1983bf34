//! Named configuration sweeps trained and scored on a dataset.

use std::fmt::Write as _;

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::eval::{count_flops, evaluate_model, miou};
use crate::labels::BoundaryMode;
use crate::model::{build_model, BranchFusion, CbsOutputSize, KernelMode, ModelConfig};
use crate::train::{fit, LossConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sweep {
    /// SAP pooling count J per stage, or `end` for pooling every stage to the
    /// deepest resolution.
    PoolingCount,
    KernelMode,
    /// Boundary width ε, optionally prefixed by CBS output size (`full:3`).
    BoundaryWidth,
    /// `<branches>:<fusion>`, e.g. `2:concat`.
    BranchFusion,
    BoundaryMode,
    /// `baseline` (J=0, one branch, no boundary head), `mfm`, `mfm_cbs`.
    Modules,
}

impl Sweep {
    pub const ALL: [Sweep; 6] = [
        Sweep::PoolingCount,
        Sweep::KernelMode,
        Sweep::BoundaryWidth,
        Sweep::BranchFusion,
        Sweep::BoundaryMode,
        Sweep::Modules,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Sweep::PoolingCount => "pooling-count",
            Sweep::KernelMode => "kernel-mode",
            Sweep::BoundaryWidth => "boundary-width",
            Sweep::BranchFusion => "branch-fusion",
            Sweep::BoundaryMode => "boundary-mode",
            Sweep::Modules => "modules",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Sweep::PoolingCount => &["0", "1", "2", "3", "4", "5", "end"],
            Sweep::KernelMode => &["dilated_conv3x3", "equals_stride", "two_s_plus_one"],
            Sweep::BoundaryWidth => &["full:1", "full:3", "full:5", "eighth:1", "eighth:3", "eighth:5"],
            Sweep::BranchFusion => &["1:none", "1:concat", "2:none", "2:concat"],
            Sweep::BoundaryMode => &["zero_one", "class"],
            Sweep::Modules => &["baseline", "mfm", "mfm_cbs"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

impl std::str::FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Sweep::ALL.into_iter().find(|w| w.name() == s).ok_or_else(|| {
            let names: Vec<_> = Sweep::ALL.iter().map(|w| w.name()).collect();
            Error::Parse(format!("unknown sweep `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

/// One point of a sweep; `Err` carries the reason it cannot be built.
#[derive(Clone, Debug)]
pub struct Variant {
    pub value: String,
    pub config: std::result::Result<(ModelConfig, LossConfig), String>,
}

fn bad_value(sweep: Sweep, value: &str) -> Error {
    Error::Parse(format!("`{value}` is not a valid {} value", sweep.name()))
}

/// Applies `value` to the base configuration. Unparseable values are errors;
/// parseable but unbuildable ones become infeasible variants.
pub fn variant(sweep: Sweep, value: &str, base: &ModelConfig, loss: &LossConfig) -> Result<Variant> {
    let (mut m, mut l) = (base.clone(), loss.clone());
    match sweep {
        Sweep::PoolingCount => {
            if value == "end" {
                m.sap.to_end = true;
            } else {
                m.sap.pool_count = value.parse().map_err(|_| bad_value(sweep, value))?;
                m.sap.to_end = false;
            }
        }
        Sweep::KernelMode => m.sap.kernel_mode = value.parse::<KernelMode>().map_err(|_| bad_value(sweep, value))?,
        Sweep::BoundaryWidth => {
            let (size, width) = match value.split_once(':') {
                Some((s, w)) => (
                    Some(s.parse::<CbsOutputSize>().map_err(|_| bad_value(sweep, value))?),
                    w,
                ),
                None => (None, value),
            };
            if let Some(size) = size {
                m.cbs_output_size = size;
                l.cbs_output_size = size;
            }
            l.boundary_epsilon = width.parse().map_err(|_| bad_value(sweep, value))?;
        }
        Sweep::BranchFusion => {
            let (b, f) = value.split_once(':').ok_or_else(|| bad_value(sweep, value))?;
            m.branch_count = b.parse().map_err(|_| bad_value(sweep, value))?;
            m.branch_fusion = f.parse::<BranchFusion>().map_err(|_| bad_value(sweep, value))?;
        }
        Sweep::BoundaryMode => {
            m.boundary_mode = crate::model::parse_boundary_mode(value).map_err(|_| bad_value(sweep, value))?;
        }
        Sweep::Modules => match value {
            "baseline" | "mfm" => {
                if value == "baseline" {
                    m.sap.pool_count = 0;
                    m.sap.to_end = false;
                }
                m.boundary_mode = None;
                m.branch_count = 1;
                m.branch_fusion = BranchFusion::None;
            }
            "mfm_cbs" => {
                m.boundary_mode = Some(m.boundary_mode.unwrap_or(BoundaryMode::ClassBoundary));
                m.branch_count = 2;
                m.branch_fusion = BranchFusion::Concat;
            }
            _ => return Err(bad_value(sweep, value)),
        },
    }
    let config = match (m.validate(), l.validate()) {
        (Ok(()), Ok(())) => Ok((m, l)),
        (Err(e), _) | (_, Err(e)) => Err(e.to_string()),
    };
    Ok(Variant {
        value: value.to_string(),
        config,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub sweep: String,
    pub value: String,
    pub seed: u64,
    /// `ok` or `infeasible: <reason>`.
    pub status: String,
    pub params: Option<usize>,
    pub macs: Option<u64>,
    pub final_seg_loss: Option<f64>,
    pub train_miou: Option<f64>,
    pub val_miou: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct AblationPlan {
    pub base_model: ModelConfig,
    pub base_loss: LossConfig,
    pub train: TrainConfig,
    /// Each seed initializes the model and drives the training stream.
    pub seeds: Vec<u64>,
}

/// Trains every (value, seed) pair and scores it on both splits.
pub fn run_ablation(
    sweep: Sweep,
    values: &[String],
    plan: &AblationPlan,
    train: &[Sample],
    val: &[Sample],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for value in values {
        let v = variant(sweep, value, &plan.base_model, &plan.base_loss)?;
        for &seed in &plan.seeds {
            let mut row = AblationRow {
                sweep: sweep.name().to_string(),
                value: value.clone(),
                seed,
                status: "ok".into(),
                params: None,
                macs: None,
                final_seg_loss: None,
                train_miou: None,
                val_miou: None,
            };
            let (mc, lc) = match &v.config {
                Ok(c) => c,
                Err(reason) => {
                    row.status = format!("infeasible: {reason}");
                    rows.push(row);
                    continue;
                }
            };
            let cfg = TrainConfig {
                seed,
                ..plan.train.clone()
            };
            if let Err(e) = cfg.validate(mc.required_multiple()) {
                row.status = format!("infeasible: {e}");
                rows.push(row);
                continue;
            }
            let mut model = build_model::<f32>(mc, seed)?;
            row.params = Some(model.count_params());
            row.macs = Some(count_flops(mc, 1, cfg.augment.crop_h, cfg.augment.crop_w)?.macs);
            let report = fit(&mut model, train, &cfg, lc, None)?;
            row.final_seg_loss = report.log.last().map(|e| e.seg_loss);
            let score = |samples: &[Sample]| -> Result<Option<f64>> {
                if samples.is_empty() {
                    return Ok(None);
                }
                let cm = evaluate_model(&model, samples, &report.channel_means, lc.ignore_index)?;
                Ok(Some(miou(&cm)?.1))
            };
            row.train_miou = score(train)?;
            row.val_miou = score(val)?;
            rows.push(row);
        }
    }
    Ok(rows)
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub const CSV_HEADER: &str = "sweep,value,seed,status,params,macs,final_seg_loss,train_miou,val_miou";

/// One line per row after the header; wall-clock data is never included.
pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.sweep,
            csv_field(&r.value),
            r.seed,
            csv_field(&r.status),
            opt(&r.params),
            opt(&r.macs),
            opt(&r.final_seg_loss),
            opt(&r.train_miou),
            opt(&r.val_miou)
        );
    }
    out
}

/// Mean validation mIoU over the feasible seeds of `value`.
pub fn mean_val_miou(rows: &[AblationRow], value: &str) -> Option<f64> {
    let scores: Vec<f64> = rows
        .iter()
        .filter(|r| r.value == value)
        .filter_map(|r| r.val_miou)
        .collect();
    (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
}
