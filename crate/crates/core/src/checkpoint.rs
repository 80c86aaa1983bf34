//! Model checkpoints: a flat-text header followed by T4 records.
//!
//! Layout: `MAGIC`, a u64 LE header length, the header (`key = value`
//! lines: model config, channel means, step, record names in order), then
//! one T4 record per name. Parameters are stored under their own names and
//! BN running statistics under `<site>.running_mean` / `<site>.running_var`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kv;
use crate::model::{build_model, Model, ModelConfig};
use crate::t4::T4;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MSFCKPT\n";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub channel_means: Vec<f32>,
    pub step: usize,
}

fn records(model: &Model<f32>) -> Vec<(String, Tensor<f32>)> {
    let mut out: Vec<(String, Tensor<f32>)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value().clone()))
        .collect();
    for site in model.bn_sites() {
        let n = site.state.running_mean.len();
        out.push((
            format!("{}.running_mean", site.name),
            Tensor::new(&[n], site.state.running_mean.clone()).expect("sized"),
        ));
        out.push((
            format!("{}.running_var", site.name),
            Tensor::new(&[n], site.state.running_var.clone()).expect("sized"),
        ));
    }
    out
}

/// Serializes an unfolded model. Folded models are refused because their
/// parameter set no longer matches a freshly built model.
pub fn encode_checkpoint(model: &Model<f32>, channel_means: &[f32], step: usize) -> Result<Vec<u8>> {
    if model.is_folded() {
        return Err(Error::Config(
            "refusing to checkpoint a model with folded batch norms".into(),
        ));
    }
    let recs = records(model);
    let mut header = model.config().to_kv();
    header.push(("checkpoint.step".into(), step.to_string()));
    header.push(("checkpoint.channel_means".into(), kv::join(channel_means)));
    let names: Vec<&str> = recs.iter().map(|(n, _)| n.as_str()).collect();
    header.push(("checkpoint.records".into(), names.join(",")));
    let text = kv::render(&header);

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for (_, t) in &recs {
        out.extend_from_slice(&T4::from_tensor(t).encode());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut pos = MAGIC.len();
    let len_bytes = bytes.get(pos..pos + 8).ok_or(Error::Truncated {
        expected: pos + 8,
        found: bytes.len(),
    })?;
    let len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes")) as usize;
    pos += 8;
    let text = bytes.get(pos..pos + len).ok_or(Error::Truncated {
        expected: pos + len,
        found: bytes.len(),
    })?;
    pos += len;
    let text = std::str::from_utf8(text).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;

    let mut model_pairs = Vec::new();
    let (mut step, mut means, mut names) = (None, None, None);
    for (k, v) in kv::parse(text)? {
        match k.as_str() {
            "checkpoint.step" => step = Some(kv::value::<usize>(&k, &v)?),
            "checkpoint.channel_means" => means = Some(if v.is_empty() { Vec::new() } else { kv::list(&k, &v)? }),
            "checkpoint.records" => names = Some(v.split(',').map(str::to_string).collect::<Vec<_>>()),
            _ => model_pairs.push((k, v)),
        }
    }
    let missing = |what: &str| Error::Format(format!("checkpoint header lacks `{what}`"));
    let step = step.ok_or_else(|| missing("checkpoint.step"))?;
    let channel_means = means.ok_or_else(|| missing("checkpoint.channel_means"))?;
    let names = names.ok_or_else(|| missing("checkpoint.records"))?;
    let config = ModelConfig::from_kv(&model_pairs)?;
    let mut model: Model<f32> = build_model(&config, 0)?;

    let expected: Vec<String> = records(&model).into_iter().map(|(n, _)| n).collect();
    if names != expected {
        return Err(Error::Format(format!(
            "checkpoint lists {} records, the configured model has {}",
            names.len(),
            expected.len()
        )));
    }
    let n_params = model.params().len();
    for (i, name) in names.iter().enumerate() {
        let (t4, used) = T4::decode_prefix(&bytes[pos..])?;
        pos += used;
        let tensor = t4
            .to_tensor()
            .map_err(|e| Error::Format(format!("record `{name}`: {e}")))?;
        if i < n_params {
            model.set_param(i, tensor)?;
        } else {
            let site = &mut model.bn_sites_mut()[(i - n_params) / 2];
            let slot = if (i - n_params).is_multiple_of(2) {
                &mut site.state.running_mean
            } else {
                &mut site.state.running_var
            };
            if tensor.numel() != slot.len() {
                return Err(Error::Shape(format!(
                    "record `{name}` has {} values, expected {}",
                    tensor.numel(),
                    slot.len()
                )));
            }
            *slot = tensor.into_data();
        }
    }
    if pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - pos
        )));
    }
    Ok(Checkpoint {
        model,
        channel_means,
        step,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model<f32>, channel_means: &[f32], step: usize) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, channel_means, step)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
