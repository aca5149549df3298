//! Binary checkpoints.
//!
//! Layout: ASCII `DENC`, `u32` LE version, `u64` LE header length, a UTF-8
//! JSON header `{"tensors": [{"name", "shape", "offset"}]}`, then the
//! payload of little-endian `f32` values. `offset` counts bytes from the
//! start of the payload.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{EstimatorConfig, EstimatorParams};
use crate::params::ParamSet;
use crate::selector::{SelectorConfig, SelectorParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DENC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub tensors: Vec<TensorEntry>,
}

/// Serializes both parameter sets, estimator first.
pub fn encode(estimator: &ParamSet, selector: &ParamSet) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for e in estimator.iter().chain(selector.iter()) {
        tensors.push(TensorEntry {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for &v in e.value.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header { tensors }).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: usize, len: usize, what: &str) -> Result<&'a [u8]> {
    at.checked_add(len)
        .and_then(|end| bytes.get(at..end))
        .ok_or_else(|| Error::Length(format!("checkpoint truncated in {what}: need {len} bytes at {at}, have {}", bytes.len())))
}

/// Every named tensor, in file order. Nothing is returned unless the whole
/// file checks out.
pub fn decode(bytes: &[u8]) -> Result<ParamSet> {
    if take(bytes, 0, 4, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic".into()));
    }
    let version = u32::from_le_bytes(take(bytes, 4, 4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(take(bytes, 8, 8, "header length")?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| Error::Length("header length overflows".into()))?;
    let header: Header =
        serde_json::from_slice(take(bytes, 16, header_len, "header")?).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    let payload = &bytes[16 + header_len..];
    let mut names = BTreeSet::new();
    let mut spans = Vec::new();
    for t in &header.tensors {
        if !names.insert(t.name.as_str()) {
            return Err(Error::Format(format!("tensor `{}` appears twice", t.name)));
        }
        let len = t.shape.iter().product::<usize>() * 4;
        let start = usize::try_from(t.offset).map_err(|_| Error::Length(format!("offset of `{}` overflows", t.name)))?;
        take(payload, start, len, &format!("tensor `{}`", t.name))?;
        spans.push((start, start + len, t.name.as_str()));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[0].1 > w[1].0 {
            return Err(Error::Format(format!("tensors `{}` and `{}` overlap", w[0].2, w[1].2)));
        }
    }
    let mut out = ParamSet::new();
    for t in &header.tensors {
        let start = t.offset as usize;
        let count: usize = t.shape.iter().product();
        let data = payload[start..start + 4 * count]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push(t.name.clone(), Tensor::new(t.shape.clone(), data)?);
    }
    Ok(out)
}

/// Splits decoded tensors into the two networks described by the configs.
pub fn restore(params: ParamSet, est_cfg: &EstimatorConfig, sel_cfg: SelectorConfig) -> Result<(EstimatorParams, SelectorParams)> {
    let (mut est, mut sel) = (ParamSet::new(), ParamSet::new());
    for e in params.iter() {
        let target = if e.name.starts_with("selector.") { &mut sel } else { &mut est };
        target.push(e.name.clone(), e.value.clone());
    }
    Ok((EstimatorParams::from_params(est_cfg, est)?, SelectorParams::from_params(sel_cfg, sel)?))
}

pub fn save_checkpoint(path: &Path, estimator: &EstimatorParams, selector: &SelectorParams) -> Result<()> {
    std::fs::write(path, encode(estimator.params(), selector.params())?)?;
    Ok(())
}

pub fn load_checkpoint(
    path: &Path,
    est_cfg: &EstimatorConfig,
    sel_cfg: SelectorConfig,
) -> Result<(EstimatorParams, SelectorParams)> {
    restore(decode(&std::fs::read(path)?)?, est_cfg, sel_cfg)
}
