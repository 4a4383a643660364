//! Head checkpoints: a JSON descriptor plus one f32 tensor file per parameter.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::head::{AlignmentHead, HeadSpec, Param};
use crate::error::{Error, Result};
use crate::exchange::{f32_tensor, read_json, read_tensor, write_json, write_tensor, FORMAT_VERSION};
use crate::numerics::Tensor2D;

pub const CHECKPOINT_FILE: &str = "head.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointDescriptor {
    pub format_version: u32,
    pub spec: HeadSpec,
    pub normalize_output: bool,
    /// Optimizer steps taken to produce the parameters.
    pub steps: usize,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint(dir: &Path, head: &AlignmentHead, steps: usize) -> Result<CheckpointDescriptor> {
    let params_dir = dir.join("params");
    std::fs::create_dir_all(&params_dir).map_err(|e| Error::io(&params_dir, e))?;
    let mut entries = Vec::new();
    for p in head.params() {
        let (rows, cols) = p.value.shape();
        let file = format!("params/{}.fmsg", p.name);
        write_tensor(
            dir.join(&file),
            &f32_tensor(vec![rows as u32, cols as u32], p.value.data())?,
        )?;
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: [rows, cols],
            file,
        });
    }
    let desc = CheckpointDescriptor {
        format_version: FORMAT_VERSION,
        spec: head.spec.clone(),
        normalize_output: head.normalize_output,
        steps,
        params: entries,
    };
    write_json(&dir.join(CHECKPOINT_FILE), &desc)?;
    Ok(desc)
}

pub fn load_checkpoint(dir: &Path) -> Result<(AlignmentHead, CheckpointDescriptor)> {
    let desc: CheckpointDescriptor = read_json(&dir.join(CHECKPOINT_FILE))?;
    if desc.format_version != FORMAT_VERSION {
        return Err(Error::validation(format!(
            "checkpoint format_version {} is not {FORMAT_VERSION}",
            desc.format_version
        )));
    }
    let mut params = Vec::with_capacity(desc.params.len());
    for entry in &desc.params {
        let t = read_tensor(dir.join(&entry.file))?;
        if t.dims_usize() != entry.shape {
            return Err(Error::validation(format!(
                "{}: tensor dims {:?} but descriptor says {:?}",
                entry.file,
                t.dims_usize(),
                entry.shape
            )));
        }
        let value = Tensor2D::from_vec(entry.shape[0], entry.shape[1], t.to_f64()?)?;
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("{} holds non-finite values", entry.file)));
        }
        params.push(Param {
            name: entry.name.clone(),
            value,
        });
    }
    let mut head = AlignmentHead::from_params(desc.spec.clone(), params)?;
    head.normalize_output = desc.normalize_output;
    Ok((head, desc))
}
