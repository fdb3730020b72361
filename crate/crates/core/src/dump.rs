//! Attention-map inspection artifacts. For one sample the dump writes every
//! mutual-affinity map, the softmaxed attention weights of both directions,
//! and each injection gap's word-attention as grayscale heatmaps, plus a raw
//! tensor file in the checkpoint container format that round-trips the exact
//! floating-point values.

use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::ckpt::{save_records, TensorRecord};
use crate::model::{Model, ModelOutputs};
use crate::pgm::{heatmap_bytes, write_pgm};
use crate::{Error, Result};

/// File name of the raw tensor dump.
pub const RAW_DUMP_FILE: &str = "tensors.bin";

fn record_of(name: &str, t: &Tensor) -> TensorRecord {
    TensorRecord {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        data: t.to_vec(),
    }
}

fn heatmap_of(dir: &Path, stem: &str, t: &Tensor) -> Result<PathBuf> {
    let (h, w) = match *t.shape() {
        [h, w] => (h, w),
        [1, h, w] => (h, w),
        ref s => {
            return Err(Error::shape(
                "attention heatmap",
                format!("expected a matrix, got rank-{} tensor {s:?}", s.len()),
            ))
        }
    };
    let path = dir.join(format!("{stem}.pgm"));
    write_pgm(&path, w, h, &heatmap_bytes(&t.to_vec()))?;
    Ok(path)
}

/// Runs one inference forward pass and writes all attention artifacts into
/// `out_dir`. Returns the written paths (heatmaps first, raw dump last).
pub fn dump_attention(
    model: &Model,
    image: &Tensor,
    tokens: &[usize],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let out = model.forward(image, tokens, false)?;
    dump_outputs(&out, out_dir)
}

/// Writes the artifacts for an already-computed forward pass.
pub fn dump_outputs(out: &ModelOutputs, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::new();
    let mut records = Vec::new();
    let mut emit = |stem: &str, t: &Tensor, paths: &mut Vec<PathBuf>| -> Result<()> {
        paths.push(heatmap_of(out_dir, stem, t)?);
        records.push(record_of(stem, t));
        Ok(())
    };

    for (i, state) in out.states.iter().enumerate() {
        let layer = i + 1;
        emit(&format!("layer{layer}_mutual"), &state.logits_lav, &mut paths)?;
        emit(&format!("layer{layer}_lav"), &state.lav_weights, &mut paths)?;
        emit(&format!("layer{layer}_val"), &state.val_weights, &mut paths)?;
    }
    for (g, attn) in out.imi_attn.iter().enumerate() {
        if let Some(a) = attn {
            emit(&format!("gap{}_imi", g + 1), a, &mut paths)?;
        }
    }
    emit("mask", &out.mask, &mut paths)?;

    let raw = out_dir.join(RAW_DUMP_FILE);
    save_records(&raw, "", &records)?;
    paths.push(raw);
    Ok(paths)
}
