//! Versioned model checkpoints.
//!
//! Layout: a magic line, a single-line JSON header (model + svg configs,
//! vocabulary content hash, tensor manifest), then the tensors' raw f64
//! little-endian row-major bytes concatenated in manifest order. The vocab
//! itself is not embedded — loading takes the vocabulary as an argument and
//! refuses one whose content hash differs from the hash recorded at save
//! time. External embedding stores are runtime inputs and are likewise not
//! part of a checkpoint.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, VulnModel};
use crate::error::{Error, Result};
use crate::svg::SvgConfig;
use crate::tokenizer::Vocab;

pub const CHECKPOINT_MAGIC: &str = "vulnscope-ckpt/1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    svg: SvgConfig,
    vocab_hash: String,
    tensors: Vec<TensorMeta>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

pub fn save_checkpoint(model: &VulnModel, path: &Path) -> Result<()> {
    let params = model.params();
    let tensors: Vec<TensorMeta> = (0..params.len())
        .map(|i| {
            let v = params.value_at(i);
            TensorMeta {
                name: params.name_at(i).to_string(),
                rows: v.nrows(),
                cols: v.ncols(),
            }
        })
        .collect();
    let header = Header {
        config: model.config().clone(),
        svg: model.svg_config().clone(),
        vocab_hash: model.vocab().content_hash(),
        tensors,
    };
    let header_json = serde_json::to_string(&header)
        .map_err(|e| Error::format(format!("serializing checkpoint header: {e}")))?;

    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let write = |out: &mut std::io::BufWriter<std::fs::File>, bytes: &[u8]| {
        out.write_all(bytes).map_err(|e| Error::io(path, e))
    };
    write(&mut out, CHECKPOINT_MAGIC.as_bytes())?;
    write(&mut out, b"\n")?;
    write(&mut out, header_json.as_bytes())?;
    write(&mut out, b"\n")?;
    for i in 0..params.len() {
        for v in params.value_at(i).iter() {
            write(&mut out, &v.to_le_bytes())?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Restores a model. `vocab` must be the vocabulary the checkpoint was
/// saved with — its content hash is compared against the recorded one, so
/// a model can never silently run over token ids it was not trained on.
pub fn load_checkpoint(path: &Path, vocab: Vocab) -> Result<VulnModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl1 = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format("checkpoint has no magic line"))?;
    let magic = std::str::from_utf8(&bytes[..nl1])
        .map_err(|_| Error::format("checkpoint magic is not UTF-8"))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(format!(
            "expected `{CHECKPOINT_MAGIC}`, found `{magic}`"
        )));
    }
    let rest = &bytes[nl1 + 1..];
    let nl2 = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format("checkpoint has no header line"))?;
    let header: Header = serde_json::from_slice(&rest[..nl2])
        .map_err(|e| Error::format(format!("parsing checkpoint header: {e}")))?;

    let actual_hash = vocab.content_hash();
    if header.vocab_hash != actual_hash {
        return Err(Error::format(format!(
            "vocabulary mismatch: checkpoint was saved with vocab hash {}, \
             the supplied vocabulary hashes to {actual_hash}",
            header.vocab_hash
        )));
    }

    let mut model = VulnModel::new(header.config, header.svg, vocab)?;
    let params = model.params();
    if header.tensors.len() != params.len() {
        return Err(Error::format(format!(
            "checkpoint lists {} tensors, the configuration defines {}",
            header.tensors.len(),
            params.len()
        )));
    }
    for (i, meta) in header.tensors.iter().enumerate() {
        let expected = params.value_at(i);
        if meta.name != params.name_at(i) || (meta.rows, meta.cols) != expected.dim() {
            return Err(Error::format(format!(
                "tensor {i}: checkpoint has `{}` ({}×{}), configuration defines `{}` {:?}",
                meta.name,
                meta.rows,
                meta.cols,
                params.name_at(i),
                expected.dim()
            )));
        }
    }

    let data = &rest[nl2 + 1..];
    let expected_len: usize = header.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
    if data.len() != expected_len {
        return Err(Error::format(format!(
            "checkpoint payload is {} bytes, manifest needs {expected_len}",
            data.len()
        )));
    }
    let mut offset = 0;
    for (i, meta) in header.tensors.iter().enumerate() {
        let n = meta.rows * meta.cols;
        let values: Vec<f64> = data[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        offset += n * 8;
        *model.params_mut().value_at_mut(i) =
            Array2::from_shape_vec((meta.rows, meta.cols), values).expect("shape matches len");
    }
    Ok(model)
}
