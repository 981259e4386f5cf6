//! Checkpoint file: an 8-byte little-endian header length, a JSON header
//! naming every tensor and its shape, then the tensors as little-endian f32.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::Vocab;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

const FORMAT: &str = "kvlbert-f32-v1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    config: ModelConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

pub fn write<W: Write>(mut w: W, params: &ModelParams, vocab: &Vocab) -> Result<()> {
    if vocab.rows() != params.vocab_rows() {
        return Err(Error::Dimension {
            context: "checkpoint vocabulary rows",
            expected: params.vocab_rows(),
            actual: vocab.rows(),
        });
    }
    let header = Header {
        format: FORMAT.to_string(),
        config: params.config.clone(),
        vocab: vocab.surfaces().to_vec(),
        tensors: params
            .tensors()
            .into_iter()
            .map(|(name, m)| TensorEntry { name, shape: [m.rows, m.cols] })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(params.num_params() * 4);
    for (_, m) in params.tensors() {
        for &x in &m.data {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<(ModelParams, Vocab)> {
    let bad = |m: String| Error::Checkpoint(m);
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| bad("file too short for header length".into()))?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 30 {
        return Err(bad(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("header: {e}")))?;
    if header.format != FORMAT {
        return Err(bad(format!("unknown format {:?}", header.format)));
    }
    header.config.validate().map_err(|e| bad(e.to_string()))?;
    let vocab = Vocab::read(header.vocab.join("\n").as_bytes())?;
    if vocab.surfaces().len() != header.vocab.len() {
        return Err(bad("vocabulary has duplicate or empty entries".into()));
    }
    let mut params = ModelParams::zeros(&header.config, vocab.rows());
    {
        let tensors = params.tensors_mut();
        if tensors.len() != header.tensors.len() {
            return Err(bad(format!("expected {} tensors, header lists {}", tensors.len(), header.tensors.len())));
        }
        for ((name, m), entry) in tensors.into_iter().zip(&header.tensors) {
            if name != entry.name || [m.rows, m.cols] != entry.shape {
                return Err(bad(format!(
                    "tensor {} {:?} does not match expected {name} {:?}",
                    entry.name,
                    entry.shape,
                    [m.rows, m.cols]
                )));
            }
            let mut raw = vec![0u8; m.data.len() * 4];
            r.read_exact(&mut raw).map_err(|_| bad(format!("truncated data in {name}")))?;
            for (x, b) in m.data.iter_mut().zip(raw.chunks_exact(4)) {
                *x = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
            }
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after tensor data".into()));
    }
    if !params.is_finite() {
        return Err(bad("non-finite parameter".into()));
    }
    Ok((params, vocab))
}

pub fn save(path: &Path, params: &ModelParams, vocab: &Vocab) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write(&mut w, params, vocab)?;
    w.flush().map_err(|e| Error::file(path, e))
}

pub fn load(path: &Path) -> Result<(ModelParams, Vocab)> {
    let f = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    read(std::io::BufReader::new(f))
}
