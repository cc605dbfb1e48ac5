use super::mlp::{MlpSpec, NetworkParams};
use super::NeuralError;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CKPT_FORMAT: &str = "ckpt_v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: [usize; 2],
}

/// First line of a checkpoint file; raw parameters follow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub spec: MlpSpec,
    pub seed: u64,
    pub step: u64,
    pub tensors: Vec<TensorInfo>,
}

/// Header line as JSON, a newline, then every parameter as little-endian
/// `f32` in flat order.
pub fn encode_checkpoint(params: &NetworkParams, seed: u64, step: u64) -> Vec<u8> {
    let header = CheckpointHeader {
        format: CKPT_FORMAT.into(),
        spec: params.spec.clone(),
        seed,
        step,
        tensors: params
            .tensors()
            .into_iter()
            .map(|(name, t)| TensorInfo {
                name,
                shape: [t.nrows(), t.ncols()],
            })
            .collect(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for v in params.to_flat() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(NetworkParams, CheckpointHeader), NeuralError> {
    let bad = |m: String| NeuralError::Checkpoint(m);
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(format!("header: {e}")))?;
    if header.format != CKPT_FORMAT {
        return Err(bad(format!("unsupported format {:?}", header.format)));
    }
    let mut params = NetworkParams::init(&header.spec, 0)?;
    let expect: Vec<[usize; 2]> = params
        .tensors()
        .iter()
        .map(|(_, t)| [t.nrows(), t.ncols()])
        .collect();
    let got: Vec<[usize; 2]> = header.tensors.iter().map(|t| t.shape).collect();
    if expect != got {
        return Err(bad("tensor shapes do not match the spec".into()));
    }
    let body = &bytes[nl + 1..];
    let n = params.num_params();
    if body.len() != 4 * n {
        return Err(bad(format!("expected {} data bytes, found {}", 4 * n, body.len())));
    }
    let flat: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    params.set_flat(&flat)?;
    Ok((params, header))
}

pub fn save_checkpoint(path: &Path, params: &NetworkParams, seed: u64, step: u64) -> Result<(), NeuralError> {
    std::fs::write(path, encode_checkpoint(params, seed, step))
        .map_err(|e| NeuralError::Io(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<(NetworkParams, CheckpointHeader), NeuralError> {
    let bytes = std::fs::read(path).map_err(|e| NeuralError::Io(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

/// Exact `f64` values as little-endian bytes, for bit-exact resumption.
pub fn encode_f64s(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f64s(bytes: &[u8]) -> Result<Vec<f64>, NeuralError> {
    if bytes.len() % 8 != 0 {
        return Err(NeuralError::Checkpoint("f64 blob length not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}
