//! Binary model container.
//!
//! Layout: the 8-byte magic `DUOSMLP\0`, a little-endian `u32` header
//! length, a JSON [`ModelHeader`], a little-endian `u64` value count, then
//! every stored value (see [`ExpertMlp::stored_flat`]) as a little-endian
//! `f64`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::input::InputLayout;
use super::network::{Architecture, ExpertMlp, Mode};
use super::{PredictorError, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"DUOSMLP\0";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub format_version: u32,
    /// Scalar type the network was trained in.
    pub scalar: String,
    pub architecture: Architecture,
    pub layout: InputLayout,
    /// Digests of the artifacts the model was trained from.
    pub inputs: BTreeMap<String, String>,
}

pub fn model_to_bytes<F: Scalar>(net: &ExpertMlp<F>, layout: InputLayout, inputs: BTreeMap<String, String>) -> Vec<u8> {
    let header = ModelHeader {
        format_version: MODEL_FORMAT_VERSION,
        scalar: F::type_name().to_string(),
        architecture: net.arch.clone(),
        layout,
        inputs,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let values = net.stored_flat();
    let mut out = Vec::with_capacity(8 + 4 + header.len() + 8 + 8 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(PredictorError::Format(format!("truncated while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn parse_header(bytes: &mut &[u8]) -> Result<ModelHeader> {
    if take(bytes, 8, "magic")? != MAGIC {
        return Err(PredictorError::Format("not a predictor model file".into()));
    }
    let len = u32::from_le_bytes(take(bytes, 4, "header length")?.try_into().expect("4 bytes"));
    let header: ModelHeader = serde_json::from_slice(take(bytes, len as usize, "header")?)
        .map_err(|e| PredictorError::Format(format!("header: {e}")))?;
    if header.format_version != MODEL_FORMAT_VERSION {
        return Err(PredictorError::Format(format!(
            "format version {} is not supported (expected {MODEL_FORMAT_VERSION})",
            header.format_version
        )));
    }
    Ok(header)
}

/// Reads only the header of a container.
pub fn model_header(mut bytes: &[u8]) -> Result<ModelHeader> {
    parse_header(&mut bytes)
}

/// Parses a container. The network comes back in eval mode.
pub fn model_from_bytes<F: Scalar>(mut bytes: &[u8]) -> Result<(ExpertMlp<F>, ModelHeader)> {
    let header = parse_header(&mut bytes)?;
    let count = u64::from_le_bytes(take(&mut bytes, 8, "value count")?.try_into().expect("8 bytes"));
    let count = usize::try_from(count).map_err(|_| PredictorError::Format("value count overflows".into()))?;
    let body = take(&mut bytes, count.saturating_mul(8), "parameters")?;
    if !bytes.is_empty() {
        return Err(PredictorError::Format(format!("{} trailing bytes", bytes.len())));
    }
    let values: Vec<F> = body
        .chunks_exact(8)
        .map(|c| F::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect();
    let mut net = ExpertMlp::from_stored_flat(header.architecture.clone(), &values)?;
    net.set_mode(Mode::Eval);
    Ok((net, header))
}

pub fn save_model<F: Scalar>(
    path: impl AsRef<Path>,
    net: &ExpertMlp<F>,
    layout: InputLayout,
    inputs: BTreeMap<String, String>,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model_to_bytes(net, layout, inputs)).map_err(|source| PredictorError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model<F: Scalar>(path: impl AsRef<Path>) -> Result<(ExpertMlp<F>, ModelHeader)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| PredictorError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    model_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::input::AffinityMode;
    use crate::trace::fixtures::toy_shape;
    use ndarray::Array2;

    fn layout() -> InputLayout {
        InputLayout::new(toy_shape(), AffinityMode::Pooled)
    }

    #[test]
    fn round_trip_preserves_eval_outputs_bitwise() {
        let l = layout();
        let mut net = ExpertMlp::<f32>::new(Architecture::uniform(l.input_dim(), 8, 4), 11);
        net.norms[2].running_mean.fill(0.25);
        net.set_mode(Mode::Eval);
        let bytes = model_to_bytes(&net, l, BTreeMap::new());
        let (back, header) = model_from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(header.scalar, "f32");
        assert_eq!(back, net);
        let x = Array2::from_shape_fn((3, l.input_dim()), |(i, j)| (i * 7 + j) as f32 / 10.0);
        let a = net.forward(x.view()).unwrap();
        let b = back.forward(x.view()).unwrap();
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let l = layout();
        let net = ExpertMlp::<f64>::new(Architecture::uniform(l.input_dim(), 8, 4), 1);
        let bytes = model_to_bytes(&net, l, BTreeMap::new());
        assert!(model_from_bytes::<f64>(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(model_from_bytes::<f64>(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(model_from_bytes::<f64>(&long).is_err());
    }
}
