//! JSON/base64 tensor encoding shared by the model, explanation, tensor and
//! pair-list file formats. Numeric payloads are little-endian `f64`, base64
//! (standard alphabet, with padding).

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

/// Serialized tensor: explicit shape plus a base64 blob of the flat data.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorRepr {
    pub shape: Vec<usize>,
    pub data: String,
}

impl TensorRepr {
    pub fn from_tensor(t: &Tensor) -> Self {
        TensorRepr {
            shape: t.shape().to_vec(),
            data: encode_f64(t.data()),
        }
    }

    pub fn to_tensor(&self, context: &str) -> Result<Tensor> {
        let data = decode_f64(&self.data, context)?;
        let expect: usize = self.shape.iter().product();
        if data.len() != expect {
            return Err(Error::parse(
                context,
                format!(
                    "decoded {} values but shape {:?} requires {}",
                    data.len(),
                    self.shape,
                    expect
                ),
            ));
        }
        Tensor::new(self.shape.clone(), data)
            .map_err(|e| Error::parse(context, e.to_string()))
    }
}

pub fn encode_f64(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(&bytes)
}

pub fn decode_f64(encoded: &str, context: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(encoded)
        .map_err(|e| Error::parse(context, format!("invalid base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::parse(
            context,
            format!("payload length {} is not a multiple of 8", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Standalone tensor file: `{"shape": [...], "data": "<base64 f64 le>"}`.
pub fn tensor_to_json(t: &Tensor) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(&TensorRepr::from_tensor(t)).expect("serializable");
    out.push(b'\n');
    out
}

pub fn tensor_from_json(bytes: &[u8]) -> Result<Tensor> {
    let repr: TensorRepr = serde_json::from_slice(bytes)
        .map_err(|e| Error::parse("tensor file", e.to_string()))?;
    repr.to_tensor("tensor file")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bitwise() {
        let t = Tensor::new(vec![2, 3], vec![0.0, -0.0, 1.5, f64::MIN_POSITIVE, -7.25, 1e300])
            .unwrap();
        let back = TensorRepr::from_tensor(&t).to_tensor("test").unwrap();
        assert_eq!(
            t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn length_mismatch_rejected() {
        let repr = TensorRepr {
            shape: vec![3],
            data: encode_f64(&[1.0, 2.0]),
        };
        assert!(repr.to_tensor("test").is_err());
    }

    #[test]
    fn bad_base64_rejected() {
        let repr = TensorRepr {
            shape: vec![1],
            data: "!!not-base64!!".into(),
        };
        assert!(repr.to_tensor("test").is_err());
    }
}
