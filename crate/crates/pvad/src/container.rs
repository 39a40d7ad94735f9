//! Serialized model container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   "PVAD2\0"
//! version u32 (currently 1)
//! config  u32 length + JSON bytes
//! tensors repeated to the checksum:
//!         u32 name length + UTF-8 name
//!         u8 dtype (0 = f32, 1 = i8)
//!         u32 rank, then u32 per dim
//!         f32 scale (i8 tensors only)
//!         raw payload (f32-LE or i8)
//! sha256  32-byte digest of everything above
//! ```
//!
//! The digest makes any byte flip a structured load failure instead of a
//! silently different model.

use crate::error::{Error, LoadError, Result};
use crate::model::{ModelBundle, ModelConfig};
use crate::quant::{QuantizedBundle, QuantizedTensor, StoredTensor};
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub const MAGIC: &[u8; 6] = b"PVAD2\0";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

const DTYPE_F32: u8 = 0;
const DTYPE_I8: u8 = 1;

/// A container holds either a float model or a weight-quantized one.
#[derive(Clone, Debug, PartialEq)]
pub enum SavedModel {
    Float(ModelBundle),
    Quantized(QuantizedBundle),
}

impl SavedModel {
    pub fn config(&self) -> &ModelConfig {
        match self {
            SavedModel::Float(b) => &b.config,
            SavedModel::Quantized(q) => &q.config,
        }
    }

    /// The f32 bundle inference runs on (dequantize-on-load for int8).
    pub fn to_float(&self) -> ModelBundle {
        match self {
            SavedModel::Float(b) => b.clone(),
            SavedModel::Quantized(q) => q.to_float(),
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, SavedModel::Quantized(_))
    }
}

fn put_tensor_header(out: &mut Vec<u8>, name: &str, dtype: u8, shape: &[usize]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

fn encode_body(config: &ModelConfig, tensors: &BTreeMap<String, StoredTensor>) -> Vec<u8> {
    let config_json = serde_json::to_string(config).expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());
    for (name, stored) in tensors {
        match stored {
            StoredTensor::Float(t) => {
                put_tensor_header(&mut out, name, DTYPE_F32, t.shape());
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            StoredTensor::Int8(q) => {
                put_tensor_header(&mut out, name, DTYPE_I8, &q.shape);
                out.extend_from_slice(&q.scale.to_le_bytes());
                out.extend_from_slice(&q.q_values.iter().map(|&v| v as u8).collect::<Vec<u8>>());
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn encode_float(bundle: &ModelBundle) -> Vec<u8> {
    let tensors: BTreeMap<String, StoredTensor> = bundle
        .params
        .iter()
        .map(|(k, v)| (k.clone(), StoredTensor::Float(v.clone())))
        .collect();
    encode_body(&bundle.config, &tensors)
}

pub fn encode_quantized(bundle: &QuantizedBundle) -> Vec<u8> {
    encode_body(&bundle.config, &bundle.tensors)
}

pub fn encode(model: &SavedModel) -> Vec<u8> {
    match model {
        SavedModel::Float(b) => encode_float(b),
        SavedModel::Quantized(q) => encode_quantized(q),
    }
}

pub fn save_model(model: &SavedModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<SavedModel> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> std::result::Result<&'a [u8], LoadError> {
        if self.pos + n > self.bytes.len() {
            return Err(LoadError::Truncated {
                field: field.to_string(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> std::result::Result<u32, LoadError> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn f32(&mut self, field: &str) -> std::result::Result<f32, LoadError> {
        Ok(f32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u8(&mut self, field: &str) -> std::result::Result<u8, LoadError> {
        Ok(self.take(1, field)?[0])
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> Result<SavedModel> {
    // Header scrutiny first so wrong-file errors stay specific; then the
    // digest, so any flipped byte in the body surfaces as corruption.
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(MAGIC.len(), "magic").map_err(Error::Load)?;
    if magic != MAGIC {
        return Err(LoadError::BadMagic.into());
    }
    let version = r.u32("version").map_err(Error::Load)?;
    if version != VERSION {
        return Err(LoadError::BadVersion {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    if bytes.len() < r.pos + DIGEST_LEN {
        return Err(LoadError::Truncated {
            field: "checksum".into(),
        }
        .into());
    }
    let body_end = bytes.len() - DIGEST_LEN;
    let digest = Sha256::digest(&bytes[..body_end]);
    if digest.as_slice() != &bytes[body_end..] {
        return Err(LoadError::ChecksumMismatch.into());
    }

    let mut r = Reader {
        bytes: &bytes[..body_end],
        pos: r.pos,
    };
    let config_len = r.u32("config length").map_err(Error::Load)? as usize;
    let config_bytes = r.take(config_len, "config block").map_err(Error::Load)?;
    let config_str = std::str::from_utf8(config_bytes)
        .map_err(|e| Error::Load(LoadError::BadConfig(e.to_string())))?;
    let config: ModelConfig = serde_json::from_str(config_str)
        .map_err(|e| Error::Load(LoadError::BadConfig(e.to_string())))?;

    let mut tensors: BTreeMap<String, StoredTensor> = BTreeMap::new();
    let mut any_int8 = false;
    while !r.done() {
        let name_len = r.u32("tensor name length").map_err(Error::Load)? as usize;
        let name_bytes = r.take(name_len, "tensor name").map_err(Error::Load)?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|e| {
                Error::Load(LoadError::BadTensor {
                    name: "<invalid utf-8>".into(),
                    reason: e.to_string(),
                })
            })?
            .to_string();
        let dtype = r.u8("dtype tag").map_err(Error::Load)?;
        let rank = r.u32("tensor rank").map_err(Error::Load)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for i in 0..rank {
            shape.push(r.u32(&format!("dim {i} of {name}")).map_err(Error::Load)? as usize);
        }
        let count: usize = shape.iter().product();
        match dtype {
            DTYPE_F32 => {
                if count.checked_mul(4).map_or(true, |n| n > r.remaining()) {
                    return Err(LoadError::Truncated {
                        field: format!("payload of {name}"),
                    }
                    .into());
                }
                let payload = r.take(count * 4, &format!("payload of {name}")).map_err(Error::Load)?;
                let data: Vec<f32> = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                tensors.insert(name, StoredTensor::Float(Tensor::from_vec(&shape, data)));
            }
            DTYPE_I8 => {
                any_int8 = true;
                let scale = r.f32(&format!("scale of {name}")).map_err(Error::Load)?;
                if !(scale.is_finite() && scale > 0.0) {
                    return Err(LoadError::BadTensor {
                        name,
                        reason: format!("scale {scale} must be positive and finite"),
                    }
                    .into());
                }
                if count > r.remaining() {
                    return Err(LoadError::Truncated {
                        field: format!("payload of {name}"),
                    }
                    .into());
                }
                let payload = r.take(count, &format!("payload of {name}")).map_err(Error::Load)?;
                tensors.insert(
                    name,
                    StoredTensor::Int8(QuantizedTensor {
                        shape,
                        q_values: payload.iter().map(|&b| b as i8).collect(),
                        scale,
                    }),
                );
            }
            tag => {
                return Err(LoadError::BadDtype { name, tag }.into());
            }
        }
    }

    let model = if any_int8 {
        SavedModel::Quantized(QuantizedBundle { config, tensors })
    } else {
        SavedModel::Float(ModelBundle {
            config,
            params: tensors
                .into_iter()
                .map(|(k, v)| match v {
                    StoredTensor::Float(t) => (k, t),
                    StoredTensor::Int8(_) => unreachable!("no int8 tensors on this path"),
                })
                .collect(),
        })
    };
    // The parameter set must exactly match the embedded config.
    model
        .to_float()
        .validate_params()
        .map_err(|e| Error::Load(LoadError::ParamMismatch(e.to_string())))?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig, Variant};
    use crate::quant::quantize_model;

    fn tiny_bundle() -> ModelBundle {
        let cfg = ModelConfig {
            variant: Variant::Combined,
            num_layers: 1,
            model_dim: 8,
            heads: 2,
            conv_kernel: 3,
            left_context: 2,
            input_dim: 12,
            embedding_dim: 6,
            prenet_layers: 1,
            num_classes: 3,
            ffn_expansion: 2,
        };
        build_model(&cfg, 9).unwrap()
    }

    #[test]
    fn float_container_round_trips_bit_exactly() {
        let bundle = tiny_bundle();
        let bytes = encode_float(&bundle);
        let loaded = decode(&bytes).unwrap();
        assert!(!loaded.is_quantized());
        let back = loaded.to_float();
        assert_eq!(back, bundle);
        // save -> load -> save gives identical bytes.
        assert_eq!(encode(&loaded), bytes);
    }

    #[test]
    fn quantized_container_round_trips_bit_exactly() {
        let bundle = tiny_bundle();
        let (qb, _) = quantize_model(&bundle).unwrap();
        let bytes = encode_quantized(&qb);
        let loaded = decode(&bytes).unwrap();
        assert!(loaded.is_quantized());
        match &loaded {
            SavedModel::Quantized(q) => assert_eq!(q, &qb),
            _ => unreachable!(),
        }
        assert_eq!(encode(&loaded), bytes);
    }

    #[test]
    fn bad_magic_and_version_are_specific_errors() {
        let bundle = tiny_bundle();
        let mut bytes = encode_float(&bundle);
        bytes[0] = b'X';
        match decode(&bytes) {
            Err(Error::Load(LoadError::BadMagic)) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }

        let mut bytes = encode_float(&bundle);
        bytes[6] = 9; // version
        match decode(&bytes) {
            Err(Error::Load(LoadError::BadVersion { found: 9, .. })) => {}
            other => panic!("expected BadVersion, got {other:?}"),
        }
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = encode_float(&tiny_bundle());
        for cut in [3usize, 8, 20, bytes.len() / 2, bytes.len() - 1] {
            let err = decode(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Load(_)), "cut at {cut}: {err:?}");
        }
    }

    #[test]
    fn every_single_byte_flip_is_a_structured_load_error() {
        let bundle = tiny_bundle();
        for bytes in [encode_float(&bundle), {
            let (qb, _) = quantize_model(&bundle).unwrap();
            encode_quantized(&qb)
        }] {
            for pos in 0..bytes.len() {
                let mut corrupted = bytes.clone();
                corrupted[pos] ^= 0x01;
                match decode(&corrupted) {
                    Err(Error::Load(_)) => {}
                    Ok(_) => panic!("byte {pos}: corruption loaded cleanly"),
                    Err(other) => panic!("byte {pos}: unstructured error {other:?}"),
                }
            }
        }
    }

    #[test]
    fn save_and_load_via_files() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = tiny_bundle();
        let path = dir.path().join("model.pvad");
        save_model(&SavedModel::Float(bundle.clone()), &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.to_float(), bundle);
    }
}
