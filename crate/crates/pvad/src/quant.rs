//! Int8 dynamic-range weight quantization: weights live as int8 plus a
//! per-tensor scale at rest, and are dequantized back to f32 for compute.

use crate::error::{Error, Result};
use crate::model::{ModelBundle, ModelConfig};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

pub const QMAX: f32 = 127.0;

/// Int8 values plus one positive scale; dequantizes as `q * scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub q_values: Vec<i8>,
    pub scale: f32,
}

/// Symmetric per-tensor quantization: `scale = max|w| / 127` (1.0 for an
/// all-zero tensor), values rounded half away from zero and clamped.
pub fn quantize_tensor(w: &Tensor) -> Result<QuantizedTensor> {
    w.require_finite("tensor being quantized")
        .map_err(|_| Error::Input("cannot quantize a tensor with non-finite values".into()))?;
    let max_abs = w.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let scale = if max_abs == 0.0 { 1.0 } else { max_abs / QMAX };
    let q_values = w
        .data()
        .iter()
        // f32::round ties away from zero, which is exactly the scheme here.
        .map(|&v| (v / scale).round().clamp(-QMAX, QMAX) as i8)
        .collect();
    Ok(QuantizedTensor {
        shape: w.shape().to_vec(),
        q_values,
        scale,
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    Tensor::from_vec(
        &q.shape,
        q.q_values.iter().map(|&v| v as f32 * q.scale).collect(),
    )
}

/// One tensor of a quantized bundle: weights int8, everything else f32.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    Float(Tensor),
    Int8(QuantizedTensor),
}

impl StoredTensor {
    pub fn to_float(&self) -> Tensor {
        match self {
            StoredTensor::Float(t) => t.clone(),
            StoredTensor::Int8(q) => dequantize(q),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::Float(t) => t.shape(),
            StoredTensor::Int8(q) => &q.shape,
        }
    }

    /// Serialized payload bytes (excluding name/dims framing).
    pub fn payload_bytes(&self) -> usize {
        match self {
            StoredTensor::Float(t) => t.len() * 4,
            StoredTensor::Int8(q) => q.q_values.len() + 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedBundle {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl QuantizedBundle {
    /// Dequantize-on-load: rebuild the f32 bundle the float forward runs on.
    pub fn to_float(&self) -> ModelBundle {
        ModelBundle {
            config: self.config.clone(),
            params: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.to_float()))
                .collect(),
        }
    }
}

/// Weight matrices and kernels carry the `.w` suffix in the parameter store;
/// biases (`.b`) and norm parameters (`.gamma`/`.beta`) stay float.
pub fn is_weight_name(name: &str) -> bool {
    name.ends_with(".w")
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SizeReport {
    /// Serialized bytes of weight payloads before/after.
    pub float_weight_bytes: usize,
    pub quant_weight_bytes: usize,
    /// Full container sizes before/after.
    pub float_container_bytes: usize,
    pub quant_container_bytes: usize,
}

impl SizeReport {
    pub fn weight_payload_ratio(&self) -> f64 {
        self.float_weight_bytes as f64 / self.quant_weight_bytes.max(1) as f64
    }

    pub fn container_ratio(&self) -> f64 {
        self.float_container_bytes as f64 / self.quant_container_bytes.max(1) as f64
    }

    pub fn to_text(&self) -> String {
        format!(
            "weight payload : {} -> {} bytes ({:.2}x)\ncontainer      : {} -> {} bytes ({:.2}x)\n",
            self.float_weight_bytes,
            self.quant_weight_bytes,
            self.weight_payload_ratio(),
            self.float_container_bytes,
            self.quant_container_bytes,
            self.container_ratio()
        )
    }
}

/// Quantize every weight tensor of a float bundle, keeping biases and norm
/// parameters float. The report also measures real serialized container
/// sizes for both forms.
pub fn quantize_model(bundle: &ModelBundle) -> Result<(QuantizedBundle, SizeReport)> {
    let mut tensors = BTreeMap::new();
    let mut report = SizeReport::default();
    for (name, t) in &bundle.params {
        let stored = if is_weight_name(name) {
            report.float_weight_bytes += t.len() * 4;
            let q = quantize_tensor(t)?;
            report.quant_weight_bytes += q.q_values.len() + 4;
            StoredTensor::Int8(q)
        } else {
            StoredTensor::Float(t.clone())
        };
        tensors.insert(name.clone(), stored);
    }
    let qb = QuantizedBundle {
        config: bundle.config.clone(),
        tensors,
    };
    report.float_container_bytes = crate::container::encode_float(bundle).len();
    report.quant_container_bytes = crate::container::encode_quantized(&qb).len();
    Ok((qb, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_worked_example() {
        let w = Tensor::from_vec(&[3], vec![-1.0, 0.5, 0.25]);
        let q = quantize_tensor(&w).unwrap();
        assert!((q.scale - 1.0 / 127.0).abs() < 1e-9);
        // 0.5 / scale = 63.5 rounds away from zero to 64.
        assert_eq!(q.q_values, vec![-127, 64, 32]);
    }

    #[test]
    fn zero_tensor_round_trips_exactly() {
        let w = Tensor::zeros(&[4, 5]);
        let q = quantize_tensor(&w).unwrap();
        assert_eq!(q.scale, 1.0);
        assert!(q.q_values.iter().all(|&v| v == 0));
        assert_eq!(dequantize(&q).data(), w.data());
    }

    #[test]
    fn lattice_points_round_trip_exactly() {
        let scale = 0.013f32;
        let values: Vec<f32> = (-127..=127).map(|k| k as f32 * scale).collect();
        let w = Tensor::from_vec(&[values.len()], values.clone());
        let q = quantize_tensor(&w).unwrap();
        let back = dequantize(&q);
        for (a, b) in back.data().iter().zip(&values) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn non_finite_weights_are_rejected() {
        let w = Tensor::from_vec(&[2], vec![1.0, f32::NAN]);
        assert!(quantize_tensor(&w).is_err());
    }

    #[test]
    fn all_negative_dequantizes_to_scaled() {
        let q = QuantizedTensor {
            shape: vec![3],
            q_values: vec![-127, -127, -127],
            scale: 0.02,
        };
        let t = dequantize(&q);
        for &v in t.data() {
            assert_eq!(v, -127.0 * 0.02);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn round_trip_error_is_bounded_by_half_scale(
            values in proptest::collection::vec(-100.0f32..100.0, 1..64),
        ) {
            let w = Tensor::from_vec(&[values.len()], values);
            let q = quantize_tensor(&w).unwrap();
            let back = dequantize(&q);
            for (orig, rec) in w.data().iter().zip(back.data()) {
                // Allow f32 rounding slack on the exact scale/2 bound.
                prop_assert!((orig - rec).abs() <= q.scale / 2.0 + q.scale * 1e-5);
            }
        }

        #[test]
        fn dequantize_quantize_dequantize_is_idempotent(
            values in proptest::collection::vec(-8.0f32..8.0, 1..32),
        ) {
            let w = Tensor::from_vec(&[values.len()], values);
            let q1 = quantize_tensor(&w).unwrap();
            let d1 = dequantize(&q1);
            let q2 = quantize_tensor(&d1).unwrap();
            let d2 = dequantize(&q2);
            for (a, b) in d1.data().iter().zip(d2.data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn quantize_model_keeps_biases_float_and_covers_every_weight() {
        use crate::model::{build_model, ModelConfig, Variant};
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
        let bundle = build_model(&cfg, 1).unwrap();
        let (qb, report) = quantize_model(&bundle).unwrap();
        assert_eq!(qb.tensors.len(), bundle.params.len());
        for (name, stored) in &qb.tensors {
            match stored {
                StoredTensor::Int8(_) => assert!(is_weight_name(name), "{name} quantized"),
                StoredTensor::Float(_) => assert!(!is_weight_name(name), "{name} kept float"),
            }
        }
        assert!(report.float_weight_bytes > 0);
        assert!(report.weight_payload_ratio() > 3.0, "{report:?}");
        // Dequantize-on-load reproduces shapes exactly.
        let back = qb.to_float();
        back.validate_params().unwrap();
    }
}
