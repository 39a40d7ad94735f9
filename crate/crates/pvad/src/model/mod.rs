//! The personalized VAD network: a streaming conformer backbone, one of four
//! speaker-conditioning variants, and a 3-class frame classifier.

mod block;
mod forward;

pub(crate) use block::{block_stream_step, BlockStreamState};
pub use forward::{ModelGrads, ModelTape, PRENET_PREFIX};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, TensorOf};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// How the target-speaker embedding conditions the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Embedding concatenated to every input frame.
    Concat,
    /// Backbone output modulated by FiLM of the embedding.
    Film,
    /// Per-frame cosine score from a speaker pre-net drives FiLM.
    Prenet,
    /// FiLM of embedding and cosine score together.
    Combined,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Concat,
        Variant::Film,
        Variant::Prenet,
        Variant::Combined,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Concat => "concat",
            Variant::Film => "film",
            Variant::Prenet => "prenet",
            Variant::Combined => "combined",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "concat" => Ok(Variant::Concat),
            "film" => Ok(Variant::Film),
            "prenet" => Ok(Variant::Prenet),
            "combined" => Ok(Variant::Combined),
            other => Err(Error::Config(format!(
                "unknown model variant {other:?} (expected concat, film, prenet or combined)"
            ))),
        }
    }

    pub fn has_prenet(&self) -> bool {
        matches!(self, Variant::Prenet | Variant::Combined)
    }

    pub fn has_film(&self) -> bool {
        !matches!(self, Variant::Concat)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub left_context: usize,
    pub input_dim: usize,
    pub embedding_dim: usize,
    pub prenet_layers: usize,
    pub num_classes: usize,
    pub ffn_expansion: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Combined,
            num_layers: 4,
            model_dim: 64,
            heads: 8,
            conv_kernel: 7,
            left_context: 31,
            input_dim: crate::frontend::FEATURE_DIM,
            embedding_dim: 256,
            prenet_layers: 2,
            num_classes: 3,
            ffn_expansion: 4,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("conv_kernel", self.conv_kernel),
            ("input_dim", self.input_dim),
            ("embedding_dim", self.embedding_dim),
            ("num_classes", self.num_classes),
            ("ffn_expansion", self.ffn_expansion),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.variant.has_prenet() && self.prenet_layers == 0 {
            return Err(Error::Config("prenet_layers must be positive".into()));
        }
        Ok(())
    }

    /// Frame input width seen by the first projection.
    pub fn effective_input_dim(&self) -> usize {
        match self.variant {
            Variant::Concat => self.input_dim + self.embedding_dim,
            _ => self.input_dim,
        }
    }

    /// FiLM generator conditioner width.
    pub fn film_cond_dim(&self) -> usize {
        match self.variant {
            Variant::Film => self.embedding_dim,
            Variant::Prenet => 1,
            Variant::Combined => self.embedding_dim + 1,
            Variant::Concat => 0,
        }
    }

    /// Model frames of history that can influence the current posterior.
    pub fn receptive_field(&self) -> usize {
        self.num_layers * (self.left_context + self.conv_kernel - 1)
    }
}

/// Target-speaker embedding: unit L2 norm when enrolled, exactly all-zero as
/// the enrollment-less sentinel.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding {
    values: Vec<f32>,
}

impl SpeakerEmbedding {
    /// Enrollment-less sentinel.
    pub fn zero(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
        }
    }

    /// Normalize `values` to unit length.
    pub fn unit(mut values: Vec<f32>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f32>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::Input(
                "cannot build a unit embedding from a zero or non-finite vector".into(),
            ));
        }
        for v in &mut values {
            *v /= norm;
        }
        Ok(Self { values })
    }

    /// Accept a raw vector, requiring unit norm (within 1e-3) or exact zero.
    pub fn from_raw(values: Vec<f32>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f32>().sqrt();
        if values.iter().all(|&v| v == 0.0) {
            return Ok(Self { values });
        }
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-3 {
            return Err(Error::Contract(format!(
                "embedding norm {norm} is neither 0 nor within 1e-3 of 1"
            )));
        }
        Ok(Self { values })
    }

    pub fn is_zero_sentinel(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// Named-tensor store plus the configuration that built it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundleOf<F> {
    pub config: ModelConfig,
    pub params: BTreeMap<String, TensorOf<F>>,
}

pub type ModelBundle = ModelBundleOf<f32>;

/// Gradients keyed like the parameter store.
pub type GradMap<F> = BTreeMap<String, TensorOf<F>>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    HeUniform { fan_in: usize },
    Zero,
    One,
}

pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn push_linear(out: &mut Vec<ParamSpec>, name: &str, fan_in: usize, fan_out: usize) {
    out.push(ParamSpec {
        name: format!("{name}.w"),
        shape: vec![fan_in, fan_out],
        init: Init::HeUniform { fan_in },
    });
    out.push(ParamSpec {
        name: format!("{name}.b"),
        shape: vec![fan_out],
        init: Init::Zero,
    });
}

fn push_norm(out: &mut Vec<ParamSpec>, name: &str, dim: usize) {
    out.push(ParamSpec {
        name: format!("{name}.gamma"),
        shape: vec![dim],
        init: Init::One,
    });
    out.push(ParamSpec {
        name: format!("{name}.beta"),
        shape: vec![dim],
        init: Init::Zero,
    });
}

fn push_block(out: &mut Vec<ParamSpec>, prefix: &str, cfg: &ModelConfig) {
    let d = cfg.model_dim;
    let ffn = d * cfg.ffn_expansion;
    for half in ["ffn1", "ffn2"] {
        push_norm(out, &format!("{prefix}.{half}.ln"), d);
        push_linear(out, &format!("{prefix}.{half}.in"), d, ffn);
        push_linear(out, &format!("{prefix}.{half}.out"), ffn, d);
    }
    push_norm(out, &format!("{prefix}.attn.ln"), d);
    for proj in ["wq", "wk", "wv", "wo"] {
        out.push(ParamSpec {
            name: format!("{prefix}.attn.{proj}.w"),
            shape: vec![d, d],
            init: Init::HeUniform { fan_in: d },
        });
        // No key bias: softmax cancels a constant logit shift.
        if proj != "wk" {
            out.push(ParamSpec {
                name: format!("{prefix}.attn.{proj}.b"),
                shape: vec![d],
                init: Init::Zero,
            });
        }
    }
    push_norm(out, &format!("{prefix}.conv.ln"), d);
    push_linear(out, &format!("{prefix}.conv.pw1"), d, 2 * d);
    out.push(ParamSpec {
        name: format!("{prefix}.conv.dw.w"),
        shape: vec![cfg.conv_kernel, d],
        init: Init::HeUniform {
            fan_in: cfg.conv_kernel,
        },
    });
    out.push(ParamSpec {
        name: format!("{prefix}.conv.dw.b"),
        shape: vec![d],
        init: Init::Zero,
    });
    push_norm(out, &format!("{prefix}.conv.norm"), d);
    push_linear(out, &format!("{prefix}.conv.pw2"), d, d);
    push_norm(out, &format!("{prefix}.out_ln"), d);
}

/// Every parameter the config implies, in deterministic build order.
pub(crate) fn param_manifest(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    push_linear(&mut out, "in_proj", cfg.effective_input_dim(), cfg.model_dim);
    for i in 0..cfg.num_layers {
        push_block(&mut out, &format!("enc.{i}"), cfg);
    }
    if cfg.variant.has_prenet() {
        push_linear(&mut out, "prenet.in_proj", cfg.input_dim, cfg.model_dim);
        for i in 0..cfg.prenet_layers {
            push_block(&mut out, &format!("prenet.enc.{i}"), cfg);
        }
        push_linear(&mut out, "prenet.out", cfg.model_dim, cfg.embedding_dim);
    }
    if cfg.variant.has_film() {
        let cond = cfg.film_cond_dim();
        // Generator starts as the identity modulation: zero weights,
        // gamma bias one, beta bias zero.
        out.push(ParamSpec {
            name: "film.gamma.w".into(),
            shape: vec![cond, cfg.model_dim],
            init: Init::Zero,
        });
        out.push(ParamSpec {
            name: "film.gamma.b".into(),
            shape: vec![cfg.model_dim],
            init: Init::One,
        });
        out.push(ParamSpec {
            name: "film.beta.w".into(),
            shape: vec![cond, cfg.model_dim],
            init: Init::Zero,
        });
        out.push(ParamSpec {
            name: "film.beta.b".into(),
            shape: vec![cfg.model_dim],
            init: Init::Zero,
        });
    }
    push_linear(&mut out, "classifier", cfg.model_dim, cfg.num_classes);
    out
}

/// Deterministically initialize a model from `(config, seed)`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelBundle> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for spec in param_manifest(config) {
        let n: usize = spec.shape.iter().product();
        let data: Vec<f32> = match spec.init {
            Init::Zero => vec![0.0; n],
            Init::One => vec![1.0; n],
            Init::HeUniform { fan_in } => {
                let limit = (6.0 / fan_in as f32).sqrt();
                (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
            }
        };
        params.insert(spec.name, Tensor::from_vec(&spec.shape, data));
    }
    Ok(ModelBundle { config: config.clone(), params })
}

impl<F: Scalar> ModelBundleOf<F> {
    pub(crate) fn get(&self, name: &str) -> &TensorOf<F> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Check the parameter store exactly matches what the config implies.
    pub fn validate_params(&self) -> Result<()> {
        let manifest = param_manifest(&self.config);
        if manifest.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "parameter store holds {} tensors, config implies {}",
                self.params.len(),
                manifest.len()
            )));
        }
        for spec in manifest {
            match self.params.get(&spec.name) {
                None => {
                    return Err(Error::Contract(format!("missing parameter {}", spec.name)))
                }
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::Contract(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> ModelBundleOf<G> {
        ModelBundleOf {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<G>()))
                .collect(),
        }
    }
}

/// Gate decision for one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Pass,
    Suppress,
}

pub const DEFAULT_THRESHOLD: f32 = 0.1;

/// Pass iff the target-speech posterior reaches the threshold (inclusive).
pub fn classify_frame(posterior: &[f32], threshold: f32) -> Decision {
    if posterior[0] >= threshold {
        Decision::Pass
    } else {
        Decision::Suppress
    }
}
