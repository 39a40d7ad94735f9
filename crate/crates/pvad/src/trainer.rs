//! Cross-entropy training over tss/ntss/ns and frame-level evaluation.

use crate::datagen::{
    apply_enrollmentless_paradigm, assemble_examples, spec_augment, AssembleSpec, Corpus,
    FrameLabel, LabeledExample, SpecAugment,
};
use crate::error::{Error, Result};
use crate::model::{classify_frame, Decision, GradMap, ModelBundle, SpeakerEmbedding};
use crate::tensor::{Tensor, TensorOf};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

pub const LOSS_FLOOR: f32 = 1e-12;
pub const GRAD_CLIP_NORM: f32 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub optimizer: OptimizerKind,
    pub p0: f64,
    pub seed: u64,
    pub spec_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            p0: 0.2,
            seed: 0,
            spec_augment: false,
        }
    }
}

/// Mean over frames of `-ln p(label)`, probabilities floored at 1e-12.
pub fn cross_entropy_loss(posteriors: &Tensor, labels: &[FrameLabel]) -> Result<f32> {
    if posteriors.rows() != labels.len() {
        return Err(Error::Contract(format!(
            "{} posterior rows vs {} labels",
            posteriors.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0f32;
    for (t, &lab) in labels.iter().enumerate() {
        total -= posteriors.at(t, lab.index()).max(LOSS_FLOOR).ln();
    }
    Ok(total / labels.len() as f32)
}

struct Adam {
    m: GradMap<f32>,
    v: GradMap<f32>,
    step: usize,
}

impl Adam {
    const BETA1: f32 = 0.9;
    const BETA2: f32 = 0.999;
    const EPS: f32 = 1e-8;

    fn new() -> Self {
        Self {
            m: GradMap::new(),
            v: GradMap::new(),
            step: 0,
        }
    }

    fn apply(&mut self, bundle: &mut ModelBundle, grads: &GradMap<f32>, lr: f32) {
        self.step += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.step as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.step as i32);
        for (name, g) in grads {
            let w = bundle.params.get_mut(name).expect("grad for unknown param");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| TensorOf::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| TensorOf::zeros(g.shape()));
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = Self::BETA1 * m.data()[i] + (1.0 - Self::BETA1) * gi;
                let vi = Self::BETA2 * v.data()[i] + (1.0 - Self::BETA2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                w.data_mut()[i] -= lr * mhat / (vhat.sqrt() + Self::EPS);
            }
        }
    }
}

fn sgd_apply(bundle: &mut ModelBundle, grads: &GradMap<f32>, lr: f32) {
    for (name, g) in grads {
        let w = bundle.params.get_mut(name).expect("grad for unknown param");
        for (wi, &gi) in w.data_mut().iter_mut().zip(g.data()) {
            *wi -= lr * gi;
        }
    }
}

fn clip_global_norm(grads: &mut GradMap<f32>, max_norm: f32) {
    let sq: f32 = grads
        .values()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f32>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            g.scale_assign(scale);
        }
    }
}

fn embedding_tensor(e: &SpeakerEmbedding) -> Tensor {
    Tensor::from_vec(&[e.dim()], e.values().to_vec())
}

/// One example's loss and parameter gradients (mean-frame scaling).
fn example_grads(bundle: &ModelBundle, ex: &LabeledExample) -> Result<(f32, GradMap<f32>)> {
    let tape = bundle.forward_train(&ex.features, &embedding_tensor(&ex.target_embedding))?;
    let loss = cross_entropy_loss(&tape.posteriors, &ex.labels)?;
    let frames = ex.labels.len().max(1);
    let mut dlogits = Tensor::zeros(&[tape.posteriors.rows(), bundle.config.num_classes]);
    for (t, &lab) in ex.labels.iter().enumerate() {
        for j in 0..bundle.config.num_classes {
            let y = if lab.index() == j { 1.0 } else { 0.0 };
            dlogits.set(t, j, (tape.posteriors.at(t, j) - y) / frames as f32);
        }
    }
    let grads = bundle.backward(&tape, &dlogits);
    Ok((loss, grads.params))
}

/// Train a private copy of `bundle` on concatenated examples rebuilt every
/// epoch. Returns the trained bundle and the per-epoch mean loss history.
pub fn train(
    bundle: &ModelBundle,
    corpus: &Corpus,
    assemble: &AssembleSpec,
    cfg: &TrainConfig,
) -> Result<(ModelBundle, Vec<f32>)> {
    if cfg.epochs == 0 {
        return Err(Error::Config("epochs must be >= 1".into()));
    }
    if corpus.utterances.is_empty() {
        return Err(Error::Config("corpus has no utterances".into()));
    }
    if !(0.0..=1.0).contains(&cfg.p0) {
        return Err(Error::Config(format!("p0 {} outside [0, 1]", cfg.p0)));
    }
    let mut model = bundle.clone();
    let mut adam = Adam::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    let augment = SpecAugment::default();

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37));
        let mut examples = assemble_examples(corpus, assemble, &mut rng)?;
        apply_enrollmentless_paradigm(&mut examples, cfg.p0, &mut rng)?;
        if cfg.spec_augment {
            for ex in examples.iter_mut() {
                ex.features = spec_augment(&ex.features, &augment, &mut rng);
            }
        }

        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for (batch_idx, batch) in examples.chunks(cfg.batch_size.max(1)).enumerate() {
            let results = crate::parallel::map_collect(batch, |ex| example_grads(&model, ex));
            let mut batch_grads: GradMap<f32> = GradMap::new();
            let mut batch_loss = 0.0f32;
            for r in results {
                let (loss, grads) = r?;
                batch_loss += loss;
                for (name, g) in grads {
                    match batch_grads.get_mut(&name) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            batch_grads.insert(name, g);
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f32;
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: batch_idx,
                    reason: format!("non-finite loss {batch_loss}"),
                });
            }
            for g in batch_grads.values_mut() {
                g.scale_assign(scale);
            }
            clip_global_norm(&mut batch_grads, GRAD_CLIP_NORM);
            match cfg.optimizer {
                OptimizerKind::Sgd => sgd_apply(&mut model, &batch_grads, cfg.learning_rate),
                OptimizerKind::Adam => adam.apply(&mut model, &batch_grads, cfg.learning_rate),
            }
            epoch_loss += batch_loss as f64 * batch.len() as f64;
            seen += batch.len();
        }
        history.push((epoch_loss / seen.max(1) as f64) as f32);
    }
    Ok((model, history))
}

/// Frame-level metrics of one evaluation run.
#[derive(Clone, Debug, Default, Serialize)]
pub struct EvalReport {
    pub frame_accuracy: f64,
    /// `confusion[true_class][argmax_class]`, classes ordered tss/ntss/ns.
    pub confusion: [[u64; 3]; 3],
    /// Fraction of tss frames the gate suppressed.
    pub speech_miss_rate: f64,
    /// Fraction of ntss or ns frames the gate passed.
    pub false_accept_rate: f64,
    pub frames: u64,
}

impl EvalReport {
    /// Fraction of tss frames the gate passed.
    pub fn speech_recall(&self) -> f64 {
        1.0 - self.speech_miss_rate
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("frames evaluated : {}\n", self.frames));
        s.push_str(&format!("frame accuracy   : {:.4}\n", self.frame_accuracy));
        s.push_str(&format!("speech miss rate : {:.4}\n", self.speech_miss_rate));
        s.push_str(&format!("false accept rate: {:.4}\n", self.false_accept_rate));
        s.push_str("confusion (rows = truth tss/ntss/ns, cols = argmax):\n");
        for row in &self.confusion {
            s.push_str(&format!("  {:>8} {:>8} {:>8}\n", row[0], row[1], row[2]));
        }
        s
    }

    /// Flat key=value lines for machine consumption.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("frames={}\n", self.frames));
        s.push_str(&format!("frame_accuracy={:.6}\n", self.frame_accuracy));
        s.push_str(&format!("speech_miss_rate={:.6}\n", self.speech_miss_rate));
        s.push_str(&format!("false_accept_rate={:.6}\n", self.false_accept_rate));
        s.push_str(&format!("speech_recall={:.6}\n", self.speech_recall()));
        let names = ["tss", "ntss", "ns"];
        for (i, row) in self.confusion.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                s.push_str(&format!("confusion_{}_{}={}\n", names[i], names[j], v));
            }
        }
        s
    }
}

#[derive(Default)]
struct Tally {
    confusion: [[u64; 3]; 3],
    correct: u64,
    frames: u64,
    tss_frames: u64,
    tss_suppressed: u64,
    other_frames: u64,
    other_passed: u64,
}

impl Tally {
    fn absorb(&mut self, other: &Tally) {
        for i in 0..3 {
            for j in 0..3 {
                self.confusion[i][j] += other.confusion[i][j];
            }
        }
        self.correct += other.correct;
        self.frames += other.frames;
        self.tss_frames += other.tss_frames;
        self.tss_suppressed += other.tss_suppressed;
        self.other_frames += other.other_frames;
        self.other_passed += other.other_passed;
    }

    fn into_report(self) -> EvalReport {
        EvalReport {
            frame_accuracy: self.correct as f64 / self.frames.max(1) as f64,
            confusion: self.confusion,
            speech_miss_rate: self.tss_suppressed as f64 / self.tss_frames.max(1) as f64,
            false_accept_rate: self.other_passed as f64 / self.other_frames.max(1) as f64,
            frames: self.frames,
        }
    }
}

/// Score one utterance's posteriors against labels.
fn score_posteriors(posteriors: &Tensor, labels: &[FrameLabel], threshold: f32) -> Tally {
    let mut t = Tally::default();
    for (i, &lab) in labels.iter().enumerate() {
        let row = posteriors.row(i);
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        t.confusion[lab.index()][pred] += 1;
        if pred == lab.index() {
            t.correct += 1;
        }
        t.frames += 1;
        let decision = classify_frame(row, threshold);
        if lab == FrameLabel::Tss {
            t.tss_frames += 1;
            if decision == Decision::Suppress {
                t.tss_suppressed += 1;
            }
        } else {
            t.other_frames += 1;
            if decision == Decision::Pass {
                t.other_passed += 1;
            }
        }
    }
    t
}

/// Evaluate on labeled examples. With `enrollmentless`, every example is
/// scored with the zero-sentinel embedding and ntss ground truth remapped to
/// tss first (standard-VAD truth).
pub fn evaluate(
    bundle: &ModelBundle,
    examples: &[LabeledExample],
    threshold: f32,
    enrollmentless: bool,
) -> Result<EvalReport> {
    let tallies = crate::parallel::map_collect(examples, |ex| -> Result<Tally> {
        let (embedding, labels): (Tensor, Vec<FrameLabel>) = if enrollmentless {
            (
                Tensor::zeros(&[ex.target_embedding.dim()]),
                ex.labels
                    .iter()
                    .map(|&l| if l == FrameLabel::Ntss { FrameLabel::Tss } else { l })
                    .collect(),
            )
        } else {
            (embedding_tensor(&ex.target_embedding), ex.labels.clone())
        };
        let posteriors = bundle.forward(&ex.features, &embedding)?;
        Ok(score_posteriors(&posteriors, &labels, threshold))
    });
    let mut total = Tally::default();
    for t in tallies {
        total.absorb(&t?);
    }
    Ok(total.into_report())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{synth_corpus, CorpusMode};
    use crate::model::{build_model, ModelConfig, Variant};

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            variant: Variant::Film,
            num_layers: 1,
            model_dim: 16,
            heads: 4,
            conv_kernel: 3,
            left_context: 4,
            input_dim: crate::frontend::FEATURE_DIM,
            embedding_dim: 16,
            prenet_layers: 1,
            num_classes: 3,
            ffn_expansion: 2,
        }
    }

    #[test]
    fn perfect_posteriors_have_zero_loss() {
        let labels = vec![FrameLabel::Tss, FrameLabel::Ns];
        let p = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(cross_entropy_loss(&p, &labels).unwrap(), 0.0);
    }

    #[test]
    fn uniform_posteriors_cost_ln_three() {
        let labels = vec![FrameLabel::Tss, FrameLabel::Ntss, FrameLabel::Ns];
        let third = 1.0f32 / 3.0;
        let p = Tensor::from_vec(&[3, 3], vec![third; 9]);
        let loss = cross_entropy_loss(&p, &labels).unwrap();
        assert!((loss - 3.0f32.ln()).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn loss_length_mismatch_is_contract_error() {
        let p = Tensor::from_vec(&[1, 3], vec![0.3, 0.3, 0.4]);
        assert!(cross_entropy_loss(&p, &[FrameLabel::Tss, FrameLabel::Ns]).is_err());
    }

    #[test]
    fn softmax_ce_gradient_is_p_minus_onehot() {
        use crate::layers::gradcheck::{finite_difference_check, FD_STEP};
        use crate::layers::softmax_rows_fwd;
        let logits: TensorOf<f64> =
            TensorOf::from_vec(&[2, 3], vec![0.2, -0.4, 0.9, -1.1, 0.3, 0.05]);
        let labels = [0usize, 2usize];
        let loss = |vars: &[TensorOf<f64>]| -> f64 {
            let p = softmax_rows_fwd(&vars[0]);
            let mut total = 0.0;
            for (t, &lab) in labels.iter().enumerate() {
                total -= p.at(t, lab).ln();
            }
            total / labels.len() as f64
        };
        let p = softmax_rows_fwd(&logits);
        let mut analytic = TensorOf::<f64>::zeros(&[2, 3]);
        for t in 0..2 {
            for j in 0..3 {
                let y = if labels[t] == j { 1.0 } else { 0.0 };
                analytic.set(t, j, (p.at(t, j) - y) / labels.len() as f64);
            }
        }
        let err =
            finite_difference_check(&loss, &[logits.clone()], &[analytic], FD_STEP).unwrap();
        assert!(err < 1e-4, "gradient error {err}");
    }

    #[test]
    fn zero_learning_rate_keeps_weights_bitwise() {
        let corpus = synth_corpus(5, 2, 2, CorpusMode::Feature, 16).unwrap();
        let bundle = build_model(&tiny_model_config(), 3).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 0.0,
            optimizer: OptimizerKind::Sgd,
            p0: 0.2,
            seed: 9,
            spec_augment: false,
        };
        let (trained, _) = train(&bundle, &corpus, &AssembleSpec::exactly(6, 2), &cfg).unwrap();
        assert_eq!(trained, bundle);
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let corpus = synth_corpus(6, 2, 2, CorpusMode::Feature, 16).unwrap();
        let bundle = build_model(&tiny_model_config(), 4).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            p0: 0.2,
            seed: 11,
            spec_augment: true,
        };
        let spec = AssembleSpec::exactly(6, 2);
        let (m1, h1) = train(&bundle, &corpus, &spec, &cfg).unwrap();
        let (m2, h2) = train(&bundle, &corpus, &spec, &cfg).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn short_training_reduces_loss() {
        let corpus = synth_corpus(7, 2, 3, CorpusMode::Feature, 16).unwrap();
        let bundle = build_model(&tiny_model_config(), 5).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 4,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            p0: 0.0,
            seed: 13,
            spec_augment: false,
        };
        let (_, history) = train(&bundle, &corpus, &AssembleSpec::exactly(8, 2), &cfg).unwrap();
        assert!(
            history.last().unwrap() < history.first().unwrap(),
            "history {history:?}"
        );
    }

    #[test]
    fn oracle_posteriors_score_perfectly() {
        let labels = vec![FrameLabel::Tss, FrameLabel::Ntss, FrameLabel::Ns, FrameLabel::Tss];
        let mut p = Tensor::zeros(&[4, 3]);
        for (t, &l) in labels.iter().enumerate() {
            p.set(t, l.index(), 1.0);
        }
        let tally = score_posteriors(&p, &labels, 0.1);
        let report = tally.into_report();
        assert_eq!(report.frame_accuracy, 1.0);
        assert_eq!(report.speech_miss_rate, 0.0);
        assert_eq!(report.false_accept_rate, 0.0);
        // Confusion row sums equal per-class frame counts.
        assert_eq!(report.confusion[0].iter().sum::<u64>(), 2);
        assert_eq!(report.confusion[1].iter().sum::<u64>(), 1);
        assert_eq!(report.confusion[2].iter().sum::<u64>(), 1);
    }

    #[test]
    fn always_pass_posteriors_false_accept_on_ns() {
        let labels = vec![FrameLabel::Ns, FrameLabel::Ns, FrameLabel::Tss];
        let p = Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let report = score_posteriors(&p, &labels, 0.1).into_report();
        assert!(report.false_accept_rate > 0.0);
        assert_eq!(report.false_accept_rate, 1.0);
        assert_eq!(report.speech_miss_rate, 0.0);
    }

    #[test]
    fn enrollmentless_evaluation_remaps_ntss() {
        let corpus = synth_corpus(8, 2, 2, CorpusMode::Feature, 16).unwrap();
        let bundle = build_model(&tiny_model_config(), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let examples = assemble_examples(&corpus, &AssembleSpec::exactly(4, 2), &mut rng).unwrap();
        let report = evaluate(&bundle, &examples, 0.1, true).unwrap();
        // Remapped ground truth never contains ntss.
        assert_eq!(report.confusion[1], [0, 0, 0]);
        assert!(examples
            .iter()
            .any(|ex| ex.labels.iter().any(|&l| l == FrameLabel::Ntss)));
    }

    #[test]
    fn report_kv_is_parseable() {
        let report = EvalReport {
            frame_accuracy: 0.5,
            confusion: [[1, 2, 3], [4, 5, 6], [7, 8, 9]],
            speech_miss_rate: 0.25,
            false_accept_rate: 0.125,
            frames: 45,
        };
        let kv = report.to_kv();
        for line in kv.lines() {
            let (k, v) = line.split_once('=').expect("key=value");
            assert!(!k.is_empty() && !v.is_empty());
        }
        assert!(kv.contains("confusion_ntss_ns=6"));
        assert!(report.to_text().contains("frame accuracy"));
    }
}
