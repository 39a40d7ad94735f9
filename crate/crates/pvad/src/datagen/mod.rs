//! Deterministic synthetic corpora: seeded speakers with unit-norm
//! embeddings, single-speaker utterances (tone bursts or feature clusters),
//! concatenated multi-speaker examples, the zero-embedding training
//! paradigm, and SpecAugment-style masking.

mod io;
pub use io::{export_corpus, import_corpus, read_embedding_file, write_embedding_file};

use crate::error::{Error, Result};
use crate::frontend::{
    self, AudioBuffer, FEATURE_DIM, MODEL_FRAME_SAMPLES, N_MELS, SAMPLE_RATE, STACK,
};
use crate::model::SpeakerEmbedding;
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Per-frame class, ordered like the posterior columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum FrameLabel {
    /// Target speaker speech.
    Tss = 0,
    /// Non-target speaker speech.
    Ntss = 1,
    /// Non-speech.
    Ns = 2,
}

impl FrameLabel {
    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(FrameLabel::Tss),
            1 => Ok(FrameLabel::Ntss),
            2 => Ok(FrameLabel::Ns),
            other => Err(Error::Input(format!("invalid label byte {other}"))),
        }
    }

    pub fn as_byte(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusMode {
    /// Harmonic tone bursts rendered to PCM, features via the frontend.
    Audio,
    /// Features drawn directly from per-speaker Gaussian clusters.
    Feature,
}

#[derive(Clone, Debug)]
pub struct SyntheticSpeaker {
    pub id: usize,
    pub embedding: SpeakerEmbedding,
    /// Fundamental frequency for audio mode.
    pub f0: f32,
    /// Cluster center for feature mode.
    pub cluster_mean: Vec<f32>,
}

/// One single-speaker utterance with exact frame-level speech marks.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub speaker_id: usize,
    pub audio: Option<AudioBuffer>,
    pub features: Tensor,
    /// true = speech, false = non-speech; one per feature row.
    pub vad_labels: Vec<bool>,
}

/// A (possibly concatenated) training example.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub features: Tensor,
    pub labels: Vec<FrameLabel>,
    pub target_embedding: SpeakerEmbedding,
    pub target_speaker_id: usize,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub seed: u64,
    pub mode: CorpusMode,
    pub embedding_dim: usize,
    pub speakers: Vec<SyntheticSpeaker>,
    pub utterances: Vec<Utterance>,
}

/// Feature-mode cluster noise.
const CLUSTER_SIGMA: f32 = 0.1;

fn derived_rng(seed: u64, stream: u64, item: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&stream.to_le_bytes());
    bytes[16..24].copy_from_slice(&item.to_le_bytes());
    bytes[24..32].copy_from_slice(&0x5eed_5eed_5eed_5eedu64.to_le_bytes());
    ChaCha8Rng::from_seed(bytes)
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    // Box-Muller normals, then normalize.
    let mut v = Vec::with_capacity(dim);
    while v.len() < dim {
        let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
        let u2: f32 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let th = 2.0 * std::f32::consts::PI * u2;
        v.push(r * th.cos());
        if v.len() < dim {
            v.push(r * th.sin());
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.iter().map(|x| x / norm).collect()
}

pub fn make_speaker(corpus_seed: u64, id: usize, embedding_dim: usize) -> SyntheticSpeaker {
    let mut rng = derived_rng(corpus_seed, 1, id as u64);
    let embedding = SpeakerEmbedding::unit(unit_vector(&mut rng, embedding_dim)).unwrap();
    let f0 = 110.0 + 37.0 * id as f32;
    let cluster_mean = (0..FEATURE_DIM).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    SyntheticSpeaker {
        id,
        embedding,
        f0,
        cluster_mean,
    }
}

/// Deterministic synthetic corpus. Same seed, same bytes.
pub fn synth_corpus(
    seed: u64,
    n_speakers: usize,
    utterances_per_speaker: usize,
    mode: CorpusMode,
    embedding_dim: usize,
) -> Result<Corpus> {
    if n_speakers < 2 {
        return Err(Error::Config(format!(
            "need at least 2 speakers, got {n_speakers}"
        )));
    }
    let speakers: Vec<SyntheticSpeaker> = (0..n_speakers)
        .map(|id| make_speaker(seed, id, embedding_dim))
        .collect();
    let utterances = synth_utterances(seed, &speakers, utterances_per_speaker, mode);
    Ok(Corpus {
        seed,
        mode,
        embedding_dim,
        speakers,
        utterances,
    })
}

/// Fresh utterances for existing speakers (held-out sets share speakers but
/// not noise).
pub fn synth_utterances(
    seed: u64,
    speakers: &[SyntheticSpeaker],
    per_speaker: usize,
    mode: CorpusMode,
) -> Vec<Utterance> {
    let jobs: Vec<(usize, usize)> = speakers
        .iter()
        .flat_map(|s| (0..per_speaker).map(move |k| (s.id, k)))
        .collect();
    crate::parallel::map_collect(&jobs, |&(sid, k)| {
        let speaker = &speakers[sid];
        let mut rng = derived_rng(seed, 2, (sid as u64) << 32 | k as u64);
        match mode {
            CorpusMode::Audio => synth_audio_utterance(speaker, &mut rng),
            CorpusMode::Feature => synth_feature_utterance(speaker, &mut rng),
        }
    })
}

/// Speech/gap segment plan in model frames.
fn segment_plan(rng: &mut ChaCha8Rng) -> Vec<(bool, usize)> {
    let bursts = rng.gen_range(1..=3);
    let mut plan = Vec::new();
    plan.push((false, rng.gen_range(2..=4)));
    for b in 0..bursts {
        plan.push((true, rng.gen_range(5..=12)));
        if b + 1 < bursts {
            plan.push((false, rng.gen_range(3..=7)));
        }
    }
    plan.push((false, rng.gen_range(2..=4)));
    plan
}

fn synth_audio_utterance(speaker: &SyntheticSpeaker, rng: &mut ChaCha8Rng) -> Utterance {
    let plan = segment_plan(rng);
    let total_frames: usize = plan.iter().map(|(_, f)| f).sum();
    // One extra model frame of samples so the final frame has a full window.
    let n_samples = (total_frames + 1) * MODEL_FRAME_SAMPLES;
    let mut samples = vec![0i16; n_samples];
    let amp = rng.gen_range(0.18f32..0.28);
    let mut frame_cursor = 0usize;
    let mut speech_frames = Vec::new();
    for &(speech, frames) in &plan {
        if speech {
            let start = frame_cursor * MODEL_FRAME_SAMPLES;
            let end = (frame_cursor + frames) * MODEL_FRAME_SAMPLES;
            for (i, s) in samples[start..end].iter_mut().enumerate() {
                let t = i as f32 / SAMPLE_RATE as f32;
                let w = 2.0 * std::f32::consts::PI * speaker.f0 * t;
                let v = amp * (w.sin() + 0.5 * (2.0 * w).sin() + 0.25 * (3.0 * w).sin());
                *s = (v * 32767.0 / 1.75) as i16;
            }
        }
        for _ in 0..frames {
            speech_frames.push(speech);
            frame_cursor += 1;
        }
    }
    let audio = AudioBuffer::new(samples, SAMPLE_RATE).unwrap();
    let features = frontend::extract_features(&audio).unwrap();
    // The trailing window-alignment frames may not all materialize; keep the
    // labels the frontend actually produced.
    let vad_labels: Vec<bool> = (0..features.rows())
        .map(|t| speech_frames.get(t).copied().unwrap_or(false))
        .collect();
    Utterance {
        speaker_id: speaker.id,
        audio: Some(audio),
        features,
        vad_labels,
    }
}

fn synth_feature_utterance(speaker: &SyntheticSpeaker, rng: &mut ChaCha8Rng) -> Utterance {
    let plan = segment_plan(rng);
    let total: usize = plan.iter().map(|(_, f)| f).sum();
    let mut features = Tensor::zeros(&[total, FEATURE_DIM]);
    let mut vad_labels = Vec::with_capacity(total);
    let mut t = 0usize;
    for &(speech, frames) in &plan {
        for _ in 0..frames {
            let row = features.row_mut(t);
            for (j, v) in row.iter_mut().enumerate() {
                let mean = if speech { speaker.cluster_mean[j] } else { 0.0 };
                let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
                let u2: f32 = rng.gen_range(0.0..1.0);
                let n = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos();
                *v = mean + CLUSTER_SIGMA * n;
            }
            vad_labels.push(speech);
            t += 1;
        }
    }
    Utterance {
        speaker_id: speaker.id,
        audio: None,
        features,
        vad_labels,
    }
}

/// Row-concatenate utterances and label each frame tss/ntss/ns relative to
/// the speaker of `utterances[target_index]`.
pub fn concat_example(
    utterances: &[&Utterance],
    target_index: usize,
    speakers: &[SyntheticSpeaker],
) -> Result<LabeledExample> {
    if utterances.is_empty() {
        return Err(Error::Contract("no utterances to concatenate".into()));
    }
    if target_index >= utterances.len() {
        return Err(Error::Contract(format!(
            "target index {target_index} out of range ({} utterances)",
            utterances.len()
        )));
    }
    let target_speaker_id = utterances[target_index].speaker_id;
    let features = Tensor::vcat(
        &utterances.iter().map(|u| &u.features).collect::<Vec<_>>(),
    );
    let mut labels = Vec::with_capacity(features.rows());
    for u in utterances {
        for &speech in &u.vad_labels {
            labels.push(if !speech {
                FrameLabel::Ns
            } else if u.speaker_id == target_speaker_id {
                FrameLabel::Tss
            } else {
                FrameLabel::Ntss
            });
        }
    }
    let target_embedding = speakers
        .iter()
        .find(|s| s.id == target_speaker_id)
        .map(|s| s.embedding.clone())
        .ok_or_else(|| {
            Error::Contract(format!("speaker {target_speaker_id} missing from corpus"))
        })?;
    Ok(LabeledExample {
        features,
        labels,
        target_embedding,
        target_speaker_id,
    })
}

/// How concatenated examples are assembled from a corpus.
#[derive(Clone, Debug)]
pub struct AssembleSpec {
    pub n_examples: usize,
    pub min_speakers: usize,
    pub max_speakers: usize,
}

impl Default for AssembleSpec {
    fn default() -> Self {
        Self {
            n_examples: 32,
            min_speakers: 2,
            max_speakers: 3,
        }
    }
}

impl AssembleSpec {
    pub fn exactly(n_examples: usize, speakers: usize) -> Self {
        Self {
            n_examples,
            min_speakers: speakers,
            max_speakers: speakers,
        }
    }
}

/// Build concatenated examples: sample distinct speakers, one utterance
/// each, shuffle the order, pick a random contributor as target.
pub fn assemble_examples(
    corpus: &Corpus,
    spec: &AssembleSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<LabeledExample>> {
    let n_speakers = corpus.speakers.len();
    if spec.min_speakers < 1 || spec.max_speakers > n_speakers {
        return Err(Error::Config(format!(
            "speakers per example {}..={} infeasible with {n_speakers} corpus speakers",
            spec.min_speakers, spec.max_speakers
        )));
    }
    let mut by_speaker: Vec<Vec<&Utterance>> = vec![Vec::new(); n_speakers];
    for u in &corpus.utterances {
        by_speaker[u.speaker_id].push(u);
    }
    let mut out = Vec::with_capacity(spec.n_examples);
    for _ in 0..spec.n_examples {
        let k = rng.gen_range(spec.min_speakers..=spec.max_speakers);
        let mut ids: Vec<usize> = (0..n_speakers).collect();
        ids.shuffle(rng);
        ids.truncate(k);
        let picks: Vec<&Utterance> = ids
            .iter()
            .map(|&sid| {
                let pool = &by_speaker[sid];
                pool[rng.gen_range(0..pool.len())]
            })
            .collect();
        let target_index = rng.gen_range(0..picks.len());
        out.push(concat_example(&picks, target_index, &corpus.speakers)?);
    }
    Ok(out)
}

/// [`assemble_examples`] with its own seeded generator.
pub fn assemble_examples_seeded(
    corpus: &Corpus,
    spec: &AssembleSpec,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    assemble_examples(corpus, spec, &mut rng)
}

/// With probability `p0` per example: zero the target embedding and relabel
/// every ntss frame as tss. Resample each call (each epoch).
pub fn apply_enrollmentless_paradigm(
    batch: &mut [LabeledExample],
    p0: f64,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    if !(0.0..=1.0).contains(&p0) {
        return Err(Error::Config(format!("p0 {p0} outside [0, 1]")));
    }
    let mut selected = 0usize;
    for ex in batch.iter_mut() {
        if rng.gen_bool(p0) {
            ex.target_embedding = SpeakerEmbedding::zero(ex.target_embedding.dim());
            for l in ex.labels.iter_mut() {
                if *l == FrameLabel::Ntss {
                    *l = FrameLabel::Tss;
                }
            }
            selected += 1;
        }
    }
    Ok(selected)
}

/// Mask coordinates recorded by [`spec_augment_with_masks`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AppliedMasks {
    /// Mel-bin ranges `(start, width)` replicated across the 4 stacked
    /// sub-frames.
    pub freq: Vec<(usize, usize)>,
    /// Frame-row ranges `(start, width)`.
    pub time: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, Debug)]
pub struct SpecAugment {
    pub n_freq_masks: usize,
    pub max_freq_width: usize,
    pub n_time_masks: usize,
    pub max_time_width: usize,
}

impl Default for SpecAugment {
    fn default() -> Self {
        Self {
            n_freq_masks: 2,
            max_freq_width: 12,
            n_time_masks: 1,
            max_time_width: 8,
        }
    }
}

pub fn spec_augment(features: &Tensor, cfg: &SpecAugment, rng: &mut ChaCha8Rng) -> Tensor {
    spec_augment_with_masks(features, cfg, rng).0
}

/// SpecAugment over stacked features: frequency masks are drawn in the
/// 128-bin mel space and replicated across the 4 stacked sub-frames; time
/// masks zero whole rows.
pub fn spec_augment_with_masks(
    features: &Tensor,
    cfg: &SpecAugment,
    rng: &mut ChaCha8Rng,
) -> (Tensor, AppliedMasks) {
    let mut out = features.clone();
    let mut masks = AppliedMasks::default();
    let rows = out.rows();
    for _ in 0..cfg.n_freq_masks {
        let width = rng.gen_range(0..=cfg.max_freq_width.min(N_MELS));
        if width == 0 {
            continue;
        }
        let start = rng.gen_range(0..=N_MELS - width);
        masks.freq.push((start, width));
        for t in 0..rows {
            let row = out.row_mut(t);
            for s in 0..STACK {
                for bin in start..start + width {
                    row[s * N_MELS + bin] = 0.0;
                }
            }
        }
    }
    for _ in 0..cfg.n_time_masks {
        if rows == 0 {
            break;
        }
        let width = rng.gen_range(0..=cfg.max_time_width.min(rows));
        if width == 0 {
            continue;
        }
        let start = rng.gen_range(0..=rows - width);
        masks.time.push((start, width));
        for t in start..start + width {
            for v in out.row_mut(t) {
                *v = 0.0;
            }
        }
    }
    (out, masks)
}
