//! Audio frontend: raw 16 kHz PCM to stacked, subsampled log-mel features.
//!
//! The offline and streaming paths share the same per-frame kernel, so any
//! chunking of the input produces bit-identical features.

mod mel;
pub mod wav;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use mel::MelKernel;
use std::collections::VecDeque;
use std::sync::Arc;

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW_SAMPLES: usize = 512; // 32 ms
pub const HOP_SAMPLES: usize = 160; // 10 ms
pub const N_MELS: usize = 128;
pub const STACK: usize = 4;
pub const SUBSAMPLE: usize = 3;
pub const FEATURE_DIM: usize = STACK * N_MELS;
/// Audio samples covered by one model frame hop.
pub const MODEL_FRAME_SAMPLES: usize = HOP_SAMPLES * SUBSAMPLE;

/// Mono 16 kHz PCM16 audio.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AudioBuffer {
    pub samples: Vec<i16>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<i16>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Config(format!(
                "sample rate {sample_rate} not supported (need {SAMPLE_RATE})"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Number of 10 ms base frames a signal of `n` samples yields.
pub fn base_frame_count(n: usize) -> usize {
    if n < WINDOW_SAMPLES {
        0
    } else {
        (n - WINDOW_SAMPLES) / HOP_SAMPLES + 1
    }
}

/// Number of model frames after stack-and-subsample.
pub fn model_frame_count(n_samples: usize) -> usize {
    base_frame_count(n_samples).div_ceil(SUBSAMPLE)
}

/// 128-dim log-mel energies per 10 ms frame: Hann window, 512-point
/// magnitude-squared FFT, triangular mel bank over 125-7500 Hz, natural log
/// with a 1e-10 floor.
pub fn extract_logmel(audio: &AudioBuffer) -> Result<Tensor> {
    if audio.sample_rate != SAMPLE_RATE {
        return Err(Error::Config(format!(
            "sample rate {} not supported (need {SAMPLE_RATE})",
            audio.sample_rate
        )));
    }
    let kernel = MelKernel::shared();
    let rows = base_frame_count(audio.len());
    let out_rows = crate::parallel::map_range(rows, |r| {
        kernel.logmel_frame(&audio.samples[r * HOP_SAMPLES..r * HOP_SAMPLES + WINDOW_SAMPLES])
    });
    Ok(Tensor::from_rows(&out_rows))
}

/// Stack 4 contiguous base frames (current plus 3 predecessors, left edge
/// replicated) and keep every 3rd base frame.
pub fn stack_subsample(base: &Tensor) -> Tensor {
    let rows = base.rows();
    if rows == 0 {
        return Tensor::zeros(&[0, FEATURE_DIM]);
    }
    assert_eq!(base.cols(), N_MELS, "expected {N_MELS} mel bins");
    let out_rows = rows.div_ceil(SUBSAMPLE);
    let mut out = Tensor::zeros(&[out_rows, FEATURE_DIM]);
    for t in 0..out_rows {
        let center = t * SUBSAMPLE;
        let dst = out.row_mut(t);
        for s in 0..STACK {
            // oldest first: base indices center-3 .. center
            let idx = (center + s).saturating_sub(STACK - 1);
            dst[s * N_MELS..(s + 1) * N_MELS].copy_from_slice(base.row(idx));
        }
    }
    out
}

/// Offline frontend: audio in, model-frame features out.
pub fn extract_features(audio: &AudioBuffer) -> Result<Tensor> {
    Ok(stack_subsample(&extract_logmel(audio)?))
}

/// Streaming frontend state. Feeding chunks through [`FrontendState::push`]
/// yields exactly the offline features of the concatenated audio.
#[derive(Clone)]
pub struct FrontendState {
    kernel: Arc<MelKernel>,
    pending: Vec<i16>,
    /// Up to 3 most recent base frames (stack context).
    recent: VecDeque<Vec<f32>>,
    base_count: usize,
    frames_emitted: usize,
}

impl Default for FrontendState {
    fn default() -> Self {
        Self::new()
    }
}

impl FrontendState {
    pub fn new() -> Self {
        Self {
            kernel: MelKernel::shared(),
            pending: Vec::new(),
            recent: VecDeque::with_capacity(STACK - 1),
            base_count: 0,
            frames_emitted: 0,
        }
    }

    pub fn pending_samples(&self) -> usize {
        self.pending.len()
    }

    pub fn base_frames_seen(&self) -> usize {
        self.base_count
    }

    pub fn frames_emitted(&self) -> usize {
        self.frames_emitted
    }

    /// Consume a chunk, returning the model frames it completes.
    pub fn push(&mut self, chunk: &AudioBuffer) -> Result<Tensor> {
        if chunk.sample_rate != SAMPLE_RATE {
            return Err(Error::Config(format!(
                "sample rate {} not supported (need {SAMPLE_RATE})",
                chunk.sample_rate
            )));
        }
        self.pending.extend_from_slice(&chunk.samples);
        let mut emitted: Vec<Vec<f32>> = Vec::new();
        let mut start = 0usize;
        while start + WINDOW_SAMPLES <= self.pending.len() {
            let frame = self
                .kernel
                .logmel_frame(&self.pending[start..start + WINDOW_SAMPLES]);
            if self.base_count % SUBSAMPLE == 0 {
                emitted.push(self.stack_current(&frame));
                self.frames_emitted += 1;
            }
            if self.recent.len() == STACK - 1 {
                self.recent.pop_front();
            }
            self.recent.push_back(frame);
            self.base_count += 1;
            start += HOP_SAMPLES;
        }
        self.pending.drain(..start);
        if emitted.is_empty() {
            Ok(Tensor::zeros(&[0, FEATURE_DIM]))
        } else {
            Ok(Tensor::from_rows(&emitted))
        }
    }

    fn stack_current(&self, current: &[f32]) -> Vec<f32> {
        let mut row = vec![0.0f32; FEATURE_DIM];
        for s in 0..STACK {
            let back = STACK - 1 - s; // how many frames before the current one
            let src: &[f32] = if back == 0 {
                current
            } else if self.recent.len() >= back {
                &self.recent[self.recent.len() - back]
            } else {
                // before stream start: replicate base frame 0
                if self.recent.is_empty() {
                    current
                } else {
                    &self.recent[0]
                }
            };
            row[s * N_MELS..(s + 1) * N_MELS].copy_from_slice(src);
        }
        row
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tone(n: usize, seed: u64) -> AudioBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|i| {
                let t = i as f32 / SAMPLE_RATE as f32;
                let s = (2.0 * std::f32::consts::PI * 440.0 * t).sin() * 8000.0
                    + rng.gen_range(-500.0..500.0);
                s as i16
            })
            .collect();
        AudioBuffer::new(samples, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn one_second_yields_97_base_frames() {
        let audio = tone(16_000, 1);
        let base = extract_logmel(&audio).unwrap();
        assert_eq!(base.rows(), 97);
        assert_eq!(base.cols(), 128);
    }

    #[test]
    fn silence_yields_log_floor_everywhere() {
        let audio = AudioBuffer::new(vec![0i16; 16_000], SAMPLE_RATE).unwrap();
        let base = extract_logmel(&audio).unwrap();
        assert_eq!(base.rows(), 97);
        let floor = (1e-10f32).ln();
        for &v in base.data() {
            assert_eq!(v, floor);
        }
    }

    #[test]
    fn short_signal_yields_no_frames() {
        let audio = AudioBuffer::new(vec![5i16; 511], SAMPLE_RATE).unwrap();
        assert_eq!(extract_logmel(&audio).unwrap().rows(), 0);
    }

    #[test]
    fn wrong_sample_rate_is_rejected() {
        assert!(AudioBuffer::new(vec![0; 100], 8000).is_err());
    }

    #[test]
    fn stacking_follows_the_indexing_rule() {
        // 12 base frames -> 4 model frames built from base indices {0,3,6,9}.
        let rows: Vec<Vec<f32>> = (0..12).map(|i| vec![i as f32; N_MELS]).collect();
        let base = Tensor::from_rows(&rows);
        let out = stack_subsample(&base);
        assert_eq!(out.rows(), 4);
        for t in 0..4 {
            let center = 3 * t;
            for s in 0..STACK {
                let want = (center + s).saturating_sub(3) as f32;
                assert_eq!(out.row(t)[s * N_MELS], want, "frame {t} slot {s}");
            }
        }
    }

    #[test]
    fn single_base_frame_is_replicated_four_times() {
        let base = Tensor::from_rows(&[(0..N_MELS).map(|i| i as f32).collect::<Vec<_>>()]);
        let out = stack_subsample(&base);
        assert_eq!(out.rows(), 1);
        for s in 0..STACK {
            assert_eq!(&out.row(0)[s * N_MELS..(s + 1) * N_MELS], base.row(0));
        }
    }

    #[test]
    fn constant_base_rows_give_constant_stacks() {
        let v: Vec<f32> = (0..N_MELS).map(|i| (i as f32).cos()).collect();
        let base = Tensor::from_rows(&vec![v.clone(); 7]);
        let out = stack_subsample(&base);
        assert_eq!(out.rows(), 3);
        for t in 0..out.rows() {
            for s in 0..STACK {
                assert_eq!(&out.row(t)[s * N_MELS..(s + 1) * N_MELS], v.as_slice());
            }
        }
    }

    #[test]
    fn empty_chunk_is_a_noop() {
        let mut state = FrontendState::new();
        let out = state
            .push(&AudioBuffer::new(vec![], SAMPLE_RATE).unwrap())
            .unwrap();
        assert_eq!(out.rows(), 0);
        assert_eq!(state.pending_samples(), 0);
    }

    #[test]
    fn small_push_keeps_tail_pending() {
        let mut state = FrontendState::new();
        let out = state.push(&tone(600, 2)).unwrap();
        // 600 samples: one 512-window fits, leaving 600-160=440 pending.
        assert_eq!(state.base_frames_seen(), 1);
        assert_eq!(out.rows(), 1);
        assert_eq!(state.pending_samples(), 440);
    }

    #[test]
    fn hundred_small_pushes_match_one_big_push() {
        let audio = tone(16_000, 3);
        let offline = extract_features(&audio).unwrap();

        let mut state = FrontendState::new();
        let mut parts = Vec::new();
        for c in audio.samples.chunks(160) {
            let chunk = AudioBuffer::new(c.to_vec(), SAMPLE_RATE).unwrap();
            let out = state.push(&chunk).unwrap();
            if out.rows() > 0 {
                parts.push(out);
            }
        }
        let streamed = Tensor::vcat(&parts.iter().collect::<Vec<_>>());
        assert_eq!(offline.shape(), streamed.shape());
        assert_eq!(offline.data(), streamed.data());
    }

    #[test]
    fn frame_count_law_holds() {
        for n in [512usize, 513, 671, 672, 1000, 16_000, 12_345] {
            let audio = tone(n, n as u64);
            let feats = extract_features(&audio).unwrap();
            assert_eq!(feats.rows(), model_frame_count(n), "n={n}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn chunking_never_changes_the_features(
            seed in 0u64..1000,
            cuts in proptest::collection::vec(1usize..4000, 0..6),
        ) {
            let n = 9000;
            let audio = tone(n, seed);
            let offline = extract_features(&audio).unwrap();

            let mut bounds: Vec<usize> = cuts.into_iter().map(|c| c % n).collect();
            bounds.push(0);
            bounds.push(n);
            bounds.sort_unstable();
            bounds.dedup();

            let mut state = FrontendState::new();
            let mut parts = Vec::new();
            for w in bounds.windows(2) {
                let chunk = AudioBuffer::new(audio.samples[w[0]..w[1]].to_vec(), SAMPLE_RATE).unwrap();
                let out = state.push(&chunk).unwrap();
                if out.rows() > 0 {
                    parts.push(out);
                }
            }
            let streamed = Tensor::vcat(&parts.iter().collect::<Vec<_>>());
            prop_assert_eq!(offline.shape(), streamed.shape());
            prop_assert_eq!(offline.data(), streamed.data());
        }
    }
}
