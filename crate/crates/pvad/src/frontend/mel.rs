//! Shared per-frame log-mel kernel: Hann window, 512-point FFT, triangular
//! mel filterbank.

use super::{HOP_SAMPLES, N_MELS, SAMPLE_RATE, WINDOW_SAMPLES};
use rustfft::{num_complex::Complex32, Fft, FftPlanner};
use std::sync::{Arc, OnceLock};

pub const MEL_LOW_HZ: f32 = 125.0;
pub const MEL_HIGH_HZ: f32 = 7500.0;
pub const LOG_FLOOR: f32 = 1e-10;
const N_BINS: usize = WINDOW_SAMPLES / 2 + 1;

pub struct MelKernel {
    fft: Arc<dyn Fft<f32>>,
    window: Vec<f32>,
    /// Per mel band: (first FFT bin, triangle weights).
    filters: Vec<(usize, Vec<f32>)>,
}

fn hz_to_mel(hz: f32) -> f32 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f32) -> f32 {
    700.0 * (10f32.powf(mel / 2595.0) - 1.0)
}

impl MelKernel {
    /// Process-wide kernel. One FFT plan keeps the offline and streaming
    /// paths on identical arithmetic.
    pub fn shared() -> Arc<MelKernel> {
        static KERNEL: OnceLock<Arc<MelKernel>> = OnceLock::new();
        KERNEL.get_or_init(|| Arc::new(MelKernel::new())).clone()
    }

    fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(WINDOW_SAMPLES);
        // Periodic Hann.
        let window: Vec<f32> = (0..WINDOW_SAMPLES)
            .map(|i| {
                0.5 - 0.5
                    * (2.0 * std::f32::consts::PI * i as f32 / WINDOW_SAMPLES as f32).cos()
            })
            .collect();
        let filters = Self::triangular_filters();
        Self {
            fft,
            window,
            filters,
        }
    }

    fn triangular_filters() -> Vec<(usize, Vec<f32>)> {
        let bin_hz = SAMPLE_RATE as f32 / WINDOW_SAMPLES as f32;
        let lo = hz_to_mel(MEL_LOW_HZ);
        let hi = hz_to_mel(MEL_HIGH_HZ);
        let edges: Vec<f32> = (0..N_MELS + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f32 / (N_MELS + 1) as f32))
            .collect();
        let mut filters = Vec::with_capacity(N_MELS);
        for m in 0..N_MELS {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut start = None;
            let mut weights = Vec::new();
            for bin in 0..N_BINS {
                let f = bin as f32 * bin_hz;
                let w = if f <= left || f >= right {
                    0.0
                } else if f <= center {
                    (f - left) / (center - left)
                } else {
                    (right - f) / (right - center)
                };
                if w > 0.0 {
                    if start.is_none() {
                        start = Some(bin);
                    }
                    weights.push(w);
                } else if start.is_some() {
                    break;
                }
            }
            if weights.is_empty() {
                // Triangle narrower than one FFT bin: snap to the nearest bin
                // so every band stays live.
                start = Some((center / bin_hz).round() as usize);
                weights.push(1.0);
            }
            filters.push((start.unwrap_or(0), weights));
        }
        filters
    }

    /// One 32 ms window of PCM16 to 128 log-mel energies.
    pub fn logmel_frame(&self, samples: &[i16]) -> Vec<f32> {
        debug_assert_eq!(samples.len(), WINDOW_SAMPLES);
        let mut buf: Vec<Complex32> = samples
            .iter()
            .zip(&self.window)
            .map(|(&s, &w)| Complex32::new(s as f32 / 32768.0 * w, 0.0))
            .collect();
        self.fft.process(&mut buf);
        let power: Vec<f32> = buf[..N_BINS].iter().map(|c| c.norm_sqr()).collect();
        self.filters
            .iter()
            .map(|(start, weights)| {
                let mut e = 0.0f32;
                for (i, &w) in weights.iter().enumerate() {
                    e += w * power[start + i];
                }
                (e + LOG_FLOOR).ln()
            })
            .collect()
    }
}

// Hop size is referenced here only to tie the constants together at compile time.
const _: () = assert!(HOP_SAMPLES < WINDOW_SAMPLES);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filters_cover_every_mel_band() {
        let k = MelKernel::new();
        assert_eq!(k.filters.len(), N_MELS);
        for (i, (_, w)) in k.filters.iter().enumerate() {
            assert!(!w.is_empty(), "band {i} has no bins");
            assert!(w.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn pure_tone_peaks_near_its_band() {
        let k = MelKernel::new();
        let freq = 1000.0f32;
        let samples: Vec<i16> = (0..WINDOW_SAMPLES)
            .map(|i| {
                ((2.0 * std::f32::consts::PI * freq * i as f32 / SAMPLE_RATE as f32).sin()
                    * 16000.0) as i16
            })
            .collect();
        let mel = k.logmel_frame(&samples);
        let peak_band = mel
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        // 1 kHz sits in the lower third of a 125-7500 Hz mel scale.
        assert!(peak_band > 10 && peak_band < 80, "peak at band {peak_band}");
    }
}
