//! Log-filterbank feature extraction: preemphasis, Hann window, magnitude
//! spectrum, mel triangular filters, natural log with a floor.

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{AudioError, Waveform, CANONICAL_SAMPLE_RATE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub n_mels: usize,
    pub window_ms: u32,
    pub hop_ms: u32,
    pub fft_size: usize,
    pub log_floor: f64,
    pub preemphasis: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            window_ms: 25,
            hop_ms: 10,
            fft_size: 512,
            log_floor: 1e-10,
            preemphasis: 0.97,
        }
    }
}

impl FeatureConfig {
    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (self.window_ms as usize * sample_rate as usize) / 1000
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_ms as usize * sample_rate as usize) / 1000
    }
}

/// A `T x n_mels` matrix of log mel-filterbank energies.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatureSequence {
    pub frames: Array2<f32>,
    pub frame_hop_ms: u32,
}

impl AudioFeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn num_mels(&self) -> usize {
        self.frames.ncols()
    }
}

/// HTK mel scale.
pub fn mel_from_hz(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn hz_from_mel(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters over the one-sided spectrum of an `fft_size`-point
/// transform: `n_mels` rows by `fft_size/2 + 1` columns, spanning 0 Hz to
/// Nyquist, peak weight 1.
pub fn mel_filterbank(n_mels: usize, fft_size: usize, sample_rate: u32) -> Array2<f64> {
    let n_bins = fft_size / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let mel_lo = mel_from_hz(0.0);
    let mel_hi = mel_from_hz(nyquist);
    // n_mels + 2 boundary points; filter k spans points k..k+2.
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| hz_from_mel(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let hz_per_bin = sample_rate as f64 / fft_size as f64;
    let mut fb = Array2::<f64>::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lo, center, hi) = (points[m], points[m + 1], points[m + 2]);
        for bin in 0..n_bins {
            let f = bin as f64 * hz_per_bin;
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= center {
                (f - lo) / (center - lo)
            } else {
                (hi - f) / (hi - center)
            };
            if w > 0.0 {
                fb[[m, bin]] = w;
            }
        }
    }
    fb
}

/// Center frequency in Hz of mel filter `m`.
pub fn mel_center_hz(m: usize, n_mels: usize, sample_rate: u32) -> f64 {
    let mel_hi = mel_from_hz(sample_rate as f64 / 2.0);
    hz_from_mel(mel_hi * (m + 1) as f64 / (n_mels + 1) as f64)
}

/// Compute log mel-filterbank features.
///
/// Frame count is `1 + floor((N - window) / hop)`; no padding is applied, so
/// a signal shorter than one window is an error.
pub fn compute_lfb(w: &Waveform, cfg: &FeatureConfig) -> Result<AudioFeatureSequence, AudioError> {
    if w.sample_rate != CANONICAL_SAMPLE_RATE {
        return Err(AudioError::UnsupportedFormat(format!(
            "expected {CANONICAL_SAMPLE_RATE} Hz, got {}",
            w.sample_rate
        )));
    }
    let window = cfg.window_samples(w.sample_rate);
    let hop = cfg.hop_samples(w.sample_rate);
    assert!(cfg.n_mels >= 1 && hop >= 1 && window >= hop, "invalid feature config");
    assert!(cfg.fft_size >= window, "fft_size must cover the window");
    let n = w.samples.len();
    if n < window {
        return Err(AudioError::TooShort { signal: n, window });
    }
    let n_frames = 1 + (n - window) / hop;

    // Preemphasis on the normalized signal.
    let mut signal = Vec::with_capacity(n);
    let scale = 1.0 / 32768.0;
    signal.push(w.samples[0] as f64 * scale);
    for i in 1..n {
        signal.push((w.samples[i] as f64 - cfg.preemphasis * w.samples[i - 1] as f64) * scale);
    }

    let hann: Vec<f64> = (0..window)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / window as f64).cos())
        .collect();

    let fb = mel_filterbank(cfg.n_mels, cfg.fft_size, w.sample_rate);
    let n_bins = cfg.fft_size / 2 + 1;

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.fft_size);
    let mut frames = Array2::<f32>::zeros((n_frames, cfg.n_mels));
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut power = vec![0.0f64; n_bins];

    for t in 0..n_frames {
        let start = t * hop;
        for i in 0..cfg.fft_size {
            let v = if i < window { signal[start + i] * hann[i] } else { 0.0 };
            buf[i] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (bin, p) in power.iter_mut().enumerate() {
            *p = buf[bin].norm_sqr();
        }
        for m in 0..cfg.n_mels {
            let mut e = 0.0;
            for bin in 0..n_bins {
                let w = fb[[m, bin]];
                if w > 0.0 {
                    e += w * power[bin];
                }
            }
            frames[[t, m]] = e.max(cfg.log_floor).ln() as f32;
        }
    }

    Ok(AudioFeatureSequence { frames, frame_hop_ms: cfg.hop_ms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sine(freq: f64, secs: f64, amp: f64) -> Waveform {
        let n = (secs * 16_000.0) as usize;
        let samples = (0..n)
            .map(|i| {
                (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin() * 16384.0)
                    as i16
            })
            .collect();
        Waveform::new(samples, 16_000).unwrap()
    }

    #[test]
    fn frame_count_matches_formula() {
        let w = Waveform::new(vec![1i16; 16_000], 16_000).unwrap();
        let cfg = FeatureConfig::default(); // window 400, hop 160
        let f = compute_lfb(&w, &cfg).unwrap();
        assert_eq!(f.num_frames(), 1 + (16_000 - 400) / 160); // 98
        assert_eq!(f.num_frames(), 98);
        assert_eq!(f.num_mels(), 80);
    }

    #[test]
    fn silence_hits_the_log_floor() {
        let w = Waveform::new(vec![0i16; 4000], 16_000).unwrap();
        let cfg = FeatureConfig::default();
        let f = compute_lfb(&w, &cfg).unwrap();
        let floor = (1e-10f64).ln() as f32;
        assert!(f.frames.iter().all(|&v| v == floor));
    }

    #[test]
    fn too_short_signal_is_rejected() {
        let w = Waveform::new(vec![1i16; 399], 16_000).unwrap();
        let err = compute_lfb(&w, &FeatureConfig::default()).unwrap_err();
        assert!(matches!(err, AudioError::TooShort { .. }));
    }

    /// Oracle: evaluate a direct DFT of each windowed frame and an
    /// independently constructed mel weighting, then check the per-frame
    /// argmax mel bin against both the implementation and the bin whose
    /// center frequency is nearest 1 kHz.
    #[test]
    fn pure_tone_peaks_at_the_nearest_mel_bin() {
        let cfg = FeatureConfig::default();
        let w = sine(1000.0, 1.0, 0.8);
        let f = compute_lfb(&w, &cfg).unwrap();

        // Independent route: direct O(N^2) DFT on the preemphasized,
        // Hann-windowed frame, then triangular weights rebuilt from the mel
        // formula.
        let window = 400;
        let hop = 160;
        let scale = 1.0 / 32768.0;
        let mut signal = vec![w.samples[0] as f64 * scale];
        for i in 1..w.samples.len() {
            signal.push((w.samples[i] as f64 - 0.97 * w.samples[i - 1] as f64) * scale);
        }
        let fb = mel_filterbank(80, 512, 16_000);
        let expect_bin = (0..80)
            .min_by(|&a, &b| {
                let da = (mel_center_hz(a, 80, 16_000) - 1000.0).abs();
                let db = (mel_center_hz(b, 80, 16_000) - 1000.0).abs();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();

        for t in (0..f.num_frames()).step_by(17) {
            let start = t * hop;
            let mut energies = vec![0.0f64; 80];
            for (m, e) in energies.iter_mut().enumerate() {
                for bin in 0..257 {
                    let wgt = fb[[m, bin]];
                    if wgt == 0.0 {
                        continue;
                    }
                    // DFT bin via direct summation over the zero-padded frame.
                    let mut re = 0.0;
                    let mut im = 0.0;
                    for i in 0..window {
                        let hann =
                            0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / 400.0).cos();
                        let v = signal[start + i] * hann;
                        let ang = -2.0 * std::f64::consts::PI * bin as f64 * i as f64 / 512.0;
                        re += v * ang.cos();
                        im += v * ang.sin();
                    }
                    *e += wgt * (re * re + im * im);
                }
            }
            let oracle_argmax =
                (0..80).max_by(|&a, &b| energies[a].partial_cmp(&energies[b]).unwrap()).unwrap();
            let impl_argmax = (0..80)
                .max_by(|&a, &b| f.frames[[t, a]].partial_cmp(&f.frames[[t, b]]).unwrap())
                .unwrap();
            assert_eq!(impl_argmax, oracle_argmax, "frame {t}");
            assert_eq!(impl_argmax, expect_bin, "frame {t}");
        }
    }

    #[test]
    fn scaling_the_waveform_shifts_log_energies_by_two_log_c() {
        let base = sine(700.0, 0.2, 0.2);
        let doubled =
            Waveform::new(base.samples.iter().map(|&s| s * 2).collect(), 16_000).unwrap();
        let cfg = FeatureConfig::default();
        let fa = compute_lfb(&base, &cfg).unwrap();
        let fb = compute_lfb(&doubled, &cfg).unwrap();
        let floor = (1e-10f64).ln() as f32;
        let shift = (2.0 * 2.0f64.ln()) as f32;
        let mut checked = 0;
        for (a, b) in fa.frames.iter().zip(fb.frames.iter()) {
            // Only compare where neither side saturated at the floor.
            if *a > floor + 0.5 && *b > floor + 0.5 {
                assert!((b - a - shift).abs() < 1e-3, "{b} - {a} != {shift}");
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn deterministic_bit_identical() {
        let w = sine(440.0, 0.3, 0.5);
        let cfg = FeatureConfig::default();
        let a = compute_lfb(&w, &cfg).unwrap();
        let b = compute_lfb(&w, &cfg).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn frame_count_formula_holds(n in 400usize..8000, window_ms in 10u32..40, hop_ms in 5u32..20) {
            prop_assume!(window_ms >= hop_ms);
            let cfg = FeatureConfig {
                window_ms,
                hop_ms,
                fft_size: 1024,
                ..FeatureConfig::default()
            };
            let window = cfg.window_samples(16_000);
            let hop = cfg.hop_samples(16_000);
            prop_assume!(n >= window);
            let w = Waveform::new(vec![100i16; n], 16_000).unwrap();
            let f = compute_lfb(&w, &cfg).unwrap();
            prop_assert_eq!(f.num_frames(), 1 + (n - window) / hop);
        }
    }
}
