//! Framing, Hann windowing, one-sided complex STFT and the
//! magnitude / sin / cos phase features consumed by the classifier.

use std::f64::consts::PI;

use num_complex::Complex64;
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Hann,
}

/// Analysis parameters. Overlap is fixed at 50%.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub overlap: f64,
    pub fft_size: usize,
    pub window_kind: WindowKind,
}

impl StftConfig {
    /// Builds a config with the FFT size set to the smallest power of two
    /// holding one window.
    pub fn new(sample_rate: u32, window_ms: f64) -> Result<Self> {
        let window = window_samples_for(sample_rate, window_ms);
        if window < 2 {
            return Err(Error::Config(format!(
                "window of {window_ms} ms at {sample_rate} Hz is shorter than 2 samples"
            )));
        }
        let cfg = StftConfig {
            sample_rate,
            window_ms,
            overlap: 0.5,
            fft_size: window.next_power_of_two(),
            window_kind: WindowKind::Hann,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// 32 ms windows for the 44.1 kHz arrays, 46 ms at 16 kHz.
    pub fn for_sample_rate(sample_rate: u32) -> Result<Self> {
        let window_ms = if sample_rate <= 16_000 { 46.0 } else { 32.0 };
        Self::new(sample_rate, window_ms)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || !(self.window_ms > 0.0) {
            return Err(Error::Config(
                "sample rate and window length must be positive".into(),
            ));
        }
        if self.overlap != 0.5 {
            return Err(Error::Config(format!(
                "overlap must be 0.5, got {}",
                self.overlap
            )));
        }
        let window = self.window_samples();
        if window < 2 {
            return Err(Error::Config("window shorter than 2 samples".into()));
        }
        if self.fft_size < window {
            return Err(Error::Config(format!(
                "fft_size {} smaller than window of {window} samples",
                self.fft_size
            )));
        }
        Ok(())
    }

    pub fn window_samples(&self) -> usize {
        window_samples_for(self.sample_rate, self.window_ms)
    }

    pub fn hop(&self) -> usize {
        self.window_samples() / 2
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        let window = self.window_samples();
        if n_samples < window {
            0
        } else {
            1 + (n_samples - window) / self.hop()
        }
    }

    pub fn window(&self) -> Vec<f64> {
        match self.window_kind {
            WindowKind::Hann => hann(self.window_samples()),
        }
    }
}

/// Largest even number of samples not exceeding the requested duration
/// (736 at 16 kHz / 46 ms, 1410 at 44.1 kHz / 32 ms).
fn window_samples_for(sample_rate: u32, window_ms: f64) -> usize {
    let exact = window_ms * sample_rate as f64 / 1000.0;
    // guard against 735.9999 style representation error
    ((exact / 2.0 + 1e-9).floor() * 2.0) as usize
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos())
        .collect()
}

/// Complex spectrogram indexed `[frame, bin]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    data: Vec<Complex64>,
    n_frames: usize,
    n_bins: usize,
    config: StftConfig,
}

impl ComplexSpectrogram {
    pub fn from_parts(
        config: StftConfig,
        n_frames: usize,
        n_bins: usize,
        data: Vec<Complex64>,
    ) -> Result<Self> {
        if data.len() != n_frames * n_bins {
            return Err(Error::shape(
                "spectrogram",
                "T*F",
                n_frames * n_bins,
                data.len(),
            ));
        }
        if data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::NonFinite("spectrogram".into()));
        }
        Ok(ComplexSpectrogram {
            data,
            n_frames,
            n_bins,
            config,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn get(&self, t: usize, f: usize) -> Complex64 {
        self.data[t * self.n_bins + f]
    }
}

/// Reusable STFT engine; planning the FFT once per config.
pub struct Stft {
    config: StftConfig,
    window: Vec<f64>,
    fft: std::sync::Arc<dyn realfft::RealToComplex<f64>>,
}

impl Stft {
    pub fn new(config: &StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = RealFftPlanner::<f64>::new();
        Ok(Stft {
            config: config.clone(),
            window: config.window(),
            fft: planner.plan_fft_forward(config.fft_size),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    /// Writes the spectrogram of `waveform` into `re` and `im`, each `T*F`.
    pub fn process_into(&self, waveform: &[f64], re: &mut [f64], im: &mut [f64]) -> Result<()> {
        let window_len = self.window.len();
        if waveform.len() < window_len {
            return Err(Error::ClipTooShort {
                len: waveform.len(),
                needed: window_len,
            });
        }
        let n_frames = self.config.n_frames(waveform.len());
        let n_bins = self.config.n_bins();
        let hop = self.config.hop();
        if re.len() != n_frames * n_bins || im.len() != n_frames * n_bins {
            return Err(Error::shape(
                "stft output",
                "T*F",
                n_frames * n_bins,
                re.len(),
            ));
        }
        let mut frame = self.fft.make_input_vec();
        let mut spectrum = self.fft.make_output_vec();
        let mut scratch = self.fft.make_scratch_vec();
        for t in 0..n_frames {
            let start = t * hop;
            frame.iter_mut().for_each(|v| *v = 0.0);
            for (i, (dst, &w)) in frame.iter_mut().zip(&self.window).enumerate() {
                *dst = waveform[start + i] * w;
            }
            self.fft
                .process_with_scratch(&mut frame, &mut spectrum, &mut scratch)
                .map_err(|e| Error::Config(format!("fft: {e}")))?;
            let row = t * n_bins;
            for (f, c) in spectrum.iter().enumerate() {
                re[row + f] = c.re;
                im[row + f] = c.im;
            }
        }
        Ok(())
    }

    pub fn process(&self, waveform: &[f64]) -> Result<ComplexSpectrogram> {
        if waveform.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("waveform".into()));
        }
        let n_frames = self.config.n_frames(waveform.len());
        let n_bins = self.config.n_bins();
        let mut re = vec![0.0; n_frames * n_bins];
        let mut im = vec![0.0; n_frames * n_bins];
        self.process_into(waveform, &mut re, &mut im)?;
        let data = re
            .into_iter()
            .zip(im)
            .map(|(r, i)| Complex64::new(r, i))
            .collect();
        Ok(ComplexSpectrogram {
            data,
            n_frames,
            n_bins,
            config: self.config.clone(),
        })
    }
}

/// One-sided complex STFT of a real waveform.
pub fn stft(waveform: &[f64], config: &StftConfig) -> Result<ComplexSpectrogram> {
    Stft::new(config)?.process(waveform)
}

/// Magnitude, sin(phase), cos(phase) indexed `[frame, bin, channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    data: Vec<f64>,
    n_frames: usize,
    n_bins: usize,
}

impl FeatureTensor {
    pub const CHANNELS: usize = 3;

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, t: usize, f: usize, c: usize) -> f64 {
        self.data[(t * self.n_bins + f) * Self::CHANNELS + c]
    }

    /// Channel-first copy `[3, T, F]`, the layout the classifier consumes.
    pub fn to_channel_first(&self) -> Vec<f64> {
        let plane = self.n_frames * self.n_bins;
        let mut out = vec![0.0; Self::CHANNELS * plane];
        for (i, cell) in self.data.chunks_exact(Self::CHANNELS).enumerate() {
            for (c, v) in cell.iter().enumerate() {
                out[c * plane + i] = *v;
            }
        }
        out
    }
}

/// `(|x|, sin ∠x, cos ∠x)` with the convention `(0, 0, 1)` at the origin.
#[inline]
pub fn polar_features(re: f64, im: f64) -> (f64, f64, f64) {
    let mag = re.hypot(im);
    if mag > 0.0 {
        (mag, im / mag, re / mag)
    } else {
        (0.0, 0.0, 1.0)
    }
}

pub fn phase_features(spec: &ComplexSpectrogram) -> Result<FeatureTensor> {
    let mut data = Vec::with_capacity(spec.data.len() * FeatureTensor::CHANNELS);
    for c in &spec.data {
        if !c.re.is_finite() || !c.im.is_finite() {
            return Err(Error::NonFinite("spectrogram".into()));
        }
        let (mag, s, co) = polar_features(c.re, c.im);
        data.extend_from_slice(&[mag, s, co]);
    }
    Ok(FeatureTensor {
        data,
        n_frames: spec.n_frames,
        n_bins: spec.n_bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg16k() -> StftConfig {
        StftConfig::for_sample_rate(16_000).unwrap()
    }

    #[test]
    fn framing_at_16k() {
        let cfg = cfg16k();
        assert_eq!(cfg.window_samples(), 736);
        assert_eq!(cfg.hop(), 368);
        assert_eq!(cfg.fft_size, 1024);
        assert_eq!(cfg.n_bins(), 513);
        assert_eq!(cfg.n_frames(16_000), 42);
    }

    #[test]
    fn framing_at_44k() {
        let cfg = StftConfig::for_sample_rate(44_100).unwrap();
        assert_eq!(cfg.window_samples(), 1410);
        assert_eq!(cfg.hop(), 705);
        assert_eq!(cfg.fft_size, 2048);
        assert_eq!(cfg.n_frames(44_100), 61);
    }

    #[test]
    fn zero_input_gives_zero_spectrogram() {
        let spec = stft(&vec![0.0; 16_000], &cfg16k()).unwrap();
        assert_eq!(spec.n_frames(), 42);
        assert_eq!(spec.n_bins(), 513);
        assert!(spec.data().iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn short_clip_is_rejected() {
        let err = stft(&vec![0.0; 100], &cfg16k()).unwrap_err();
        assert!(matches!(
            err,
            Error::ClipTooShort {
                len: 100,
                needed: 736
            }
        ));
    }

    #[test]
    fn sine_at_bin_frequency_peaks_at_that_bin() {
        let cfg = cfg16k();
        let k = 37;
        let freq = k as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64;
        let x: Vec<f64> = (0..16_000)
            .map(|n| (2.0 * PI * freq * n as f64 / cfg.sample_rate as f64).sin())
            .collect();
        let spec = stft(&x, &cfg).unwrap();

        // Direct DFT of the first windowed, zero-padded frame.
        let w = cfg.window();
        let dft_bin = |bin: usize| {
            let mut acc = Complex64::new(0.0, 0.0);
            for (n, wn) in w.iter().enumerate() {
                let ang = -2.0 * PI * (bin * n) as f64 / cfg.fft_size as f64;
                acc += Complex64::from_polar(x[n] * wn, ang);
            }
            acc
        };
        for bin in [k - 1, k, k + 1, 100] {
            assert!((dft_bin(bin) - spec.get(0, bin)).norm() < 1e-9);
        }

        for t in 1..spec.n_frames() - 1 {
            let (argmax, _) = (0..spec.n_bins())
                .map(|f| (f, spec.get(t, f).norm()))
                .fold((0, -1.0), |a, b| if b.1 > a.1 { b } else { a });
            assert_eq!(argmax, k, "frame {t}");
        }
    }

    #[test]
    fn parseval_matches_hann_energy() {
        let cfg = cfg16k();
        let w = cfg.window();
        let x = vec![1.0; cfg.window_samples()];
        let spec = stft(&x, &cfg).unwrap();
        let n = cfg.fft_size;
        let spectral: f64 = (0..cfg.n_bins())
            .map(|f| {
                let e = spec.get(0, f).norm_sqr();
                if f == 0 || f == n / 2 {
                    e
                } else {
                    2.0 * e
                }
            })
            .sum::<f64>()
            / n as f64;
        let temporal: f64 = w.iter().map(|v| v * v).sum();
        let analytic = 3.0 * cfg.window_samples() as f64 / 8.0;
        assert!((spectral - temporal).abs() / temporal < 1e-9);
        assert!((temporal - analytic).abs() / analytic < 1e-9);
    }

    #[test]
    fn phase_feature_examples() {
        let cfg = cfg16k();
        let cells = vec![
            Complex64::new(3.0, 0.0),
            Complex64::new(0.0, 2.0),
            Complex64::new(-1.0, -1.0),
            Complex64::new(0.0, 0.0),
        ];
        let spec = ComplexSpectrogram::from_parts(cfg, 1, 4, cells).unwrap();
        let feat = phase_features(&spec).unwrap();
        let expect = [
            (3.0, 0.0, 1.0),
            (2.0, 1.0, 0.0),
            (2f64.sqrt(), -(2f64.sqrt()) / 2.0, -(2f64.sqrt()) / 2.0),
            (0.0, 0.0, 1.0),
        ];
        for (f, (m, s, c)) in expect.iter().enumerate() {
            // atan2 route as the independent oracle for the phase
            let z = spec.get(0, f);
            let ang = z.im.atan2(z.re);
            if z.norm() > 0.0 {
                assert!((ang.sin() - s).abs() < 1e-12);
                assert!((ang.cos() - c).abs() < 1e-12);
            }
            assert!((feat.get(0, f, 0) - m).abs() < 1e-12);
            assert!((feat.get(0, f, 1) - s).abs() < 1e-12);
            assert!((feat.get(0, f, 2) - c).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut x = vec![0.0; 16_000];
        x[5] = f64::NAN;
        assert!(matches!(stft(&x, &cfg16k()), Err(Error::NonFinite(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn stft_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let cfg = StftConfig::new(8_000, 32.0).unwrap();
            let len = 2_000;
            let x: Vec<f64> = (0..len).map(|i| ((i as u64 * 7919 + seed) as f64 * 0.013).sin()).collect();
            let y: Vec<f64> = (0..len).map(|i| ((i as u64 * 104_729 + seed) as f64 * 0.029).cos()).collect();
            let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let (sx, sy, sm) = (stft(&x, &cfg).unwrap(), stft(&y, &cfg).unwrap(), stft(&mix, &cfg).unwrap());
            let scale = sm.data().iter().map(|c| c.norm()).fold(1e-300, f64::max);
            for i in 0..sm.data().len() {
                let lin = sx.data()[i] * a + sy.data()[i] * b;
                prop_assert!((lin - sm.data()[i]).norm() <= 1e-9 * scale);
            }
        }

        #[test]
        fn features_reconstruct_spectrum(re in -10.0f64..10.0, im in -10.0f64..10.0) {
            let (m, s, c) = polar_features(re, im);
            prop_assert!(m >= 0.0);
            if m > 0.0 {
                prop_assert!((s * s + c * c - 1.0).abs() < 1e-12);
                prop_assert!((m * c - re).abs() < 1e-9);
                prop_assert!((m * s - im).abs() < 1e-9);
            }
        }
    }
}
