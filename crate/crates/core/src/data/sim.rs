//! Synthetic multi-channel genuine/replay recordings.
//!
//! Every clip is rendered in the frequency domain: a speech-like source is
//! sent along a handful of point-source paths (direct sound plus sparse
//! image-source reflections) to a uniform circular array. Replays first
//! pass through a mono recording room, a driven loudspeaker and a
//! band-pass, then are played from a loudspeaker placed close to the
//! array, where per-microphone distances differ noticeably.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use super::{write_manifest, ClipRecord, Env, MicId, Split};
use crate::error::{Error, Result};
use crate::objective::Label;

const SPEED_OF_SOUND: f64 = 343.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub n_channels: usize,
    pub sample_rate: u32,
    pub n_genuine: usize,
    pub n_replay: usize,
    #[serde(default = "defaults::duration_s")]
    pub duration_s: f64,
    /// Fraction of each (label, env) group assigned to the test split.
    #[serde(default = "defaults::test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "defaults::array_radius_m")]
    pub array_radius_m: f64,
    /// Range of the talker's low-pass corner; lower values model muffled
    /// or off-axis speech.
    #[serde(default = "defaults::source_cutoff_hz")]
    pub source_cutoff_hz: [f64; 2],
    #[serde(default = "defaults::source_highpass_hz")]
    pub source_highpass_hz: [f64; 2],
    /// One room per env tag; clips are assigned round-robin.
    #[serde(default = "defaults::rooms")]
    pub rooms: Vec<RoomConfig>,
    #[serde(default)]
    pub replay_chain: ReplayChain,
    #[serde(default)]
    pub noise: NoiseConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomConfig {
    pub env: Env,
    pub talker_distance_m: [f64; 2],
    pub loudspeaker_distance_m: [f64; 2],
    pub reflections: usize,
    /// Reflection delay relative to the direct path.
    pub reflection_delay_ms: [f64; 2],
    /// Reflection coefficient. Amplitudes also fall off with path length,
    /// so a close source sees weaker reflections relative to its direct
    /// sound.
    pub reflection_gain: [f64; 2],
    /// Direction of talker and loudspeaker, degrees from the array's
    /// front. Both classes share it, so direction alone says nothing
    /// about the label.
    #[serde(default = "defaults::source_azimuth_deg")]
    pub source_azimuth_deg: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplayChain {
    pub low_hz: f64,
    /// Defaults to 0.35 of the sample rate.
    pub high_hz: Option<f64>,
    /// tanh drive range.
    pub drive: [f64; 2],
    /// Reflections of the room the attacker recorded in.
    pub spoof_reflections: usize,
    pub spoof_reflection_delay_ms: [f64; 2],
    pub spoof_reflection_gain: [f64; 2],
}

impl Default for ReplayChain {
    fn default() -> Self {
        ReplayChain {
            low_hz: 100.0,
            high_hz: None,
            drive: [1.0, 1.5],
            spoof_reflections: 4,
            spoof_reflection_delay_ms: [2.0, 30.0],
            spoof_reflection_gain: [0.1, 0.35],
        }
    }
}

impl ReplayChain {
    pub fn high_hz(&self, sample_rate: u32) -> f64 {
        self.high_hz.unwrap_or(0.35 * f64::from(sample_rate))
    }
}

/// Independent per-microphone noise with a random spectral tilt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub enabled: bool,
    pub snr_db: [f64; 2],
    /// Exponent range of the `(1 + f/500)^-tilt` noise spectrum.
    pub tilt: [f64; 2],
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            enabled: true,
            snr_db: [10.0, 30.0],
            tilt: [0.0, 1.0],
        }
    }
}

mod defaults {
    use super::{Env, RoomConfig};

    pub fn duration_s() -> f64 {
        1.0
    }

    pub fn test_fraction() -> f64 {
        0.2
    }

    pub fn array_radius_m() -> f64 {
        0.05
    }

    pub fn source_cutoff_hz() -> [f64; 2] {
        [3000.0, 8000.0]
    }

    pub fn source_highpass_hz() -> [f64; 2] {
        [50.0, 160.0]
    }

    pub fn source_azimuth_deg() -> [f64; 2] {
        [-45.0, 45.0]
    }

    pub fn rooms() -> Vec<RoomConfig> {
        vec![
            RoomConfig {
                env: Env::A,
                talker_distance_m: [1.0, 2.5],
                loudspeaker_distance_m: [0.07, 0.15],
                reflections: 4,
                reflection_delay_ms: [1.0, 8.0],
                reflection_gain: [0.2, 0.6],
                source_azimuth_deg: source_azimuth_deg(),
            },
            RoomConfig {
                env: Env::B,
                talker_distance_m: [1.0, 3.0],
                loudspeaker_distance_m: [0.07, 0.15],
                reflections: 8,
                reflection_delay_ms: [2.0, 20.0],
                reflection_gain: [0.2, 0.6],
                source_azimuth_deg: source_azimuth_deg(),
            },
        ]
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && lo <= r[0] && r[0] <= r[1] && r[1] <= hi) {
        return Err(Error::Config(format!(
            "{name}: range {r:?} must be ordered within [{lo}, {hi}]"
        )));
    }
    Ok(())
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SimConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("simulator config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0 || self.n_channels > u16::MAX as usize {
            return Err(Error::Config("n_channels must be at least 1".into()));
        }
        if self.sample_rate < 1000 {
            return Err(Error::Config("sample_rate must be at least 1000 Hz".into()));
        }
        if !(self.duration_s > 0.0 && self.duration_s <= 10.0) {
            return Err(Error::Config("duration_s must be in (0, 10]".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config("test_fraction must be in [0, 1)".into()));
        }
        if !(self.array_radius_m >= 0.0 && self.array_radius_m < 1.0) {
            return Err(Error::Config("array_radius_m must be in [0, 1)".into()));
        }
        if self.rooms.is_empty() {
            return Err(Error::Config("at least one room is required".into()));
        }
        for room in &self.rooms {
            let env = room.env;
            let min_distance = self.array_radius_m + 0.01;
            check_range(
                &format!("room {env} talker_distance_m"),
                room.talker_distance_m,
                min_distance,
                30.0,
            )?;
            check_range(
                &format!("room {env} loudspeaker_distance_m"),
                room.loudspeaker_distance_m,
                min_distance,
                30.0,
            )?;
            check_range(
                &format!("room {env} reflection_delay_ms"),
                room.reflection_delay_ms,
                0.0,
                200.0,
            )?;
            check_range(
                &format!("room {env} reflection_gain"),
                room.reflection_gain,
                0.0,
                1.0,
            )?;
            check_range(
                &format!("room {env} source_azimuth_deg"),
                room.source_azimuth_deg,
                -180.0,
                180.0,
            )?;
        }
        let nyquist = f64::from(self.sample_rate) / 2.0;
        check_range("source_cutoff_hz", self.source_cutoff_hz, 1.0, 1e6)?;
        check_range(
            "source_highpass_hz",
            self.source_highpass_hz,
            0.0,
            self.source_cutoff_hz[0],
        )?;
        let chain = &self.replay_chain;
        let high = chain.high_hz(self.sample_rate);
        if !(chain.low_hz >= 0.0 && chain.low_hz < high && high <= nyquist) {
            return Err(Error::Config(format!(
                "replay band-pass [{}, {high}] Hz must be ordered and inside Nyquist ({nyquist} Hz)",
                chain.low_hz
            )));
        }
        check_range("replay_chain drive", chain.drive, 1e-3, 100.0)?;
        check_range(
            "replay_chain spoof_reflection_delay_ms",
            chain.spoof_reflection_delay_ms,
            0.0,
            200.0,
        )?;
        check_range(
            "replay_chain spoof_reflection_gain",
            chain.spoof_reflection_gain,
            0.0,
            1.0,
        )?;
        check_range("noise snr_db", self.noise.snr_db, -20.0, 120.0)?;
        check_range("noise tilt", self.noise.tilt, 0.0, 4.0)?;
        Ok(())
    }

    fn n_samples(&self) -> usize {
        (self.duration_s * f64::from(self.sample_rate)).round() as usize
    }

    fn mic_positions(&self) -> Vec<[f64; 2]> {
        let n = self.n_channels as f64;
        (0..self.n_channels)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / n;
                [self.array_radius_m * a.cos(), self.array_radius_m * a.sin()]
            })
            .collect()
    }
}

/// One arrival from a point source at `distance` metres and `azimuth`
/// from the array centre; `gain` applies at the centre.
#[derive(Clone, Copy, Debug)]
struct Path1 {
    gain: f64,
    distance: f64,
    azimuth: f64,
}

struct Renderer {
    sr: f64,
    n_fft: usize,
    len: usize,
    mics: Vec<[f64; 2]>,
    fwd: Arc<dyn RealToComplex<f64>>,
    inv: Arc<dyn ComplexToReal<f64>>,
}

impl Renderer {
    fn new(cfg: &SimConfig) -> Self {
        let len = cfg.n_samples();
        let n_fft = (2 * len).next_power_of_two();
        let mut planner = RealFftPlanner::new();
        Renderer {
            sr: f64::from(cfg.sample_rate),
            n_fft,
            len,
            mics: cfg.mic_positions(),
            fwd: planner.plan_fft_forward(n_fft),
            inv: planner.plan_fft_inverse(n_fft),
        }
    }

    fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    fn hz(&self, k: usize) -> f64 {
        k as f64 * self.sr / self.n_fft as f64
    }

    fn spectrum(&self, signal: &[f64]) -> Vec<Complex64> {
        let mut buf = vec![0.0; self.n_fft];
        buf[..signal.len()].copy_from_slice(signal);
        let mut out = self.fwd.make_output_vec();
        self.fwd.process(&mut buf, &mut out).expect("fft length");
        out
    }

    /// Full-length inverse transform (unnormalized FFT pair undone here).
    fn waveform(&self, spec: &[Complex64]) -> Vec<f64> {
        let mut s = spec.to_vec();
        s[0].im = 0.0;
        if let Some(last) = s.last_mut() {
            last.im = 0.0;
        }
        let mut out = vec![0.0; self.n_fft];
        self.inv.process(&mut s, &mut out).expect("fft length");
        let scale = 1.0 / self.n_fft as f64;
        out.iter_mut().for_each(|v| *v *= scale);
        out
    }

    /// Adds `gain * exp(-j w delay) * src` to `dst`.
    fn add_delayed(&self, src: &[Complex64], gain: f64, delay: f64, dst: &mut [Complex64]) {
        let step = Complex64::from_polar(1.0, -2.0 * PI * delay / self.n_fft as f64);
        let mut rot = Complex64::new(gain, 0.0);
        for (d, s) in dst.iter_mut().zip(src) {
            *d += rot * s;
            rot *= step;
        }
    }

    /// Per-microphone spectra of `src` arriving along `paths`.
    fn to_array(&self, src: &[Complex64], paths: &[Path1]) -> Vec<Vec<Complex64>> {
        self.mics
            .iter()
            .map(|p| {
                let mut acc = vec![Complex64::new(0.0, 0.0); self.bins()];
                for path in paths {
                    let sx = path.distance * path.azimuth.cos() - p[0];
                    let sy = path.distance * path.azimuth.sin() - p[1];
                    let d = sx.hypot(sy);
                    let delay = d / SPEED_OF_SOUND * self.sr;
                    self.add_delayed(src, path.gain * path.distance / d, delay, &mut acc);
                }
                acc
            })
            .collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Separate counter-based streams so clips do not depend on each other.
fn stream(seed: u64, kind: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((kind << 40) | index as u64);
    rng
}

/// Hann-shaped bursts at random positions.
fn bursts(
    rng: &mut ChaCha8Rng,
    len: usize,
    sr: f64,
    count: usize,
    width_s: [f64; 2],
    amp: [f64; 2],
) -> Vec<f64> {
    let mut env = vec![0.0; len];
    for _ in 0..count {
        let width = (uniform(rng, width_s) * sr) as usize;
        let start = rng.random_range(0..len) as isize - width as isize / 2;
        let a = uniform(rng, amp);
        for i in 0..width {
            let n = start + i as isize;
            if (0..len as isize).contains(&n) {
                env[n as usize] += a * (PI * i as f64 / width as f64).sin().powi(2);
            }
        }
    }
    env
}

/// Speech-like source spectrum: a formant-shaped glottal pulse train
/// under syllable envelopes plus high-frequency fricative noise bursts.
fn source(r: &Renderer, cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
    let (len, sr) = (r.len, r.sr);
    let f0 = uniform(rng, [90.0, 250.0]);
    let drift = uniform(rng, [-0.15, 0.15]);
    let count = rng.random_range(3..7);
    let voiced_env = bursts(rng, len, sr, count, [0.08, 0.3], [0.5, 1.0]);
    let mut pulses = vec![0.0; len];
    let mut phase = 0.0;
    for (n, p) in pulses.iter_mut().enumerate() {
        let f = f0 * (1.0 + drift * (2.0 * PI * 1.5 * n as f64 / sr).sin());
        phase += f / sr;
        if phase >= 1.0 {
            phase -= 1.0;
            *p = voiced_env[n];
        }
    }
    let count = rng.random_range(1..4);
    let fric_env = bursts(rng, len, sr, count, [0.04, 0.12], [0.05, 0.4]);
    let noise: Vec<f64> = fric_env
        .iter()
        .map(|e| e * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect();

    let formants: Vec<(f64, f64)> = [[300.0, 900.0], [900.0, 2500.0], [2200.0, 3600.0]]
        .iter()
        .map(|&range| (uniform(rng, range), uniform(rng, [60.0, 200.0])))
        .collect();
    let tilt = uniform(rng, [0.3, 1.3]);
    let fric_hz = uniform(rng, [2500.0, 5000.0]);
    let cutoff = uniform(rng, cfg.source_cutoff_hz);
    let highpass = uniform(rng, cfg.source_highpass_hz);
    let mut v = r.spectrum(&pulses);
    let u = r.spectrum(&noise);
    for (k, (vk, uk)) in v.iter_mut().zip(&u).enumerate() {
        let f = r.hz(k);
        let shape: f64 = 0.05
            + formants
                .iter()
                .map(|(c, b)| 1.0 / (1.0 + ((f - c) / b).powi(2)))
                .sum::<f64>();
        let hp = (f / fric_hz).powi(2) / (1.0 + (f / fric_hz).powi(2));
        let band =
            1.0 / ((1.0 + (f / cutoff).powi(24)) * (1.0 + (highpass / f.max(1e-9)).powi(8))).sqrt();
        *vk = (*vk * shape * (1.0 + f / 500.0).powf(-tilt) + uk * hp) * band;
    }
    v[0] = Complex64::new(0.0, 0.0);
    let energy: f64 = r.waveform(&v)[..len].iter().map(|x| x * x).sum();
    let scale = if energy > 0.0 {
        (len as f64 / energy).sqrt()
    } else {
        0.0
    };
    v.iter_mut().for_each(|x| *x *= scale);
    v
}

/// Direct path from `distance` metres plus image-source reflections.
fn room_paths(
    rng: &mut ChaCha8Rng,
    room: &RoomConfig,
    distance: f64,
) -> Vec<Path1> {
    let mut paths = vec![Path1 {
        gain: 1.0,
        distance,
        azimuth: uniform(rng, room.source_azimuth_deg).to_radians(),
    }];
    for _ in 0..room.reflections {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let extra = uniform(rng, room.reflection_delay_ms) * 1e-3 * SPEED_OF_SOUND;
        // spherical spreading relative to the direct path
        let spreading = distance / (distance + extra);
        paths.push(Path1 {
            gain: sign * uniform(rng, room.reflection_gain) * spreading,
            distance: distance + extra,
            azimuth: rng.random_range(0.0..2.0 * PI),
        });
    }
    paths
}

/// Loudspeaker output spectrum for a replay of `src`.
fn replay_chain(
    r: &Renderer,
    cfg: &SimConfig,
    rng: &mut ChaCha8Rng,
    src: &[Complex64],
) -> Vec<Complex64> {
    let chain = &cfg.replay_chain;
    let ms = r.sr / 1000.0;
    let mut rec = src.to_vec();
    for _ in 0..chain.spoof_reflections {
        let g = uniform(rng, chain.spoof_reflection_gain);
        let d = uniform(rng, chain.spoof_reflection_delay_ms) * ms;
        r.add_delayed(src, g, d, &mut rec);
    }
    let mut wave = r.waveform(&rec);
    let peak = wave.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let drive = uniform(rng, chain.drive);
    if peak > 0.0 {
        wave.iter_mut()
            .for_each(|v| *v = (drive * *v / peak).tanh() / drive.tanh() * peak);
    }
    let mut spec = r.spectrum(&wave);
    let (low, high) = (chain.low_hz, chain.high_hz(cfg.sample_rate));
    let ramp = (0.05 * (high - low)).min(50.0);
    for (k, s) in spec.iter_mut().enumerate() {
        let f = r.hz(k);
        let gain = if f < low || f > high {
            0.0
        } else if f < low + ramp {
            (0.5 * PI * (f - low) / ramp).sin().powi(2)
        } else if f > high - ramp {
            (0.5 * PI * (high - f) / ramp).sin().powi(2)
        } else {
            1.0
        };
        *s *= gain;
    }
    spec
}

fn add_noise(r: &Renderer, cfg: &SimConfig, rng: &mut ChaCha8Rng, channels: &mut [Vec<f64>]) {
    let power =
        channels.iter().flatten().map(|v| v * v).sum::<f64>() / (channels.len() * r.len) as f64;
    let snr = uniform(rng, cfg.noise.snr_db);
    let tilt = uniform(rng, cfg.noise.tilt);
    let target = power * 10f64.powf(-snr / 10.0);
    for ch in channels.iter_mut() {
        let white: Vec<f64> = (0..r.len).map(|_| StandardNormal.sample(rng)).collect();
        let mut spec = r.spectrum(&white);
        for (k, s) in spec.iter_mut().enumerate() {
            *s *= (1.0 + r.hz(k) / 500.0).powf(-tilt);
        }
        let noise = r.waveform(&spec);
        let p = noise[..r.len].iter().map(|v| v * v).sum::<f64>() / r.len as f64;
        let scale = if p > 0.0 { (target / p).sqrt() } else { 0.0 };
        for (c, n) in ch.iter_mut().zip(&noise) {
            *c += scale * n;
        }
    }
}

fn finish(
    r: &Renderer,
    cfg: &SimConfig,
    rng: &mut ChaCha8Rng,
    spectra: Vec<Vec<Complex64>>,
) -> Vec<Vec<f64>> {
    let mut channels: Vec<Vec<f64>> = spectra
        .iter()
        .map(|s| {
            let mut w = r.waveform(s);
            w.truncate(r.len);
            w
        })
        .collect();
    if cfg.noise.enabled {
        add_noise(r, cfg, rng, &mut channels);
    }
    let peak = channels
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let level = uniform(rng, [0.3, 0.9]);
    if peak > 0.0 {
        channels
            .iter_mut()
            .flatten()
            .for_each(|v| *v *= level / peak);
    }
    channels
}

fn room_for(cfg: &SimConfig, index: usize) -> &RoomConfig {
    &cfg.rooms[index % cfg.rooms.len()]
}

fn render(r: &Renderer, cfg: &SimConfig, label: Label, index: usize) -> Vec<Vec<f64>> {
    let src = source(r, cfg, &mut stream(cfg.seed, 0, index));
    let room = room_for(cfg, index);
    match label {
        Label::Genuine => {
            let mut rng = stream(cfg.seed, 1, index);
            let distance = uniform(&mut rng, room.talker_distance_m);
            let paths = room_paths(&mut rng, room, distance);
            finish(r, cfg, &mut rng, r.to_array(&src, &paths))
        }
        Label::Replay => {
            let mut rng = stream(cfg.seed, 2, index);
            let speaker = replay_chain(r, cfg, &mut rng, &src);
            let distance = uniform(&mut rng, room.loudspeaker_distance_m);
            let paths = room_paths(&mut rng, room, distance);
            finish(r, cfg, &mut rng, r.to_array(&speaker, &paths))
        }
    }
}

/// The genuine and replayed renderings of source `index`, as
/// `[channel][sample]` waveforms before quantization.
pub fn simulate_pair(config: &SimConfig, index: usize) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    config.validate()?;
    let r = Renderer::new(config);
    Ok((
        render(&r, config, Label::Genuine, index),
        render(&r, config, Label::Replay, index),
    ))
}

fn write_wav(path: &Path, channels: &[Vec<f64>], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: channels.len() as u16,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let audio = |e: hound::Error| Error::Audio {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(audio)?;
    let len = channels.first().map_or(0, Vec::len);
    for n in 0..len {
        for ch in channels {
            let q = (ch[n] * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            w.write_sample(q).map_err(audio)?;
        }
    }
    w.finalize().map_err(audio)
}

/// Renders all clips as PCM16 WAVs under `out_dir/clips` and writes
/// `out_dir/manifest.csv` with relative paths. Returns the manifest path.
pub fn simulate_dataset(config: &SimConfig, out_dir: &Path) -> Result<PathBuf> {
    config.validate()?;
    let clips = out_dir.join("clips");
    std::fs::create_dir_all(&clips).map_err(|e| Error::io(&clips, e))?;
    let r = Renderer::new(config);
    let n_rooms = config.rooms.len();
    let mut records = Vec::with_capacity(config.n_genuine + config.n_replay);
    for (label, count) in [
        (Label::Genuine, config.n_genuine),
        (Label::Replay, config.n_replay),
    ] {
        for index in 0..count {
            let name = format!("{}{index:05}.wav", &label.as_str()[..1]);
            write_wav(
                &clips.join(&name),
                &render(&r, config, label, index),
                config.sample_rate,
            )?;
            // the last `test_fraction` of each (label, room) group is held out
            let slot = index % n_rooms;
            let group = count / n_rooms + usize::from(slot < count % n_rooms);
            let n_test = (group as f64 * config.test_fraction).round() as usize;
            let split = if index / n_rooms >= group - n_test {
                Split::Test
            } else {
                Split::Train
            };
            records.push(ClipRecord {
                path: PathBuf::from("clips").join(name),
                label,
                mic_id: MicId::Synthetic,
                env: room_for(config, index).env,
                split,
                n_channels: config.n_channels,
                sample_rate: config.sample_rate,
            });
        }
    }
    let manifest = out_dir.join("manifest.csv");
    write_manifest(&manifest, &records)?;
    log::info!(
        "simulated {} clips into {}",
        records.len(),
        out_dir.display()
    );
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_manifest, read_clip};

    fn small(n_genuine: usize, n_replay: usize) -> SimConfig {
        SimConfig::from_toml(&format!(
            "seed = 11\nn_channels = 4\nsample_rate = 16000\nn_genuine = {n_genuine}\nn_replay = {n_replay}\n"
        ))
        .unwrap()
    }

    #[test]
    fn count_contract_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(5, 5);
        let manifest = simulate_dataset(&cfg, dir.path()).unwrap();
        let records = load_manifest(&manifest).unwrap();
        assert_eq!(records.len(), 10);
        for (i, rec) in records.iter().enumerate() {
            let clip = read_clip(rec).unwrap();
            assert_eq!(clip.n_channels(), 4);
            let label = if i < 5 { Label::Genuine } else { Label::Replay };
            assert_eq!(rec.label, label);
            let (g, rp) = simulate_pair(&cfg, i % 5).unwrap();
            let want = if i < 5 { g } else { rp };
            for (a, b) in clip.samples.iter().flatten().zip(want.iter().flatten()) {
                assert!((a - b).abs() <= 1.0 / 32768.0, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn deterministic_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = small(3, 2);
        simulate_dataset(&cfg, a.path()).unwrap();
        simulate_dataset(&cfg, b.path()).unwrap();
        for name in ["manifest.csv", "clips/g00002.wav", "clips/r00001.wav"] {
            assert_eq!(
                std::fs::read(a.path().join(name)).unwrap(),
                std::fs::read(b.path().join(name)).unwrap()
            );
        }
    }

    #[test]
    fn splits_and_envs_are_balanced() {
        let dir = tempfile::tempdir().unwrap();
        let records =
            load_manifest(&simulate_dataset(&small(10, 10), dir.path()).unwrap()).unwrap();
        for label in [Label::Genuine, Label::Replay] {
            for env in [Env::A, Env::B] {
                let group: Vec<_> = records
                    .iter()
                    .filter(|r| r.label == label && r.env == env)
                    .collect();
                assert_eq!(group.len(), 5);
                assert_eq!(group.iter().filter(|r| r.split == Split::Test).count(), 1);
            }
        }
    }

    /// Fraction of the energy of all channels above `hz`.
    fn high_band_share(channels: &[Vec<f64>], sample_rate: f64, hz: f64) -> f64 {
        let mut planner = realfft::RealFftPlanner::<f64>::new();
        let (mut high, mut total) = (0.0, 0.0);
        for ch in channels {
            let fft = planner.plan_fft_forward(ch.len());
            let mut input = ch.clone();
            let mut spec = fft.make_output_vec();
            fft.process(&mut input, &mut spec).unwrap();
            for (k, s) in spec.iter().enumerate() {
                let p = s.norm_sqr();
                total += p;
                if k as f64 * sample_rate / ch.len() as f64 > hz {
                    high += p;
                }
            }
        }
        high / total
    }

    #[test]
    fn replay_high_band_is_attenuated_20_db() {
        // a bright talker and no sensor noise, so the band above the
        // loudspeaker edge holds energy only in genuine clips
        let mut cfg = small(8, 8);
        cfg.noise.enabled = false;
        cfg.source_cutoff_hz = [7500.0, 7900.0];
        let edge = cfg.replay_chain.high_hz(cfg.sample_rate);
        for i in 0..8 {
            let (g, r) = simulate_pair(&cfg, i).unwrap();
            let sr = f64::from(cfg.sample_rate);
            let ratio_db = 10.0 * (high_band_share(&g, sr, edge) / high_band_share(&r, sr, edge)).log10();
            assert!(ratio_db >= 20.0, "pair {i}: {ratio_db:.1} dB");
        }
    }

    #[test]
    fn band_pass_outside_nyquist_is_rejected() {
        let mut cfg = small(1, 1);
        cfg.replay_chain.high_hz = Some(9000.0);
        assert!(cfg.validate().is_err());
        assert!(SimConfig::from_toml("seed = 1\nn_channels = 2\nsample_rate = 16000\nn_genuine = 1\nn_replay = 1\nbogus = 3\n").is_err());
    }
}
