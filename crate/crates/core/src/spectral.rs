//! STFT / iSTFT front-end.
//!
//! Frames are centered with reflect padding of `fft_size / 2` on both sides.
//! Synthesis is weighted overlap-add normalized by the summed squared window,
//! which makes `istft(stft(x))` exact up to rounding for any window whose
//! shifted squares never vanish.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array3;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance for the constant overlap-add check.
pub const COLA_TOLERANCE: f64 = 1e-10;

const ENVELOPE_FLOOR: f64 = 1e-11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    /// Periodic Hann, `0.5 - 0.5 cos(2 pi n / N)`.
    #[default]
    Hann,
    Rectangular,
}

impl WindowKind {
    pub fn weights(self, len: usize) -> Vec<f64> {
        match self {
            WindowKind::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
                .collect(),
            WindowKind::Rectangular => vec![1.0; len],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub fft_size: usize,
    pub hop: usize,
    #[serde(default)]
    pub window: WindowKind,
    pub sample_rate: u32,
    /// Drop the Nyquist bin so that `F = fft_size / 2`. Makes the round trip lossy.
    #[serde(default)]
    pub drop_nyquist: bool,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            fft_size: 2048,
            hop: 512,
            window: WindowKind::Hann,
            sample_rate: 44_100,
            drop_nyquist: false,
        }
    }
}

impl WindowConfig {
    pub fn new(fft_size: usize, hop: usize, sample_rate: u32) -> Result<Self> {
        let cfg = Self {
            fft_size,
            hop,
            window: WindowKind::Hann,
            sample_rate,
            drop_nyquist: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn n_bins(&self) -> usize {
        if self.drop_nyquist {
            self.fft_size / 2
        } else {
            self.fft_size / 2 + 1
        }
    }

    pub fn window_weights(&self) -> Vec<f64> {
        self.window.weights(self.fft_size)
    }

    /// Per-phase sums of the window shifted by multiples of `hop`.
    fn overlap_sums(&self, squared: bool) -> Vec<f64> {
        let w = self.window_weights();
        let mut sums = vec![0.0; self.hop];
        for (n, &x) in w.iter().enumerate() {
            sums[n % self.hop] += if squared { x * x } else { x };
        }
        sums
    }

    /// Max relative deviation of the shifted window sum from its mean.
    pub fn cola_deviation(&self) -> f64 {
        let sums = self.overlap_sums(false);
        let mean = sums.iter().sum::<f64>() / sums.len() as f64;
        sums.iter()
            .map(|s| (s - mean).abs() / mean)
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size < 2 || !self.fft_size.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "fft_size must be a power of two >= 2, got {}",
                self.fft_size
            )));
        }
        if self.hop == 0 || self.hop > self.fft_size {
            return Err(Error::InvalidConfig(format!(
                "hop must be in 1..={}, got {}",
                self.fft_size, self.hop
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::InvalidConfig("sample_rate must be positive".into()));
        }
        let dev = self.cola_deviation();
        if !(dev <= COLA_TOLERANCE) {
            return Err(Error::InvalidConfig(format!(
                "window/hop pair violates COLA (relative deviation {dev:e})"
            )));
        }
        Ok(())
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        len / self.hop + 1
    }
}

/// Complex time-frequency grid stored as two `[channel, bin, frame]` planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    real: Array3<f64>,
    imag: Array3<f64>,
    config: WindowConfig,
    signal_len: Option<usize>,
}

impl ComplexSpectrogram {
    pub fn from_planes(
        real: Array3<f64>,
        imag: Array3<f64>,
        config: WindowConfig,
        signal_len: Option<usize>,
    ) -> Result<Self> {
        if real.dim() != imag.dim() {
            return Err(Error::ShapeMismatch(format!(
                "real plane {:?} vs imag plane {:?}",
                real.dim(),
                imag.dim()
            )));
        }
        let (c, f, t) = real.dim();
        if c == 0 || t == 0 {
            return Err(Error::ShapeMismatch(format!(
                "spectrogram needs >= 1 channel and frame, got {:?}",
                real.dim()
            )));
        }
        if f != config.n_bins() {
            return Err(Error::ShapeMismatch(format!(
                "{f} bins but config implies {}",
                config.n_bins()
            )));
        }
        if real.iter().chain(imag.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("spectrogram".into()));
        }
        Ok(Self {
            real,
            imag,
            config,
            signal_len,
        })
    }

    pub fn zeros(channels: usize, frames: usize, config: WindowConfig) -> Self {
        let dim = (channels, config.n_bins(), frames);
        Self {
            real: Array3::zeros(dim),
            imag: Array3::zeros(dim),
            config,
            signal_len: None,
        }
    }

    pub fn real(&self) -> &Array3<f64> {
        &self.real
    }

    pub fn imag(&self) -> &Array3<f64> {
        &self.imag
    }

    pub fn config(&self) -> &WindowConfig {
        &self.config
    }

    /// Original waveform length, when known.
    pub fn signal_len(&self) -> Option<usize> {
        self.signal_len
    }

    pub fn with_signal_len(mut self, len: Option<usize>) -> Self {
        self.signal_len = len;
        self
    }

    pub fn n_channels(&self) -> usize {
        self.real.dim().0
    }

    pub fn n_bins(&self) -> usize {
        self.real.dim().1
    }

    pub fn n_frames(&self) -> usize {
        self.real.dim().2
    }

    pub fn into_planes(self) -> (Array3<f64>, Array3<f64>) {
        (self.real, self.imag)
    }
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Plans {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }
}

fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((0..pad).map(|i| x[pad - i]));
    out.extend_from_slice(x);
    out.extend((0..pad).map(|i| x[n - 2 - i]));
    out
}

/// Short-time Fourier transform of each channel.
pub fn stft(waveform: &[Vec<f64>], config: &WindowConfig) -> Result<ComplexSpectrogram> {
    config.validate()?;
    if waveform.is_empty() {
        return Err(Error::Empty("waveform has no channels".into()));
    }
    let len = waveform[0].len();
    if waveform.iter().any(|ch| ch.len() != len) {
        return Err(Error::ShapeMismatch("channels differ in length".into()));
    }
    if len < config.fft_size {
        return Err(Error::InputTooShort {
            len,
            needed: config.fft_size,
        });
    }
    if waveform.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("waveform".into()));
    }

    let n = config.fft_size;
    let bins = config.n_bins();
    let frames = config.n_frames(len);
    let window = config.window_weights();
    let plans = Plans::new(n);
    let mut real = Array3::zeros((waveform.len(), bins, frames));
    let mut imag = Array3::zeros((waveform.len(), bins, frames));
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut scratch = vec![Complex::new(0.0, 0.0); plans.forward.get_inplace_scratch_len()];

    for (c, ch) in waveform.iter().enumerate() {
        let padded = reflect_pad(ch, n / 2);
        for t in 0..frames {
            let start = t * config.hop;
            for (m, slot) in buf.iter_mut().enumerate() {
                *slot = Complex::new(padded[start + m] * window[m], 0.0);
            }
            plans.forward.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..bins {
                real[[c, k, t]] = buf[k].re;
                imag[[c, k, t]] = buf[k].im;
            }
        }
    }
    Ok(ComplexSpectrogram {
        real,
        imag,
        config: *config,
        signal_len: Some(len),
    })
}

/// Squared-window envelope over the padded signal of `frames` frames.
fn squared_envelope(config: &WindowConfig, window: &[f64], frames: usize) -> Vec<f64> {
    let n = config.fft_size;
    let mut env = vec![0.0; n + (frames - 1) * config.hop];
    for t in 0..frames {
        for (m, w) in window.iter().enumerate() {
            env[t * config.hop + m] += w * w;
        }
    }
    env
}

fn output_len(spec: &ComplexSpectrogram) -> usize {
    spec.signal_len
        .unwrap_or((spec.n_frames() - 1) * spec.config.hop)
}

/// Inverse STFT. Output length is the tracked signal length when present.
pub fn istft(spec: &ComplexSpectrogram) -> Result<Vec<Vec<f64>>> {
    let config = spec.config;
    config.validate()?;
    if spec.real.dim() != spec.imag.dim() || spec.n_bins() != config.n_bins() {
        return Err(Error::ShapeMismatch(
            "spectrogram planes disagree with their config".into(),
        ));
    }
    let n = config.fft_size;
    let half = n / 2;
    let frames = spec.n_frames();
    let out_len = output_len(spec);
    let window = config.window_weights();
    let env = squared_envelope(&config, &window, frames);
    let plans = Plans::new(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut scratch = vec![Complex::new(0.0, 0.0); plans.inverse.get_inplace_scratch_len()];
    let scale = 1.0 / n as f64;

    let mut out = Vec::with_capacity(spec.n_channels());
    for c in 0..spec.n_channels() {
        let mut acc = vec![0.0; env.len()];
        for t in 0..frames {
            buf.iter_mut().for_each(|z| *z = Complex::new(0.0, 0.0));
            for k in 0..spec.n_bins() {
                let z = Complex::new(spec.real[[c, k, t]], spec.imag[[c, k, t]]);
                buf[k] = z;
                if k != 0 && k != half {
                    buf[n - k] = z.conj();
                }
            }
            plans.inverse.process_with_scratch(&mut buf, &mut scratch);
            let start = t * config.hop;
            for m in 0..n {
                acc[start + m] += buf[m].re * scale * window[m];
            }
        }
        let samples = (0..out_len)
            .map(|i| {
                let j = i + half;
                if j < env.len() && env[j] > ENVELOPE_FLOOR {
                    acc[j] / env[j]
                } else {
                    0.0
                }
            })
            .collect();
        out.push(samples);
    }
    Ok(out)
}

/// Adjoint of [`istft`] with respect to the spectrogram planes.
///
/// `grad` holds one sequence per channel with the length `istft` would emit
/// for `like`; the returned planes have the shape of `like`.
pub fn istft_adjoint(
    grad: &[Vec<f64>],
    like: &ComplexSpectrogram,
) -> Result<(Array3<f64>, Array3<f64>)> {
    let config = like.config;
    let n = config.fft_size;
    let half = n / 2;
    let frames = like.n_frames();
    let out_len = output_len(like);
    if grad.len() != like.n_channels() || grad.iter().any(|g| g.len() != out_len) {
        return Err(Error::ShapeMismatch("istft adjoint gradient shape".into()));
    }
    let window = config.window_weights();
    let env = squared_envelope(&config, &window, frames);
    let plans = Plans::new(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut scratch = vec![Complex::new(0.0, 0.0); plans.forward.get_inplace_scratch_len()];
    let dim = like.real.dim();
    let mut greal = Array3::zeros(dim);
    let mut gimag = Array3::zeros(dim);

    for (c, g) in grad.iter().enumerate() {
        let mut gbuf = vec![0.0; env.len()];
        for (i, &v) in g.iter().enumerate() {
            let j = i + half;
            if j < env.len() && env[j] > ENVELOPE_FLOOR {
                gbuf[j] = v / env[j];
            }
        }
        for t in 0..frames {
            let start = t * config.hop;
            for m in 0..n {
                buf[m] = Complex::new(gbuf[start + m] * window[m], 0.0);
            }
            plans.forward.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..like.n_bins() {
                let weight = if k == 0 || k == half { 1.0 } else { 2.0 } / n as f64;
                greal[[c, k, t]] = buf[k].re * weight;
                gimag[[c, k, t]] = if k == 0 || k == half {
                    0.0
                } else {
                    buf[k].im * weight
                };
            }
        }
    }
    Ok((greal, gimag))
}

/// Signal energy estimated from the spectrogram via Parseval.
///
/// Exact for the portion of the signal where the squared-window overlap sum is
/// constant, i.e. away from the first and last half window.
pub fn spectral_energy(spec: &ComplexSpectrogram) -> f64 {
    let config = spec.config;
    let n = config.fft_size;
    let half = n / 2;
    let sums = config.overlap_sums(true);
    let w2 = sums.iter().sum::<f64>() / sums.len() as f64;
    let mut total = 0.0;
    for ((c, k, t), re) in spec.real.indexed_iter() {
        let im = spec.imag[[c, k, t]];
        let weight = if k == 0 || k == half { 1.0 } else { 2.0 };
        total += weight * (re * re + im * im);
    }
    total / (n as f64 * w2)
}
