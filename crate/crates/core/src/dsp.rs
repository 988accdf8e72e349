//! Signal-processing frontend: framing, STFT/ISTFT, magnitude/phase split,
//! log mel filterbank features and per-utterance standardization.
//!
//! Framing is fixed for the whole toolkit: 16 kHz audio, 512-sample periodic
//! Hann window, 128-sample hop, 512-point transform (257 bins). Every
//! utterance is reflect-padded by half a window on both sides before framing,
//! so frame `t` is centred on original sample `t * 128`.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const FFT_SIZE: usize = 512;
pub const HOP: usize = 128;
pub const BINS: usize = FFT_SIZE / 2 + 1;
pub const PAD: usize = FFT_SIZE / 2;
pub const MEL_BANDS: usize = 40;
pub const LOG_FLOOR: f64 = 1e-10;

/// Mono audio at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Self {
        Waveform {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }
}

/// T × 257 complex grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub values: Array2<Complex64>,
}

/// T × 257 nonnegative grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeSpectrogram {
    pub values: Array2<f64>,
}

/// T × 257 grid of phases in (-π, π].
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSpectrogram {
    pub values: Array2<f64>,
}

/// T × 40 log mel filterbank energies.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelFeatures {
    pub values: Array2<f64>,
}

/// Magnitude grid scaled to zero mean and unit variance with the scalar
/// statistics it was scaled by.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedMagnitude {
    pub values: Array2<f64>,
    pub mean: f64,
    pub std: f64,
}

impl ComplexSpectrogram {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bins(&self) -> usize {
        self.values.ncols()
    }
}

impl MagnitudeSpectrogram {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }
}

impl StandardizedMagnitude {
    /// Applies the same affine map to another grid or vector.
    pub fn scale_like(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }
}

/// Number of STFT frames produced for a waveform of `len` samples.
pub fn frame_count(len: usize) -> usize {
    1 + len / HOP
}

/// Periodic Hann window of length `n`.
pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

fn window() -> &'static [f64] {
    static WINDOW: OnceLock<Vec<f64>> = OnceLock::new();
    WINDOW.get_or_init(|| hann_periodic(FFT_SIZE))
}

fn fft_pair() -> &'static (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    static PLANS: OnceLock<(Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>)> = OnceLock::new();
    PLANS.get_or_init(|| {
        let mut planner = FftPlanner::new();
        (
            planner.plan_fft_forward(FFT_SIZE),
            planner.plan_fft_inverse(FFT_SIZE),
        )
    })
}

/// Maps a possibly out-of-range index onto `0..n` by mirror reflection
/// without repeating the edge sample (numpy "reflect").
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut k = i.rem_euclid(period);
    if k >= n as isize {
        k = period - k;
    }
    k as usize
}

/// Reflect-pads by `PAD` samples on both ends.
pub fn reflect_pad(samples: &[f64]) -> Vec<f64> {
    let n = samples.len();
    (0..n + 2 * PAD)
        .map(|j| samples[reflect_index(j as isize - PAD as isize, n)])
        .collect()
}

pub fn stft(wave: &Waveform) -> Result<ComplexSpectrogram> {
    if wave.is_empty() {
        return Err(Error::EmptyWaveform);
    }
    let padded = reflect_pad(&wave.samples);
    let frames = 1 + (padded.len() - FFT_SIZE) / HOP;
    let win = window();
    let (forward, _) = fft_pair();
    let mut values = Array2::zeros((frames, BINS));
    let mut buf = vec![Complex64::new(0.0, 0.0); FFT_SIZE];
    for t in 0..frames {
        let start = t * HOP;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(padded[start + i] * win[i], 0.0);
        }
        forward.process(&mut buf);
        for (k, v) in values.row_mut(t).iter_mut().enumerate() {
            *v = buf[k];
        }
    }
    Ok(ComplexSpectrogram { values })
}

/// Weighted overlap-add inverse. Output has `len` samples, defaulting to
/// `(T - 1) * HOP`; at most `(T - 1) * HOP + PAD` samples are recoverable.
pub fn istft(spec: &ComplexSpectrogram, len: Option<usize>) -> Result<Waveform> {
    if spec.bins() != BINS {
        return Err(Error::Shape(format!(
            "istft expects {BINS} bins, got {}",
            spec.bins()
        )));
    }
    let frames = spec.frames();
    if frames == 0 {
        return Err(Error::Shape("istft on zero frames".into()));
    }
    let max_len = (frames - 1) * HOP + PAD;
    let out_len = len.unwrap_or((frames - 1) * HOP);
    if out_len > max_len {
        return Err(Error::Shape(format!(
            "requested {out_len} samples from {frames} frames (max {max_len})"
        )));
    }
    let win = window();
    let (_, inverse) = fft_pair();
    let total = (frames - 1) * HOP + FFT_SIZE;
    let mut acc = vec![0.0; total];
    let mut env = vec![0.0; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); FFT_SIZE];
    let scale = 1.0 / FFT_SIZE as f64;
    for t in 0..frames {
        let row = spec.values.row(t);
        buf[0] = Complex64::new(row[0].re, 0.0);
        buf[FFT_SIZE / 2] = Complex64::new(row[FFT_SIZE / 2].re, 0.0);
        for k in 1..FFT_SIZE / 2 {
            buf[k] = row[k];
            buf[FFT_SIZE - k] = row[k].conj();
        }
        inverse.process(&mut buf);
        let start = t * HOP;
        for i in 0..FFT_SIZE {
            acc[start + i] += buf[i].re * scale * win[i];
            env[start + i] += win[i] * win[i];
        }
    }
    let samples = (0..out_len)
        .map(|i| {
            let j = i + PAD;
            if env[j] > 1e-12 {
                acc[j] / env[j]
            } else {
                0.0
            }
        })
        .collect();
    Ok(Waveform::new(samples))
}

/// Splits into magnitude and phase; the phase of an exact zero is 0.
pub fn split_mag_phase(spec: &ComplexSpectrogram) -> (MagnitudeSpectrogram, PhaseSpectrogram) {
    let mag = spec.values.mapv(|c| c.norm());
    let phase = spec.values.mapv(|c| {
        if c.re == 0.0 && c.im == 0.0 {
            0.0
        } else {
            let p = c.im.atan2(c.re);
            // atan2(-0.0, x<0) lands on -π; keep the half-open range (-π, π]
            if p <= -PI {
                PI
            } else {
                p
            }
        }
    });
    (
        MagnitudeSpectrogram { values: mag },
        PhaseSpectrogram { values: phase },
    )
}

pub fn combine_mag_phase(
    mag: &MagnitudeSpectrogram,
    phase: &PhaseSpectrogram,
) -> Result<ComplexSpectrogram> {
    if mag.values.dim() != phase.values.dim() {
        return Err(Error::Shape(format!(
            "magnitude {:?} vs phase {:?}",
            mag.values.dim(),
            phase.values.dim()
        )));
    }
    let mut values = Array2::zeros(mag.values.dim());
    ndarray::Zip::from(&mut values)
        .and(&mag.values)
        .and(&phase.values)
        .for_each(|c, &m, &p| *c = Complex64::from_polar(m, p));
    Ok(ComplexSpectrogram { values })
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// 40 × 257 unit-peak triangular filters spaced evenly on the HTK mel scale
/// between 0 Hz and Nyquist.
pub fn mel_filterbank() -> &'static Array2<f64> {
    static BANK: OnceLock<Array2<f64>> = OnceLock::new();
    BANK.get_or_init(|| build_mel_filterbank(MEL_BANDS, BINS, SAMPLE_RATE as f64))
}

fn build_mel_filterbank(bands: usize, bins: usize, sample_rate: f64) -> Array2<f64> {
    let nyquist = sample_rate / 2.0;
    let top = hz_to_mel(nyquist);
    let mut edges: Vec<f64> = (0..bands + 2)
        .map(|i| mel_to_hz(top * i as f64 / (bands + 1) as f64))
        .collect();
    edges[0] = 0.0;
    edges[bands + 1] = nyquist;
    let bin_hz = nyquist / (bins - 1) as f64;
    let mut bank = Array2::zeros((bands, bins));
    for m in 0..bands {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let up = (f - lo) / (mid - lo);
            let down = (hi - f) / (hi - mid);
            bank[[m, k]] = up.min(down).max(0.0);
        }
    }
    bank
}

pub fn log_mfb(mag: &MagnitudeSpectrogram) -> Result<LogMelFeatures> {
    if mag.values.ncols() != BINS {
        return Err(Error::Shape(format!(
            "log_mfb expects {BINS} bins, got {}",
            mag.values.ncols()
        )));
    }
    let energies = mag.values.dot(&mel_filterbank().t());
    Ok(LogMelFeatures {
        values: energies.mapv(|e| e.max(LOG_FLOOR).ln()),
    })
}

/// Scalar per-utterance standardization over all T × 257 entries.
pub fn standardize(mag: &MagnitudeSpectrogram) -> Result<StandardizedMagnitude> {
    if mag.values.is_empty() {
        return Err(Error::Shape("standardize on empty grid".into()));
    }
    let n = mag.values.len() as f64;
    let mean = mag.values.sum() / n;
    let var = mag.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if !(var > 1e-24) {
        return Err(Error::DegenerateUtterance);
    }
    let std = var.sqrt();
    Ok(StandardizedMagnitude {
        values: mag.values.mapv(|v| (v - mean) / std),
        mean,
        std,
    })
}

/// Mean of the given rows of a grid.
pub fn mean_rows(values: &Array2<f64>, rows: &[usize]) -> Array1<f64> {
    let mut acc = Array1::zeros(values.ncols());
    for &r in rows {
        acc += &values.row(r);
    }
    acc / rows.len() as f64
}

/// Sum of squared entries of a view.
pub fn energy(v: ArrayView1<f64>) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Per-frame energy of a spectrogram row set (sum of |X|^2 over bins).
pub fn frame_energies(spec: &ComplexSpectrogram) -> Array1<f64> {
    spec.values
        .map_axis(Axis(1), |row| row.iter().map(|c| c.norm_sqr()).sum())
}
