//! Objective measures: short-time objective intelligibility (STOI) and
//! segmental SNR, plus per-corpus aggregation.

use std::collections::BTreeMap;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::corpus::{Manifest, ManifestItem};
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::wav;

pub const STOI_RATE: u32 = 10_000;
const STOI_FRAME: usize = 256;
const STOI_NFFT: usize = 512;
const STOI_BANDS: usize = 15;
const STOI_MIN_FREQ: f64 = 150.0;
/// Frames per short-time segment (384 ms).
const STOI_SEGMENT: usize = 30;
const STOI_BETA_DB: f64 = -15.0;
const STOI_DYN_RANGE_DB: f64 = 40.0;
const EPS: f64 = f64::EPSILON;

pub const SSNR_FRAME: usize = 512;
pub const SSNR_MIN_DB: f64 = -10.0;
pub const SSNR_MAX_DB: f64 = 35.0;
const SSNR_DYN_RANGE_DB: f64 = 40.0;

// ---------------------------------------------------------------- resampling

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Rational-rate polyphase resampler with a Kaiser-windowed sinc low-pass,
/// delay-compensated so output sample `m` aligns with input time `m·down/up`.
pub fn resample(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    let g = gcd(from as usize, to as usize);
    let (up, down) = (to as usize / g, from as usize / g);
    if up == down {
        return x.to_vec();
    }
    let half_len = 10 * up.max(down);
    let cutoff = 0.5 / up.max(down) as f64; // cycles per upsampled sample
    let beta = 5.0;
    let taps: Vec<f64> = (0..=2 * half_len)
        .map(|i| {
            let n = i as f64 - half_len as f64;
            let sinc = if n == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * std::f64::consts::PI * cutoff * n).sin() / (std::f64::consts::PI * n)
            };
            let r = n / half_len as f64;
            let w = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / bessel_i0(beta);
            up as f64 * sinc * w
        })
        .collect();
    let out_len = (x.len() * up).div_ceil(down);
    (0..out_len)
        .map(|m| {
            // upsampled index of the filter centre
            let c = m * down;
            let lo = c.saturating_sub(half_len);
            let first = lo.div_ceil(up) * up;
            let mut acc = 0.0;
            let mut j = first;
            while j <= c + half_len {
                let xi = j / up;
                if xi >= x.len() {
                    break;
                }
                acc += x[xi] * taps[j + half_len - c];
                j += up;
            }
            acc
        })
        .collect()
}

// ---------------------------------------------------------------- STOI

/// Symmetric Hann without the zero end points.
fn hann_inner(n: usize) -> Vec<f64> {
    (1..=n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n + 1) as f64).cos())
        .collect()
}

/// Drops frames of both signals where the reference is more than 40 dB
/// below its loudest frame, then overlap-adds the survivors.
fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hop = STOI_FRAME / 2;
    let w = hann_inner(STOI_FRAME);
    if x.len() < STOI_FRAME {
        return (Vec::new(), Vec::new());
    }
    let starts: Vec<usize> = (0..=x.len() - STOI_FRAME).step_by(hop).collect();
    let frame = |s: &[f64], i: usize| -> Vec<f64> { (0..STOI_FRAME).map(|k| w[k] * s[i + k]).collect() };
    let energies: Vec<f64> = starts
        .iter()
        .map(|&i| 20.0 * (frame(x, i).iter().map(|v| v * v).sum::<f64>().sqrt() + EPS).log10())
        .collect();
    let max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energies)
        .filter(|(_, &e)| e > max - STOI_DYN_RANGE_DB)
        .map(|(&i, _)| i)
        .collect();
    if kept.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let len = (kept.len() - 1) * hop + STOI_FRAME;
    let mut xo = vec![0.0; len];
    let mut yo = vec![0.0; len];
    for (j, &i) in kept.iter().enumerate() {
        let (fx, fy) = (frame(x, i), frame(y, i));
        for k in 0..STOI_FRAME {
            xo[j * hop + k] += fx[k];
            yo[j * hop + k] += fy[k];
        }
    }
    (xo, yo)
}

/// Bands × frames one-third-octave magnitudes.
fn third_octave_envelopes(x: &[f64], obm: &Array2<f64>) -> Array2<f64> {
    let hop = STOI_FRAME / 2;
    let w = hann_inner(STOI_FRAME);
    let starts: Vec<usize> = if x.len() > STOI_FRAME {
        (0..x.len() - STOI_FRAME).step_by(hop).collect()
    } else {
        Vec::new()
    };
    let fft = FftPlanner::<f64>::new().plan_fft_forward(STOI_NFFT);
    let bins = STOI_NFFT / 2 + 1;
    let mut out = Array2::zeros((STOI_BANDS, starts.len()));
    let mut buf = vec![Complex64::new(0.0, 0.0); STOI_NFFT];
    for (j, &s) in starts.iter().enumerate() {
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for k in 0..STOI_FRAME {
            buf[k] = Complex64::new(w[k] * x[s + k], 0.0);
        }
        fft.process(&mut buf);
        for b in 0..STOI_BANDS {
            let e: f64 = (0..bins).filter(|&f| obm[[b, f]] > 0.0).map(|f| buf[f].norm_sqr()).sum();
            out[[b, j]] = e.sqrt();
        }
    }
    out
}

/// One-third-octave band matrix over the rfft bins.
fn third_octave_bands() -> Array2<f64> {
    let bins = STOI_NFFT / 2 + 1;
    let f: Vec<f64> = (0..bins).map(|i| i as f64 * STOI_RATE as f64 / STOI_NFFT as f64).collect();
    let nearest = |target: f64| -> usize {
        let mut best = 0;
        for (i, &v) in f.iter().enumerate() {
            if (v - target).powi(2) < (f[best] - target).powi(2) {
                best = i;
            }
        }
        best
    };
    let mut obm = Array2::zeros((STOI_BANDS, bins));
    for k in 0..STOI_BANDS {
        let lo = STOI_MIN_FREQ * 2f64.powf((2.0 * k as f64 - 1.0) / 6.0);
        let hi = STOI_MIN_FREQ * 2f64.powf((2.0 * k as f64 + 1.0) / 6.0);
        for b in nearest(lo)..nearest(hi) {
            obm[[k, b]] = 1.0;
        }
    }
    obm
}

/// Short-time objective intelligibility of `degraded` against `clean`.
/// Signals are cropped to the shorter length and resampled to 10 kHz.
pub fn stoi(clean: &Waveform, degraded: &Waveform) -> Result<f64> {
    let n = clean.len().min(degraded.len());
    if clean.samples[..n].iter().all(|&v| v == 0.0) {
        return Err(Error::SilentSignal("reference"));
    }
    let x = resample(&clean.samples[..n], clean.sample_rate, STOI_RATE);
    let y = resample(&degraded.samples[..n], degraded.sample_rate, STOI_RATE);
    let (x, y) = remove_silent_frames(&x, &y);
    let obm = third_octave_bands();
    let xt = third_octave_envelopes(&x, &obm);
    let yt = third_octave_envelopes(&y, &obm);
    let frames = xt.ncols();
    if frames < STOI_SEGMENT {
        return Err(Error::TooShort(format!(
            "{frames} non-silent frames, need {STOI_SEGMENT}"
        )));
    }
    let clip = 10f64.powf(-STOI_BETA_DB / 20.0);
    let segments = frames - STOI_SEGMENT + 1;
    let mut total = 0.0;
    for m in 0..segments {
        for b in 0..STOI_BANDS {
            let xs: Vec<f64> = (0..STOI_SEGMENT).map(|k| xt[[b, m + k]]).collect();
            let ys: Vec<f64> = (0..STOI_SEGMENT).map(|k| yt[[b, m + k]]).collect();
            let nx = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = ys.iter().map(|v| v * v).sum::<f64>().sqrt();
            let alpha = nx / (ny + EPS);
            let yp: Vec<f64> = ys
                .iter()
                .zip(&xs)
                .map(|(&yv, &xv)| (yv * alpha).min(xv * (1.0 + clip)))
                .collect();
            total += centered_correlation(&xs, &yp);
        }
    }
    Ok(total / (segments * STOI_BANDS) as f64)
}

fn centered_correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let da: Vec<f64> = a.iter().map(|v| v - ma).collect();
    let db: Vec<f64> = b.iter().map(|v| v - mb).collect();
    let na = da.iter().map(|v| v * v).sum::<f64>().sqrt() + EPS;
    let nb = db.iter().map(|v| v * v).sum::<f64>().sqrt() + EPS;
    da.iter().zip(&db).map(|(x, y)| (x / na) * (y / nb)).sum()
}

// ---------------------------------------------------------------- SSNR

/// Per-frame clamped SNRs over non-overlapping 32 ms frames whose clean
/// energy is within 40 dB of the loudest clean frame.
pub fn ssnr_frames(clean: &Waveform, degraded: &Waveform) -> Result<Vec<f64>> {
    let n = clean.len().min(degraded.len());
    let frames = n / SSNR_FRAME;
    let mut sig = Vec::with_capacity(frames);
    let mut err = Vec::with_capacity(frames);
    for f in 0..frames {
        let r = f * SSNR_FRAME..(f + 1) * SSNR_FRAME;
        let c = &clean.samples[r.clone()];
        let d = &degraded.samples[r];
        sig.push(c.iter().map(|v| v * v).sum::<f64>());
        err.push(c.iter().zip(d).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
    }
    let max = sig.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(Error::SilentSignal("reference"));
    }
    let floor = max * 10f64.powf(-SSNR_DYN_RANGE_DB / 10.0);
    Ok(sig
        .iter()
        .zip(&err)
        .filter(|(&s, _)| s > floor)
        .map(|(&s, &e)| {
            let db = if e == 0.0 { SSNR_MAX_DB } else { 10.0 * (s / e).log10() };
            db.clamp(SSNR_MIN_DB, SSNR_MAX_DB)
        })
        .collect())
}

pub fn ssnr(clean: &Waveform, degraded: &Waveform) -> Result<f64> {
    let f = ssnr_frames(clean, degraded)?;
    Ok(f.iter().sum::<f64>() / f.len() as f64)
}

// ---------------------------------------------------------------- reports

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtteranceScore {
    pub id: String,
    pub noise_kind: String,
    pub snr_db: f64,
    pub stoi: f64,
    pub ssnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub noise_kind: String,
    pub snr_db: f64,
    pub count: usize,
    pub stoi: f64,
    pub ssnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedItem {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct EvalReport {
    pub utterances: Vec<UtteranceScore>,
    pub aggregates: Vec<Aggregate>,
    pub skipped: Vec<SkippedItem>,
}

impl EvalReport {
    pub fn from_scores(utterances: Vec<UtteranceScore>, skipped: Vec<SkippedItem>) -> Self {
        let mut cells: BTreeMap<(String, i64), Vec<&UtteranceScore>> = BTreeMap::new();
        for u in &utterances {
            // millidecibel key keeps float SNRs orderable
            let key = (u.noise_kind.clone(), (u.snr_db * 1000.0).round() as i64);
            cells.entry(key).or_default().push(u);
        }
        let aggregates = cells
            .into_values()
            .map(|members| {
                let n = members.len() as f64;
                Aggregate {
                    noise_kind: members[0].noise_kind.clone(),
                    snr_db: members[0].snr_db,
                    count: members.len(),
                    stoi: members.iter().map(|u| u.stoi).sum::<f64>() / n,
                    ssnr: members.iter().map(|u| u.ssnr).sum::<f64>() / n,
                }
            })
            .collect();
        EvalReport {
            utterances,
            aggregates,
            skipped,
        }
    }

    /// Mean (STOI, SSNR) over every utterance whose noise kind is `kind`.
    pub fn mean_for_kind(&self, kind: &str) -> Option<(f64, f64)> {
        let m: Vec<&UtteranceScore> = self.utterances.iter().filter(|u| u.noise_kind == kind).collect();
        if m.is_empty() {
            return None;
        }
        let n = m.len() as f64;
        Some((
            m.iter().map(|u| u.stoi).sum::<f64>() / n,
            m.iter().map(|u| u.ssnr).sum::<f64>() / n,
        ))
    }

    /// Noise × SNR table.
    pub fn to_table(&self) -> String {
        let mut s = String::from("noise\tsnr_db\tcount\tstoi\tssnr_db\n");
        for a in &self.aggregates {
            s.push_str(&format!(
                "{}\t{}\t{}\t{:.4}\t{:.3}\n",
                a.noise_kind, a.snr_db, a.count, a.stoi, a.ssnr
            ));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Runs `enhance` on every manifest item and scores the result against the
/// clean reference. Failing items are recorded and skipped.
pub fn evaluate_corpus<F>(manifest: &Manifest, mut enhance: F) -> Result<EvalReport>
where
    F: FnMut(&ManifestItem, &Waveform) -> Result<Waveform>,
{
    if manifest.is_empty() {
        return Err(Error::Manifest("no items to evaluate".into()));
    }
    let mut scores = Vec::new();
    let mut skipped = Vec::new();
    for item in &manifest.items {
        let scored = (|| -> Result<UtteranceScore> {
            let noisy = wav::read_wav(&item.noisy)?;
            let clean = wav::read_wav(&item.clean)?;
            let out = enhance(item, &noisy)?;
            Ok(UtteranceScore {
                id: item.id(),
                noise_kind: item.noise_kind.clone(),
                snr_db: item.snr_db,
                stoi: stoi(&clean, &out)?,
                ssnr: ssnr(&clean, &out)?,
            })
        })();
        match scored {
            Ok(s) => scores.push(s),
            Err(e) => {
                log::warn!("skipping {}: {e}", item.id());
                skipped.push(SkippedItem {
                    id: item.id(),
                    error: e.to_string(),
                });
            }
        }
    }
    Ok(EvalReport::from_scores(scores, skipped))
}
