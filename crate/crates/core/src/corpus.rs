//! Synthetic noisy-speech corpus: speech-like clean signals, four noise
//! families, SNR mixing over active speech, energy-based frame labels and a
//! tab-separated manifest.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dsp::{self, frame_count, Waveform, HOP, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::vad::FrameLabels;
use crate::wav;

/// Frames more than this far below the loudest frame are non-speech.
pub const LABEL_RANGE_DB: f64 = 40.0;
/// Non-speech gaps up to this many frames between speech frames are filled.
pub const LABEL_CLOSING: usize = 2;
pub const PEAK_LIMIT: f64 = 0.99;
pub const TRAIN_SNRS: [f64; 4] = [-5.0, 0.0, 5.0, 10.0];
pub const TEST_SNRS: [f64; 3] = [-5.0, 0.0, 5.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NoiseKind {
    White,
    Pink,
    /// Volleys of short decaying broadband bursts.
    Burst,
    /// A few slowly wandering narrowband partials.
    Narrowband,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 4] = [NoiseKind::White, NoiseKind::Pink, NoiseKind::Burst, NoiseKind::Narrowband];
    pub const SEEN: [NoiseKind; 2] = [NoiseKind::White, NoiseKind::Pink];
    pub const UNSEEN: [NoiseKind; 2] = [NoiseKind::Burst, NoiseKind::Narrowband];

    pub fn is_seen(self) -> bool {
        Self::SEEN.contains(&self)
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::White => "white",
            NoiseKind::Pink => "pink",
            NoiseKind::Burst => "burst",
            NoiseKind::Narrowband => "narrowband",
        })
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(NoiseKind::White),
            "pink" => Ok(NoiseKind::Pink),
            "burst" => Ok(NoiseKind::Burst),
            "narrowband" => Ok(NoiseKind::Narrowband),
            other => Err(Error::InvalidArgument(format!("unknown noise kind {other:?}"))),
        }
    }
}

// ---------------------------------------------------------------- labels

/// Energy-threshold speech labels on the STFT frame grid, followed by a
/// closing of short non-speech gaps.
pub fn label_frames(clean: &Waveform) -> Result<FrameLabels> {
    let spec = dsp::stft(clean)?;
    let e = dsp::frame_energies(&spec);
    let max = e.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Ok(FrameLabels { y: vec![0; e.len()] });
    }
    let floor = max * 10f64.powf(-LABEL_RANGE_DB / 10.0);
    let mut y: Vec<u8> = e.iter().map(|&v| u8::from(v > floor)).collect();
    close_gaps(&mut y, LABEL_CLOSING);
    Ok(FrameLabels { y })
}

/// Fills runs of zeros of length `<= max_gap` that have ones on both sides.
pub fn close_gaps(y: &mut [u8], max_gap: usize) {
    let mut t = 0;
    while t < y.len() {
        if y[t] == 0 {
            let start = t;
            while t < y.len() && y[t] == 0 {
                t += 1;
            }
            if start > 0 && t < y.len() && t - start <= max_gap {
                y[start..t].fill(1);
            }
        } else {
            t += 1;
        }
    }
}

/// Per-sample activity from frame labels: sample `n` belongs to the frame
/// whose centre is nearest.
pub fn active_samples(labels: &FrameLabels, len: usize) -> Vec<bool> {
    (0..len)
        .map(|n| {
            let t = ((n + HOP / 2) / HOP).min(labels.len().saturating_sub(1));
            labels.y.get(t).copied().unwrap_or(0) == 1
        })
        .collect()
}

fn masked_power(x: &[f64], active: &[bool]) -> f64 {
    let (sum, n) = x
        .iter()
        .zip(active)
        .filter(|(_, &a)| a)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

// ---------------------------------------------------------------- mixing

#[derive(Debug, Clone)]
pub struct Mixture {
    pub noisy: Waveform,
    /// Clean signal after the same peak scaling as `noisy`.
    pub clean: Waveform,
    pub labels: FrameLabels,
    pub noise_gain: f64,
    /// Extra factor applied to both signals to keep peaks below 0.99.
    pub peak_gain: f64,
}

/// Active-speech SNR of `degraded - clean` against `clean`.
pub fn measure_snr(clean: &Waveform, noisy: &Waveform, labels: &FrameLabels) -> Result<f64> {
    let active = active_samples(labels, clean.len());
    let pc = masked_power(&clean.samples, &active);
    let noise: Vec<f64> = noisy.samples.iter().zip(&clean.samples).map(|(a, b)| a - b).collect();
    let pn = masked_power(&noise, &active);
    if pc == 0.0 {
        return Err(Error::SilentSignal("clean"));
    }
    Ok(10.0 * (pc / pn).log10())
}

/// Adds `noise` to `clean` at `snr_db`, measured over the speech-active
/// samples of `clean`. A noise shorter than `clean` is looped; a longer one
/// is cropped at a random offset drawn from `rng`.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64, rng: &mut impl Rng) -> Result<Mixture> {
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument(format!("snr must be finite, got {snr_db}")));
    }
    if clean.is_empty() {
        return Err(Error::EmptyWaveform);
    }
    if noise.is_empty() {
        return Err(Error::SilentSignal("noise"));
    }
    let n = clean.len();
    let seg: Vec<f64> = if noise.len() >= n {
        let off = rng.gen_range(0..=noise.len() - n);
        noise.samples[off..off + n].to_vec()
    } else {
        noise.samples.iter().cycle().take(n).cloned().collect()
    };
    let labels = label_frames(clean)?;
    let active = active_samples(&labels, n);
    let pc = masked_power(&clean.samples, &active);
    if pc == 0.0 {
        return Err(Error::SilentSignal("clean"));
    }
    let pn = masked_power(&seg, &active);
    if pn == 0.0 {
        return Err(Error::SilentSignal("noise"));
    }
    let g = (pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let mut noisy: Vec<f64> = clean.samples.iter().zip(&seg).map(|(c, v)| c + g * v).collect();
    let peak = noisy.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let peak_gain = if peak > PEAK_LIMIT { PEAK_LIMIT / peak } else { 1.0 };
    let mut clean_out = clean.samples.clone();
    if peak_gain != 1.0 {
        noisy.iter_mut().for_each(|v| *v *= peak_gain);
        clean_out.iter_mut().for_each(|v| *v *= peak_gain);
    }
    Ok(Mixture {
        noisy: Waveform::new(noisy),
        clean: Waveform::new(clean_out),
        labels,
        noise_gain: g,
        peak_gain,
    })
}

// ---------------------------------------------------------------- sources

fn gaussian(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn normalize_rms(x: &mut [f64], target: f64) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= target / rms);
    }
}

/// Speech-like signal: syllables of gliding harmonic tones with formant
/// envelopes and syllabic amplitude modulation, separated by silences.
pub fn synth_speech(len: usize, rng: &mut impl Rng) -> Waveform {
    let fs = SAMPLE_RATE as f64;
    let mut out = vec![0.0; len];
    let mut pos = (rng.gen_range(0.1..0.25) * fs) as usize;
    while pos + (0.1 * fs) as usize <= len {
        let syl = ((rng.gen_range(0.12..0.3) * fs) as usize).min(len - pos);
        let f0a: f64 = rng.gen_range(100.0..220.0);
        let f0b = f0a * rng.gen_range(0.8..1.25);
        let formants: Vec<(f64, f64)> = [(300.0, 900.0), (900.0, 2300.0), (2300.0, 3500.0)]
            .iter()
            .map(|&(lo, hi)| (rng.gen_range(lo..hi), rng.gen_range(80.0..250.0)))
            .collect();
        let am_rate = rng.gen_range(3.0..6.0);
        let am_phase = rng.gen_range(0.0..2.0 * PI);
        let level = rng.gen_range(0.5..1.0);
        let harmonics = (3800.0 / f0a.max(f0b)) as usize;
        let mut phases: Vec<f64> = (0..harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
        let ramp = (0.02 * fs) as usize;
        for i in 0..syl {
            let frac = i as f64 / syl as f64;
            let f0 = f0a + (f0b - f0a) * frac;
            let edge = (i.min(syl - 1 - i) as f64 / ramp as f64).min(1.0);
            let env = (0.5 - 0.5 * (PI * edge).cos())
                * (1.0 + 0.3 * (2.0 * PI * am_rate * i as f64 / fs + am_phase).sin())
                * level;
            let mut v = 0.0;
            for (k, ph) in phases.iter_mut().enumerate() {
                let f = f0 * (k + 1) as f64;
                *ph += 2.0 * PI * f / fs;
                let gain: f64 = formants
                    .iter()
                    .map(|&(fc, bw)| (-0.5 * ((f - fc) / bw).powi(2)).exp())
                    .sum::<f64>()
                    + 0.02;
                v += gain * ph.sin();
            }
            out[pos + i] = env * v;
        }
        pos += syl + (rng.gen_range(0.04..0.15) * fs) as usize;
    }
    let active: Vec<f64> = out.iter().cloned().filter(|v| *v != 0.0).collect();
    let rms = (active.iter().map(|v| v * v).sum::<f64>() / active.len().max(1) as f64).sqrt();
    let target = 10f64.powf(rng.gen_range(-22.0..-14.0) / 20.0);
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v *= target / rms);
    }
    Waveform::new(out)
}

/// A noise recording of `len` samples at unit RMS.
pub fn synth_noise(kind: NoiseKind, len: usize, rng: &mut impl Rng) -> Waveform {
    let fs = SAMPLE_RATE as f64;
    let mut x: Vec<f64> = match kind {
        NoiseKind::White => (0..len).map(|_| gaussian(rng)).collect(),
        NoiseKind::Pink => {
            // Kellet's refined pinking filter
            let mut b = [0.0f64; 7];
            (0..len)
                .map(|_| {
                    let w = gaussian(rng);
                    b[0] = 0.99886 * b[0] + w * 0.0555179;
                    b[1] = 0.99332 * b[1] + w * 0.0750759;
                    b[2] = 0.96900 * b[2] + w * 0.1538520;
                    b[3] = 0.86650 * b[3] + w * 0.3104856;
                    b[4] = 0.55000 * b[4] + w * 0.5329522;
                    b[5] = -0.7616 * b[5] - w * 0.0168980;
                    let y = b.iter().sum::<f64>() + w * 0.5362;
                    b[6] = w * 0.115926;
                    y
                })
                .collect()
        }
        NoiseKind::Burst => {
            let mut x: Vec<f64> = (0..len).map(|_| 0.01 * gaussian(rng)).collect();
            let mut pos = (rng.gen_range(0.0..0.3) * fs) as usize;
            while pos < len {
                let shots = rng.gen_range(3..9);
                let spacing = rng.gen_range(0.05..0.1) * fs;
                let amp = rng.gen_range(0.5..1.5);
                for s in 0..shots {
                    let start = pos + (s as f64 * spacing) as usize;
                    let tau = rng.gen_range(0.006..0.02) * fs;
                    let a = amp * rng.gen_range(0.7..1.3);
                    let dur = (5.0 * tau) as usize;
                    for i in 0..dur {
                        if start + i >= len {
                            break;
                        }
                        x[start + i] += a * (-(i as f64) / tau).exp() * gaussian(rng);
                    }
                }
                pos += (shots as f64 * spacing + rng.gen_range(0.2..0.7) * fs) as usize;
            }
            x
        }
        NoiseKind::Narrowband => {
            let partials = 3;
            let mut freq: Vec<f64> = (0..partials).map(|_| rng.gen_range(300f64..2000.0).ln()).collect();
            let mut amp: Vec<f64> = (0..partials).map(|_| rng.gen_range(0.5..1.0)).collect();
            let mut phase = vec![0.0; partials];
            let mut x = vec![0.0; len];
            let step = HOP;
            for (i, v) in x.iter_mut().enumerate() {
                if i % step == 0 {
                    for k in 0..partials {
                        freq[k] = (freq[k] + 0.01 * gaussian(rng)).clamp(200f64.ln(), 3000f64.ln());
                        amp[k] = (amp[k] + 0.02 * gaussian(rng)).clamp(0.2, 1.2);
                    }
                }
                let mut s = 0.02 * gaussian(rng);
                for k in 0..partials {
                    phase[k] += 2.0 * PI * freq[k].exp() / fs;
                    s += amp[k] * phase[k].sin();
                }
                *v = s;
            }
            x
        }
    };
    normalize_rms(&mut x, 1.0);
    Waveform::new(x)
}

// ---------------------------------------------------------------- manifest

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestItem {
    pub noisy: PathBuf,
    pub clean: PathBuf,
    pub label: PathBuf,
    pub noise_kind: String,
    pub snr_db: f64,
}

impl ManifestItem {
    /// Stable identifier: the noisy file stem.
    pub fn id(&self) -> String {
        self.noisy
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

/// Items with paths resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub items: Vec<ManifestItem>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut items = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(Error::Manifest(format!(
                    "line {}: expected 5 tab-separated fields, got {}",
                    i + 1,
                    cols.len()
                )));
            }
            let snr_db = cols[4]
                .parse::<f64>()
                .map_err(|e| Error::Manifest(format!("line {}: bad snr {:?}: {e}", i + 1, cols[4])))?;
            items.push(ManifestItem {
                noisy: base.join(cols[0]),
                clean: base.join(cols[1]),
                label: base.join(cols[2]),
                noise_kind: cols[3].to_string(),
                snr_db,
            });
        }
        Ok(Manifest { items })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new("")))
    }

    /// Paths under the manifest's directory are written relative to it.
    pub fn to_text(&self, base: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        self.items
            .iter()
            .map(|it| {
                format!(
                    "{}\t{}\t{}\t{}\t{}\n",
                    rel(&it.noisy),
                    rel(&it.clean),
                    rel(&it.label),
                    it.noise_kind,
                    it.snr_db
                )
            })
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        fs::write(path, self.to_text(base)).map_err(|e| Error::io(format!("writing manifest {}", path.display()), e))
    }
}

// ---------------------------------------------------------------- corpus

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub train_utterances: usize,
    /// Test items per (noise kind, SNR) cell.
    pub test_per_cell: usize,
    pub seconds: f64,
    pub train_snrs: Vec<f64>,
    pub test_snrs: Vec<f64>,
    pub train_noises: Vec<NoiseKind>,
    pub test_noises: Vec<NoiseKind>,
    /// Length of each noise recording before it is split in halves.
    pub noise_seconds: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            train_utterances: 200,
            test_per_cell: 4,
            seconds: 1.0,
            train_snrs: TRAIN_SNRS.to_vec(),
            test_snrs: TEST_SNRS.to_vec(),
            train_noises: NoiseKind::SEEN.to_vec(),
            test_noises: NoiseKind::ALL.to_vec(),
            noise_seconds: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Manifest,
    pub test: Manifest,
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
}

const SPLIT_TRAIN: u64 = 1;
const SPLIT_TEST: u64 = 2;

/// First half of each noise recording feeds training mixtures, the second
/// half test mixtures.
fn noise_half(kind: NoiseKind, cfg: &CorpusConfig, seed: u64, split: u64) -> Waveform {
    let total = (cfg.noise_seconds * SAMPLE_RATE as f64) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x6e6f, kind.tag()]));
    let full = synth_noise(kind, total, &mut rng);
    let half = total / 2;
    let range = if split == SPLIT_TRAIN { 0..half } else { half..total };
    Waveform::new(full.samples[range].to_vec())
}

fn write_item(
    dir: &Path,
    name: &str,
    mix: &Mixture,
    kind: NoiseKind,
    snr: f64,
) -> Result<ManifestItem> {
    let noisy = dir.join(format!("{name}_noisy.wav"));
    let clean = dir.join(format!("{name}_clean.wav"));
    let label = dir.join(format!("{name}.lab"));
    wav::write_wav(&noisy, &mix.noisy)?;
    wav::write_wav(&clean, &mix.clean)?;
    mix.labels.write(&label)?;
    Ok(ManifestItem {
        noisy,
        clean,
        label,
        noise_kind: kind.to_string(),
        snr_db: snr,
    })
}

/// Writes `train/`, `test/`, `train.tsv` and `test.tsv` under `out_dir`.
/// Every utterance's randomness derives from `(seed, split, index)`.
pub fn generate_synthetic_corpus(cfg: &CorpusConfig, seed: u64, out_dir: impl AsRef<Path>) -> Result<Corpus> {
    let out_dir = out_dir.as_ref();
    if cfg.train_noises.iter().any(|k| !k.is_seen()) {
        log::warn!("training noises include held-out kinds");
    }
    if cfg.train_noises.is_empty() || cfg.train_snrs.is_empty() {
        return Err(Error::InvalidArgument("training grid is empty".into()));
    }
    let len = (cfg.seconds * SAMPLE_RATE as f64).round() as usize;
    if frame_count(len) < 2 {
        return Err(Error::TooShort(format!("{len} samples per utterance")));
    }
    let mut corpus = Corpus {
        train: Manifest::default(),
        test: Manifest::default(),
        train_manifest: out_dir.join("train.tsv"),
        test_manifest: out_dir.join("test.tsv"),
    };
    for (split, name, m) in [
        (SPLIT_TRAIN, "train", &mut corpus.train),
        (SPLIT_TEST, "test", &mut corpus.test),
    ] {
        let dir = out_dir.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let kinds = if split == SPLIT_TRAIN { &cfg.train_noises } else { &cfg.test_noises };
        let noises: Vec<(NoiseKind, Waveform)> =
            kinds.iter().map(|&k| (k, noise_half(k, cfg, seed, split))).collect();
        let plan: Vec<(NoiseKind, f64)> = if split == SPLIT_TRAIN {
            (0..cfg.train_utterances)
                .map(|i| {
                    let k = kinds[i % kinds.len()];
                    let snr = cfg.train_snrs[(i / kinds.len()) % cfg.train_snrs.len()];
                    (k, snr)
                })
                .collect()
        } else {
            let mut p = Vec::new();
            for &k in kinds {
                for &snr in &cfg.test_snrs {
                    for _ in 0..cfg.test_per_cell {
                        p.push((k, snr));
                    }
                }
            }
            p
        };
        for (i, (kind, snr)) in plan.into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[split, i as u64]));
            let clean = synth_speech(len, &mut rng);
            let noise = &noises.iter().find(|(k, _)| *k == kind).expect("noise generated").1;
            let mix = mix_at_snr(&clean, noise, snr, &mut rng)?;
            let item = write_item(&dir, &format!("{name}{i:05}"), &mix, kind, snr)?;
            m.items.push(item);
        }
    }
    corpus.train.write(&corpus.train_manifest)?;
    corpus.test.write(&corpus.test_manifest)?;
    Ok(corpus)
}
