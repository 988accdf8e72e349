//! LSTM voice activity detector over log-mel features.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::dsp::{LogMelFeatures, MEL_BANDS};
use crate::error::{Error, Result};
use crate::nn::dense::DenseCache;
use crate::nn::loss::bce_loss;
use crate::nn::lstm::LstmCache;
use crate::nn::{Activation, Dense, Lstm, ParameterStore, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VadConfig {
    pub hidden: usize,
    pub layers: usize,
    pub head: usize,
}

impl Default for VadConfig {
    fn default() -> Self {
        VadConfig {
            hidden: 64,
            layers: 2,
            head: 32,
        }
    }
}

/// Per-frame speech probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeechPosterior {
    pub p: Array1<f64>,
}

impl SpeechPosterior {
    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.p.as_slice().expect("contiguous")
    }
}

/// Binary speech (1) / non-speech (0) frame labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameLabels {
    pub y: Vec<u8>,
}

impl FrameLabels {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn to_array<T: Scalar>(&self) -> Array1<T> {
        self.y.iter().map(|&v| T::lit(v as f64)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s: String = self.y.iter().map(|&v| if v == 1 { '1' } else { '0' }).collect();
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let y = text
            .trim_end_matches(['\n', '\r'])
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(Error::Manifest(format!("bad label character {other:?}"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Ok(FrameLabels { y })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading labels {}", path.display()), e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text())
            .map_err(|e| Error::io(format!("writing labels {}", path.display()), e))
    }
}

/// Unidirectional LSTM stack, then a ReLU layer and a sigmoid unit per step.
#[derive(Debug, Clone)]
pub struct Vad {
    pub lstm: Lstm,
    pub hidden: Dense,
    pub out: Dense,
}

pub struct VadCache<T> {
    lstm: LstmCache<T>,
    hidden: DenseCache<T>,
    out: DenseCache<T>,
}

impl Vad {
    pub fn new<T: Scalar>(store: &mut ParameterStore<T>, name: &str, cfg: VadConfig, rng: &mut impl Rng) -> Self {
        let lstm = Lstm::new(store, &format!("{name}.lstm"), MEL_BANDS, cfg.hidden, cfg.layers, rng);
        let hidden = Dense::new(store, &format!("{name}.hidden"), cfg.hidden, cfg.head, Activation::Relu, rng);
        let out = Dense::new(store, &format!("{name}.out"), cfg.head, 1, Activation::Sigmoid, rng);
        Vad { lstm, hidden, out }
    }

    /// T × 40 features to T posteriors.
    pub fn forward<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        feats: ArrayView2<T>,
    ) -> Result<(Array1<T>, VadCache<T>)> {
        if feats.ncols() != MEL_BANDS {
            return Err(Error::Shape(format!(
                "detector expects {MEL_BANDS} features per frame, got {}",
                feats.ncols()
            )));
        }
        let (h, lstm) = self.lstm.forward(store, feats)?;
        let (z, hidden) = self.hidden.forward(store, h.view())?;
        let (p, out) = self.out.forward(store, z.view())?;
        Ok((p.index_axis_move(Axis(1), 0), VadCache { lstm, hidden, out }))
    }

    pub fn backward<T: Scalar>(&self, store: &mut ParameterStore<T>, cache: &VadCache<T>, dp: ArrayView1<T>) {
        let g = dp.to_owned().insert_axis(Axis(1));
        let gz = self.out.backward(store, &cache.out, &g);
        let gh = self.hidden.backward(store, &cache.hidden, &gz);
        self.lstm.backward(store, &cache.lstm, &gh);
    }
}

pub fn vad_forward<T: Scalar>(vad: &Vad, store: &ParameterStore<T>, feats: &LogMelFeatures) -> Result<SpeechPosterior> {
    let x = feats.values.mapv(T::lit);
    let (p, _) = vad.forward(store, x.view())?;
    Ok(SpeechPosterior {
        p: p.mapv(|v| v.to_f64_lossy()),
    })
}

/// Mean frame cross-entropy plus `lambda` times the enhancement loss.
pub fn vad_loss(post: &SpeechPosterior, labels: &FrameLabels, se_mse: f64, lambda: f64) -> Result<f64> {
    if post.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} posteriors for {} labels",
            post.len(),
            labels.len()
        )));
    }
    if lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {lambda}")));
    }
    let y = labels.to_array::<f64>();
    let (ce, _) = bce_loss(post.p.view(), y.view());
    Ok(ce + lambda * se_mse)
}

/// Frame-level ROC area by the rank statistic; ties count half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 0).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &a in &pos {
        for &b in &neg {
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// Casts features to the network scalar.
pub fn features_as<T: Scalar>(feats: &LogMelFeatures) -> Array2<T> {
    feats.values.mapv(T::lit)
}
