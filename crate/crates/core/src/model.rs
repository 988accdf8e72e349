//! The joint system: detector, noise embedding head and enhancement backbone,
//! with the coupled training step.
//!
//! Two parameter stores are kept so the two optimizers never share moments:
//! `se_store` holds the backbone and embedding head, `vad_store` the detector.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::corpus::ManifestItem;
use crate::dne::{
    avg_pool_half, confident_noise_average, dne_input, select_confident_frames, simple_noise_feature,
    DneCache, DneHead, FramewiseDifference, NoiseProfile, DEFAULT_ETA, DNE_INPUT_DIM, POOLED_DIM,
};
use crate::dsp::{
    log_mfb, split_mag_phase, standardize, stft, LogMelFeatures, MagnitudeSpectrogram, PhaseSpectrogram,
    StandardizedMagnitude, Waveform, BINS,
};
use crate::enhance::{apply_mask, reconstruct, Backbone, BackboneCache, BackboneConfig, BackboneInput, BackboneKind};
use crate::error::{Error, Result};
use crate::nn::loss::bce_loss;
use crate::nn::{adam_step, Ctx, ParameterStore, Scalar};
use crate::seed::derive_seed;
use crate::vad::{features_as, FrameLabels, SpeechPosterior, Vad, VadCache, VadConfig};
use crate::wav;

const TAG_POSTERIOR: u64 = 0x706f;
const TAG_DROPOUT: u64 = 0x6470;
const TAG_INIT: u64 = 0x696e;

/// What the backbone receives besides the noisy magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DneMode {
    /// Baseline, magnitude only.
    Off,
    /// Mean of the first ten frames, broadcast.
    Sn,
    /// Confident-frame noise average, broadcast.
    Cn,
    /// Learned per-frame embedding.
    Dne,
}

impl DneMode {
    pub const ALL: [DneMode; 4] = [DneMode::Off, DneMode::Sn, DneMode::Cn, DneMode::Dne];

    pub fn uses_aux(self) -> bool {
        self != DneMode::Off
    }
}

impl fmt::Display for DneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DneMode::Off => "off",
            DneMode::Sn => "sn",
            DneMode::Cn => "cn",
            DneMode::Dne => "dne",
        })
    }
}

impl FromStr for DneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(DneMode::Off),
            "sn" => Ok(DneMode::Sn),
            "cn" => Ok(DneMode::Cn),
            "dne" | "on" => Ok(DneMode::Dne),
            other => Err(Error::InvalidArgument(format!(
                "unknown noise mode {other:?} (expected off, sn, cn, dne/on)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" | "full" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::InvalidArgument(format!("unknown preset {other:?} (expected full, desk)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub vad: VadConfig,
    pub dne: DneMode,
    pub eta: f64,
}

impl ModelConfig {
    pub fn new(kind: BackboneKind, dne: DneMode, preset: Preset) -> Self {
        let backbone = match preset {
            Preset::Paper => BackboneConfig::paper(kind, dne.uses_aux()),
            Preset::Desk => BackboneConfig::desk(kind, dne.uses_aux()),
        };
        ModelConfig {
            backbone,
            vad: VadConfig::default(),
            dne,
            eta: DEFAULT_ETA,
        }
    }

    /// Very small layers with the full 257-bin front end, for gradient and
    /// overfitting checks.
    pub fn tiny(kind: BackboneKind, dne: DneMode) -> Self {
        let mut cfg = Self::new(kind, dne, Preset::Desk);
        cfg.backbone.unet_channels = [2, 2, 3, 3];
        cfg.backbone.unet_chunk = 16;
        cfg.backbone.ddae_hidden = vec![6, 4, 6];
        cfg.backbone.blstm_hidden = 3;
        cfg.backbone.blstm_head = 4;
        cfg.vad = VadConfig {
            hidden: 3,
            layers: 2,
            head: 4,
        };
        cfg
    }

    /// Posteriors are replaced by uniform noise when every frame is selected
    /// anyway; the detector then gets no enhancement gradient.
    pub fn randomizes_posteriors(&self) -> bool {
        self.dne == DneMode::Dne && self.eta >= 1.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::InvalidArgument(format!("eta must be in (0, 1], got {}", self.eta)));
        }
        if self.backbone.bins != BINS {
            return Err(Error::InvalidArgument(format!(
                "joint model needs {BINS} bins, got {}",
                self.backbone.bins
            )));
        }
        let want = if self.dne.uses_aux() { self.backbone.kind.dne_dim() } else { 0 };
        if self.backbone.aux_dim != want {
            return Err(Error::InvalidArgument(format!(
                "{} backbone in mode {} needs auxiliary width {want}, got {}",
                self.backbone.kind, self.dne, self.backbone.aux_dim
            )));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let b = &self.backbone;
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("backbone".into(), b.kind.to_string()),
            ("dne".into(), self.dne.to_string()),
            ("eta".into(), self.eta.to_string()),
            ("unet_channels".into(), list(&b.unet_channels)),
            ("unet_chunk".into(), b.unet_chunk.to_string()),
            ("ddae_hidden".into(), list(&b.ddae_hidden)),
            ("ddae_context".into(), b.ddae_context.to_string()),
            ("dropout".into(), b.dropout.to_string()),
            ("blstm_hidden".into(), b.blstm_hidden.to_string()),
            ("blstm_layers".into(), b.blstm_layers.to_string()),
            ("blstm_head".into(), b.blstm_head.to_string()),
            ("vad_hidden".into(), self.vad.hidden.to_string()),
            ("vad_layers".into(), self.vad.layers.to_string()),
            ("vad_head".into(), self.vad.head.to_string()),
        ]
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let key = |k: &str| format!("model.{k}");
        let list = |k: &str| -> Result<Vec<usize>> {
            ck.get(&key(k))?
                .split(',')
                .map(|v| v.parse().map_err(|_| Error::Checkpoint(format!("bad list entry in {k}"))))
                .collect()
        };
        let kind: BackboneKind = ck.get(&key("backbone"))?.parse()?;
        let dne: DneMode = ck.get(&key("dne"))?.parse()?;
        let channels = list("unet_channels")?;
        let unet_channels: [usize; 4] = channels
            .try_into()
            .map_err(|_| Error::Checkpoint("unet_channels needs four entries".into()))?;
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                kind,
                bins: BINS,
                aux_dim: if dne.uses_aux() { kind.dne_dim() } else { 0 },
                unet_channels,
                unet_chunk: ck.parse(&key("unet_chunk"))?,
                ddae_hidden: list("ddae_hidden")?,
                ddae_context: ck.parse(&key("ddae_context"))?,
                dropout: ck.parse(&key("dropout"))?,
                blstm_hidden: ck.parse(&key("blstm_hidden"))?,
                blstm_layers: ck.parse(&key("blstm_layers"))?,
                blstm_head: ck.parse(&key("blstm_head"))?,
            },
            vad: VadConfig {
                hidden: ck.parse(&key("vad_hidden"))?,
                layers: ck.parse(&key("vad_layers"))?,
                head: ck.parse(&key("vad_head"))?,
            },
            dne,
            eta: ck.parse(&key("eta"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Everything one utterance contributes to training or inference.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub len: usize,
    pub noisy: MagnitudeSpectrogram,
    pub phase: PhaseSpectrogram,
    pub standardized: StandardizedMagnitude,
    pub features: LogMelFeatures,
    pub clean: Option<MagnitudeSpectrogram>,
    pub labels: Option<FrameLabels>,
}

impl Utterance {
    pub fn prepare(
        id: impl Into<String>,
        noisy: &Waveform,
        clean: Option<&Waveform>,
        labels: Option<FrameLabels>,
    ) -> Result<Self> {
        let (mag, phase) = split_mag_phase(&stft(noisy)?);
        let frames = mag.frames();
        let clean = match clean {
            Some(c) => {
                if c.len() != noisy.len() {
                    return Err(Error::Shape(format!(
                        "clean has {} samples, noisy {}",
                        c.len(),
                        noisy.len()
                    )));
                }
                Some(split_mag_phase(&stft(c)?).0)
            }
            None => None,
        };
        if let Some(l) = &labels {
            if l.len() != frames {
                return Err(Error::Shape(format!("{} labels for {frames} frames", l.len())));
            }
        }
        Ok(Utterance {
            id: id.into(),
            len: noisy.len(),
            standardized: standardize(&mag)?,
            features: log_mfb(&mag)?,
            noisy: mag,
            phase,
            clean,
            labels,
        })
    }

    pub fn load(item: &ManifestItem) -> Result<Self> {
        let noisy = wav::read_wav(&item.noisy)?;
        let clean = wav::read_wav(&item.clean)?;
        let labels = FrameLabels::read(&item.label)?;
        Self::prepare(item.id(), &noisy, Some(&clean), Some(labels))
    }

    pub fn frames(&self) -> usize {
        self.noisy.frames()
    }
}

/// Per-step knobs of the coupled update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig {
    pub lambda: f64,
    pub lr_se: f64,
    pub lr_vad: f64,
    /// Seeds dropout and, at eta = 1, the random posteriors.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub l_mse: f64,
    pub l_ce: f64,
    /// Confident-frame set used for each utterance (empty when unused).
    pub selections: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct Enhancement {
    pub mask: Array2<f64>,
    pub magnitude: MagnitudeSpectrogram,
    pub waveform: Waveform,
    pub posterior: SpeechPosterior,
    pub confident_set: Vec<usize>,
}

struct BatchForward<T> {
    posts: Vec<Array1<T>>,
    vad_caches: Vec<VadCache<T>>,
    selections: Vec<Vec<usize>>,
    head_caches: Vec<Option<DneCache<T>>>,
    masks: Vec<Array2<T>>,
    backbone: BackboneCache<T>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub vad: Vad,
    pub backbone: Backbone,
    pub head: Option<DneHead>,
    pub se_store: ParameterStore<T>,
    pub vad_store: ParameterStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_INIT]));
        let mut vad_store = ParameterStore::new();
        let vad = Vad::new(&mut vad_store, "vad", cfg.vad, &mut rng);
        let mut se_store = ParameterStore::new();
        let backbone = Backbone::new(&mut se_store, "se", &cfg.backbone, &mut rng)?;
        let head = if cfg.dne == DneMode::Dne {
            Some(DneHead::new(&mut se_store, "dne", cfg.backbone.kind.dne_dim(), &mut rng)?)
        } else {
            None
        };
        Ok(Model {
            cfg,
            vad,
            backbone,
            head,
            se_store,
            vad_store,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            vad: self.vad.clone(),
            backbone: self.backbone.clone(),
            head: self.head.clone(),
            se_store: self.se_store.cast(),
            vad_store: self.vad_store.cast(),
        }
    }

    /// Detector output for one utterance.
    pub fn posterior(&self, utt: &Utterance) -> Result<Array1<T>> {
        Ok(self.vad.forward(&self.vad_store, features_as::<T>(&utt.features).view())?.0)
    }

    fn selection_posterior(&self, p: &Array1<T>, seed: u64, index: usize) -> Array1<T> {
        if self.cfg.randomizes_posteriors() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_POSTERIOR, index as u64]));
            Array1::from_shape_fn(p.len(), |_| T::lit(rng.gen_range(0.0..1.0)))
        } else {
            p.clone()
        }
    }

    fn broadcast_stat(&self, utt: &Utterance, v: Array1<f64>) -> Result<Array2<T>> {
        let v = v.mapv(|x| utt.standardized.scale_like(x));
        let v = if self.cfg.backbone.aux_dim == POOLED_DIM {
            avg_pool_half(v.view())?
        } else {
            v
        };
        Ok(Array2::from_shape_fn((utt.frames(), v.len()), |(_, j)| T::lit(v[j])))
    }

    fn auxiliary(
        &self,
        utt: &Utterance,
        post: &Array1<T>,
        selection: &[usize],
    ) -> Result<(Option<Array2<T>>, Option<DneCache<T>>)> {
        let mag = utt.noisy.values.view();
        match self.cfg.dne {
            DneMode::Off => Ok((None, None)),
            DneMode::Sn => Ok((Some(self.broadcast_stat(utt, simple_noise_feature(&utt.noisy)?)?), None)),
            DneMode::Cn => Ok((
                Some(self.broadcast_stat(utt, confident_noise_average(mag, selection)?)?),
                None,
            )),
            DneMode::Dne => {
                let head = self.head.as_ref().expect("embedding mode builds a head");
                let profile = NoiseProfile::new(mag, selection.to_vec())?;
                let fd = FramewiseDifference::new(mag, &profile)?;
                let x = dne_input(profile.n_avg_pooled.view(), fd.fd_pooled.view(), post.view())?;
                let (e, cache) = head.forward(&self.se_store, x.view())?;
                Ok((Some(e), Some(cache)))
            }
        }
    }

    fn forward_batch(
        &self,
        batch: &[&Utterance],
        ctx: &mut Ctx<T>,
        seed: u64,
        frozen: Option<&[Vec<usize>]>,
    ) -> Result<BatchForward<T>> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if let Some(f) = frozen {
            if f.len() != batch.len() {
                return Err(Error::Shape("one frozen selection per utterance required".into()));
            }
        }
        let n = batch.len();
        let mut posts = Vec::with_capacity(n);
        let mut vad_caches = Vec::with_capacity(n);
        let mut selections = Vec::with_capacity(n);
        let mut head_caches = Vec::with_capacity(n);
        let mut auxes = Vec::with_capacity(n);
        let needs_selection = matches!(self.cfg.dne, DneMode::Cn | DneMode::Dne);
        for (i, utt) in batch.iter().enumerate() {
            let (p, vc) = self.vad.forward(&self.vad_store, features_as::<T>(&utt.features).view())?;
            let p_sel = self.selection_posterior(&p, seed, i);
            let selection = match (frozen, needs_selection) {
                (Some(f), true) => f[i].clone(),
                (None, true) => {
                    let p64: Vec<f64> = p_sel.iter().map(|v| v.to_f64_lossy()).collect();
                    select_confident_frames(&p64, self.cfg.eta)?
                }
                (_, false) => Vec::new(),
            };
            let (aux, hc) = self.auxiliary(utt, &p_sel, &selection)?;
            posts.push(p);
            vad_caches.push(vc);
            selections.push(selection);
            head_caches.push(hc);
            auxes.push(aux);
        }
        let xs: Vec<Array2<T>> = batch.iter().map(|u| u.standardized.values.mapv(T::lit)).collect();
        let inputs: Vec<BackboneInput<T>> = xs
            .iter()
            .zip(&auxes)
            .map(|(x, a)| (x.view(), a.as_ref().map(|a| a.view())))
            .collect();
        let (masks, backbone) = self.backbone.forward(&self.se_store, ctx, &inputs)?;
        Ok(BatchForward {
            posts,
            vad_caches,
            selections,
            head_caches,
            masks,
            backbone,
        })
    }

    /// Mean over all T × 257 entries of the batch, with per-mask gradients.
    fn mse(batch: &[&Utterance], masks: &[Array2<T>]) -> Result<(f64, Vec<Array2<T>>)> {
        let total: usize = batch.iter().map(|u| u.noisy.values.len()).sum();
        let scale = T::lit(2.0 / total as f64);
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(batch.len());
        for (utt, mask) in batch.iter().zip(masks) {
            let clean = utt
                .clean
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument(format!("{}: no clean reference", utt.id)))?;
            let noisy = utt.noisy.values.mapv(T::lit);
            let diff = mask * &noisy - &clean.values.mapv(T::lit);
            loss += diff.iter().map(|d| d.to_f64_lossy().powi(2)).sum::<f64>();
            grads.push(diff * &noisy * scale);
        }
        Ok((loss / total as f64, grads))
    }

    /// Frame-weighted mean cross-entropy and its posterior gradients.
    fn cross_entropy(batch: &[&Utterance], posts: &[Array1<T>]) -> Result<(f64, Vec<Array1<T>>)> {
        let total: usize = posts.iter().map(|p| p.len()).sum();
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(batch.len());
        for (utt, p) in batch.iter().zip(posts) {
            let labels = utt
                .labels
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument(format!("{}: no frame labels", utt.id)))?;
            let (l, g) = bce_loss(p.view(), labels.to_array::<T>().view());
            let w = p.len() as f64 / total as f64;
            loss += w * l.to_f64_lossy();
            grads.push(g * T::lit(w));
        }
        Ok((loss, grads))
    }

    /// Fills both stores' gradient slots for one batch without stepping:
    /// θ_SE and θ_DNE get ∂l_MSE, θ_VAD gets ∂l_CE + λ·∂l_MSE where the
    /// second term enters only through the posterior column of the
    /// embedding input. `frozen` pins the confident-frame sets.
    pub fn compute_gradients(
        &mut self,
        batch: &[&Utterance],
        lambda: f64,
        seed: u64,
        frozen: Option<&[Vec<usize>]>,
    ) -> Result<StepReport> {
        if !(lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {lambda}")));
        }
        self.se_store.zero_grads();
        self.vad_store.zero_grads();
        let mut ctx = Ctx::training(derive_seed(seed, &[TAG_DROPOUT]));
        let fwd = self.forward_batch(batch, &mut ctx, seed, frozen)?;
        let (l_mse, d_masks) = Self::mse(batch, &fwd.masks)?;
        let (l_ce, mut d_posts) = Self::cross_entropy(batch, &fwd.posts)?;
        if !l_mse.is_finite() || !l_ce.is_finite() {
            return Err(Error::NonFiniteLoss(format!("l_mse = {l_mse}, l_ce = {l_ce}")));
        }
        let Model {
            cfg,
            vad,
            backbone,
            head,
            se_store,
            vad_store,
        } = self;
        let aux_grads = backbone.backward(se_store, &fwd.backbone, &d_masks)?;
        if let Some(head) = head.as_ref() {
            let lam = T::lit(lambda);
            for (i, hc) in fwd.head_caches.iter().enumerate() {
                let (Some(hc), Some(g)) = (hc, aux_grads[i].as_ref()) else {
                    return Err(Error::Shape("embedding gradient missing".into()));
                };
                let d_input = head.backward(se_store, hc, g);
                if !cfg.randomizes_posteriors() {
                    let dp = d_input.index_axis(Axis(1), DNE_INPUT_DIM - 1);
                    d_posts[i].zip_mut_with(&dp, |a, &b| *a += lam * b);
                }
            }
        }
        for (cache, dp) in fwd.vad_caches.iter().zip(&d_posts) {
            vad.backward(vad_store, cache, dp.view());
        }
        ctx.commit(se_store);
        Ok(StepReport {
            l_mse,
            l_ce,
            selections: fwd.selections,
        })
    }

    /// Forward-only losses in inference mode.
    pub fn evaluate_losses(&self, batch: &[&Utterance], seed: u64) -> Result<(f64, f64)> {
        let mut ctx = Ctx::inference();
        let fwd = self.forward_batch(batch, &mut ctx, seed, None)?;
        let (l_mse, _) = Self::mse(batch, &fwd.masks)?;
        let (l_ce, _) = Self::cross_entropy(batch, &fwd.posts)?;
        Ok((l_mse, l_ce))
    }

    /// Forward-only losses under exactly the training-mode pass that
    /// [`Model::compute_gradients`] differentiates (same dropout draws).
    pub fn training_losses(&self, batch: &[&Utterance], seed: u64, frozen: Option<&[Vec<usize>]>) -> Result<(f64, f64)> {
        let mut ctx = Ctx::training(derive_seed(seed, &[TAG_DROPOUT]));
        let fwd = self.forward_batch(batch, &mut ctx, seed, frozen)?;
        let (l_mse, _) = Self::mse(batch, &fwd.masks)?;
        let (l_ce, _) = Self::cross_entropy(batch, &fwd.posts)?;
        Ok((l_mse, l_ce))
    }

    /// Masks and posteriors of that same training-mode pass, in the network
    /// scalar.
    pub fn training_outputs(
        &self,
        batch: &[&Utterance],
        seed: u64,
        frozen: Option<&[Vec<usize>]>,
    ) -> Result<(Vec<Array2<T>>, Vec<Array1<T>>)> {
        let mut ctx = Ctx::training(derive_seed(seed, &[TAG_DROPOUT]));
        let fwd = self.forward_batch(batch, &mut ctx, seed, frozen)?;
        Ok((fwd.masks, fwd.posts))
    }

    /// Mask, enhanced magnitude and waveform for one utterance. With
    /// `identity` the mask is forced to one.
    pub fn enhance(&self, utt: &Utterance, identity: bool, seed: u64) -> Result<Enhancement> {
        let mut ctx = Ctx::inference();
        let fwd = self.forward_batch(&[utt], &mut ctx, seed, None)?;
        let mask = if identity {
            Array2::ones(utt.noisy.values.raw_dim())
        } else {
            fwd.masks[0].mapv(|v| v.to_f64_lossy())
        };
        let magnitude = apply_mask(&utt.noisy, &mask)?;
        let waveform = reconstruct(&magnitude, &utt.phase, Some(utt.len))?;
        Ok(Enhancement {
            mask,
            magnitude,
            waveform,
            posterior: SpeechPosterior {
                p: fwd.posts[0].mapv(|v| v.to_f64_lossy()),
            },
            confident_set: fwd.selections.into_iter().next().unwrap_or_default(),
        })
    }

    pub fn enhance_waveform(&self, noisy: &Waveform, identity: bool, seed: u64) -> Result<Waveform> {
        let utt = Utterance::prepare("input", noisy, None, None)?;
        Ok(self.enhance(&utt, identity, seed)?.waveform)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for (k, v) in self.cfg.to_pairs() {
            ck.set(format!("model.{k}"), v);
        }
        ck.set("model.dtype", format!("{:?}", T::DTYPE));
        ck.put_store("se", &self.se_store);
        ck.put_store("vad", &self.vad_store);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = ModelConfig::from_checkpoint(ck)?;
        let mut model = Self::new(cfg, 0)?;
        ck.restore_store("se", &mut model.se_store)?;
        ck.restore_store("vad", &mut model.vad_store)?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// One coupled update: Adam on θ_SE ∪ θ_DNE at `lr_se` from l_MSE and Adam
/// on θ_VAD at `lr_vad` from l_CE + λ·l_MSE. Returns `(l_mse, l_ce)`.
pub fn joint_train_step<T: Scalar>(model: &mut Model<T>, batch: &[&Utterance], step: &StepConfig) -> Result<(f64, f64)> {
    if !(step.lr_se > 0.0 && step.lr_vad > 0.0) {
        return Err(Error::InvalidArgument("learning rates must be positive".into()));
    }
    let report = model.compute_gradients(batch, step.lambda, step.seed, None)?;
    adam_step(&mut model.se_store, step.lr_se);
    adam_step(&mut model.vad_store, step.lr_vad);
    Ok((report.l_mse, report.l_ce))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{label_frames, mix_at_snr, synth_noise, synth_speech, NoiseKind};

    fn utterance(seed: u64, samples: usize) -> Utterance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clean = synth_speech(samples, &mut rng);
        let noise = synth_noise(NoiseKind::White, samples, &mut rng);
        let m = mix_at_snr(&clean, &noise, 0.0, &mut rng).unwrap();
        let labels = label_frames(&m.clean).unwrap();
        Utterance::prepare("u", &m.noisy, Some(&m.clean), Some(labels)).unwrap()
    }

    #[test]
    fn mode_names_round_trip() {
        for m in DneMode::ALL {
            assert_eq!(m.to_string().parse::<DneMode>().unwrap(), m);
        }
        assert_eq!("on".parse::<DneMode>().unwrap(), DneMode::Dne);
        assert!("maybe".parse::<DneMode>().is_err());
    }

    #[test]
    fn config_rejects_bad_eta_and_widths() {
        let mut c = ModelConfig::new(BackboneKind::Ddae, DneMode::Dne, Preset::Desk);
        c.eta = 0.0;
        assert!(c.validate().is_err());
        c.eta = 1.0;
        assert!(c.validate().is_ok());
        c.backbone.aux_dim = 257;
        assert!(c.validate().is_err());
    }

    #[test]
    fn off_mode_has_no_head_and_vad_still_learns() {
        let mut m = Model::<f64>::new(ModelConfig::tiny(BackboneKind::Ddae, DneMode::Off), 1).unwrap();
        assert!(m.head.is_none());
        assert!(m.se_store.params().iter().all(|p| !p.name.starts_with("dne")));
        let u = utterance(2, 8000);
        m.compute_gradients(&[&u], 1.0, 0, None).unwrap();
        let g: f64 = m.vad_store.params().iter().map(|p| p.grad.iter().map(|v| v.abs()).sum::<f64>()).sum();
        assert!(g > 0.0);
    }

    #[test]
    fn checkpoint_restores_identical_outputs() {
        let cfg = ModelConfig::tiny(BackboneKind::Unet, DneMode::Dne);
        let mut m = Model::<f32>::new(cfg, 3).unwrap();
        let u = utterance(4, 8000);
        let step = StepConfig {
            lambda: 1.0,
            lr_se: 1e-3,
            lr_vad: 1e-2,
            seed: 5,
        };
        joint_train_step(&mut m, &[&u], &step).unwrap();
        let ck = m.to_checkpoint();
        let back = Model::<f32>::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.cfg, m.cfg);
        assert_eq!(back.to_checkpoint(), ck);
        let a = m.enhance(&u, false, 0).unwrap();
        let b = back.enhance(&u, false, 0).unwrap();
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn identity_enhancement_returns_the_input() {
        let m = Model::<f64>::new(ModelConfig::tiny(BackboneKind::Blstm, DneMode::Sn), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = synth_speech(8000, &mut rng);
        let y = m.enhance_waveform(&x, true, 0).unwrap();
        let err = x.samples.iter().zip(&y.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn random_posteriors_cut_the_detector_path() {
        let mut cfg = ModelConfig::tiny(BackboneKind::Ddae, DneMode::Dne);
        cfg.eta = 1.0;
        let u = utterance(6, 8000);
        let mut a = Model::<f64>::new(cfg, 1).unwrap();
        let mut b = a.clone();
        a.compute_gradients(&[&u], 1.0, 0, None).unwrap();
        b.compute_gradients(&[&u], 0.0, 0, None).unwrap();
        for (pa, pb) in a.vad_store.params().iter().zip(b.vad_store.params()) {
            assert_eq!(pa.grad, pb.grad);
        }
    }

    #[test]
    fn missing_targets_are_errors() {
        let mut m = Model::<f64>::new(ModelConfig::tiny(BackboneKind::Ddae, DneMode::Off), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = synth_speech(8000, &mut rng);
        let u = Utterance::prepare("x", &x, None, None).unwrap();
        assert!(m.compute_gradients(&[&u], 1.0, 0, None).is_err());
        assert!(m.compute_gradients(&[], 1.0, 0, None).is_err());
    }
}
