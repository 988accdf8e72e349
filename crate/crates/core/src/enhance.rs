//! Mask-estimating enhancement backbones and waveform reconstruction.
//!
//! Each backbone maps a standardized T × F magnitude grid, plus an optional
//! per-frame auxiliary grid (noise embedding or broadcast noise average), to
//! a sigmoid mask of the same shape. Batches are lists of utterances; losses
//! only ever see real frames, so no padding reaches the gradient.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, s, Array2, Array4, ArrayView2, Axis};
use rand::Rng;

use crate::dne::POOLED_DIM;
use crate::dsp::{self, MagnitudeSpectrogram, PhaseSpectrogram, Waveform, BINS};
use crate::error::{Error, Result};
use crate::nn::batchnorm::BatchNormCache;
use crate::nn::conv::{ConvCache, ConvTransposeCache};
use crate::nn::dense::DenseCache;
use crate::nn::lstm::BiLstmCache;
use crate::nn::{
    Activation, BatchNorm, BiLstm, Conv2d, ConvTranspose2d, Ctx, Dense, Dropout, ParamId, ParameterStore, Scalar,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BackboneKind {
    Unet,
    Ddae,
    Blstm,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 3] = [BackboneKind::Unet, BackboneKind::Ddae, BackboneKind::Blstm];

    /// Width of the noise embedding this backbone consumes.
    pub fn dne_dim(self) -> usize {
        match self {
            BackboneKind::Unet => BINS,
            BackboneKind::Ddae | BackboneKind::Blstm => POOLED_DIM,
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::Unet => "unet",
            BackboneKind::Ddae => "ddae",
            BackboneKind::Blstm => "blstm",
        })
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(BackboneKind::Unet),
            "ddae" => Ok(BackboneKind::Ddae),
            "blstm" => Ok(BackboneKind::Blstm),
            other => Err(Error::InvalidArgument(format!("unknown backbone {other:?}"))),
        }
    }
}

/// Layer sizes for one backbone. `aux_dim == 0` is the baseline without an
/// auxiliary input.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub bins: usize,
    pub aux_dim: usize,
    pub unet_channels: [usize; 4],
    pub unet_chunk: usize,
    pub ddae_hidden: Vec<usize>,
    pub ddae_context: usize,
    pub dropout: f64,
    pub blstm_hidden: usize,
    pub blstm_layers: usize,
    pub blstm_head: usize,
}

/// Frequency padding granularity: four stride-2 levels.
pub const UNET_FREQ_MULTIPLE: usize = 16;
pub const UNET_CHUNK: usize = 64;

impl BackboneConfig {
    /// Full-size layer stacks.
    pub fn paper(kind: BackboneKind, use_aux: bool) -> Self {
        BackboneConfig {
            kind,
            bins: BINS,
            aux_dim: if use_aux { kind.dne_dim() } else { 0 },
            unet_channels: [16, 32, 64, 64],
            unet_chunk: UNET_CHUNK,
            ddae_hidden: vec![1024, 512, 256, 128, 256, 512, 1024],
            ddae_context: 5,
            dropout: 0.2,
            blstm_hidden: 512,
            blstm_layers: 2,
            blstm_head: 300,
        }
    }

    /// Same topologies with narrower layers, sized for single-core runs.
    pub fn desk(kind: BackboneKind, use_aux: bool) -> Self {
        BackboneConfig {
            unet_channels: [8, 16, 32, 32],
            ddae_hidden: vec![256, 128, 64, 32, 64, 128, 256],
            blstm_hidden: 64,
            blstm_head: 64,
            ..Self::paper(kind, use_aux)
        }
    }

    pub fn use_aux(&self) -> bool {
        self.aux_dim > 0
    }

    pub fn frame_dim(&self) -> usize {
        self.bins + self.aux_dim
    }

    /// Per-frame input width of the DDAE after context stacking.
    pub fn ddae_input_dim(&self) -> usize {
        self.frame_dim() * self.ddae_context
    }

    /// Per-step input width of the BLSTM.
    pub fn blstm_input_dim(&self) -> usize {
        self.frame_dim()
    }

    pub fn unet_in_channels(&self) -> usize {
        if self.use_aux() {
            2
        } else {
            1
        }
    }

    pub fn padded_bins(&self) -> usize {
        self.bins.div_ceil(UNET_FREQ_MULTIPLE) * UNET_FREQ_MULTIPLE
    }

    fn validate(&self) -> Result<()> {
        if self.bins == 0 {
            return Err(Error::InvalidArgument("backbone needs at least one bin".into()));
        }
        match self.kind {
            BackboneKind::Unet => {
                if self.use_aux() && self.aux_dim != self.bins {
                    return Err(Error::InvalidArgument(format!(
                        "U-Net auxiliary channel must have {} bins, got {}",
                        self.bins, self.aux_dim
                    )));
                }
                if self.unet_chunk == 0 || self.unet_chunk % UNET_FREQ_MULTIPLE != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "U-Net chunk must be a positive multiple of {UNET_FREQ_MULTIPLE}"
                    )));
                }
            }
            BackboneKind::Ddae => {
                if self.ddae_context % 2 == 0 || self.ddae_hidden.is_empty() {
                    return Err(Error::InvalidArgument(
                        "DDAE needs an odd context and at least one hidden layer".into(),
                    ));
                }
            }
            BackboneKind::Blstm => {}
        }
        Ok(())
    }
}

/// One utterance: standardized magnitude and optional auxiliary grid.
pub type BackboneInput<'a, T> = (ArrayView2<'a, T>, Option<ArrayView2<'a, T>>);

fn check_inputs<T: Scalar>(cfg: &BackboneConfig, inputs: &[BackboneInput<T>]) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    for (x, aux) in inputs {
        if x.ncols() != cfg.bins || x.nrows() == 0 {
            return Err(Error::Shape(format!(
                "backbone expects T x {} input, got {:?}",
                cfg.bins,
                x.shape()
            )));
        }
        match (aux, cfg.use_aux()) {
            (Some(a), true) if a.nrows() == x.nrows() && a.ncols() == cfg.aux_dim => {}
            (None, false) => {}
            (Some(a), true) => {
                return Err(Error::Shape(format!(
                    "auxiliary input must be {} x {}, got {:?}",
                    x.nrows(),
                    cfg.aux_dim,
                    a.shape()
                )))
            }
            (Some(_), false) => return Err(Error::Shape("backbone takes no auxiliary input".into())),
            (None, true) => return Err(Error::Shape("backbone requires an auxiliary input".into())),
        }
    }
    Ok(())
}

fn frame_features<'a, T: Scalar>(x: ArrayView2<'a, T>, aux: Option<ArrayView2<'a, T>>) -> Array2<T> {
    match aux {
        Some(a) => concatenate(Axis(1), &[x, a]).expect("same frame count"),
        None => x.to_owned(),
    }
}

#[derive(Debug, Clone)]
pub enum Backbone {
    Unet(Unet),
    Ddae(Ddae),
    Blstm(Blstm),
}

pub enum BackboneCache<T> {
    Unet(UnetCache<T>),
    Ddae(DdaeCache<T>),
    Blstm(Vec<BlstmCache<T>>),
}

impl Backbone {
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        cfg: &BackboneConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.kind {
            BackboneKind::Unet => Backbone::Unet(Unet::new(store, name, cfg, rng)),
            BackboneKind::Ddae => Backbone::Ddae(Ddae::new(store, name, cfg, rng)),
            BackboneKind::Blstm => Backbone::Blstm(Blstm::new(store, name, cfg, rng)),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        match self {
            Backbone::Unet(m) => &m.cfg,
            Backbone::Ddae(m) => &m.cfg,
            Backbone::Blstm(m) => &m.cfg,
        }
    }

    /// Masks for every utterance in the batch. In training mode U-Net chunks
    /// do not overlap; in inference they overlap by half and are averaged.
    pub fn forward<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        ctx: &mut Ctx<T>,
        inputs: &[BackboneInput<T>],
    ) -> Result<(Vec<Array2<T>>, BackboneCache<T>)> {
        check_inputs(self.config(), inputs)?;
        match self {
            Backbone::Unet(m) => {
                let (y, c) = m.forward(store, ctx, inputs)?;
                Ok((y, BackboneCache::Unet(c)))
            }
            Backbone::Ddae(m) => {
                let (y, c) = m.forward(store, ctx, inputs)?;
                Ok((y, BackboneCache::Ddae(c)))
            }
            Backbone::Blstm(m) => {
                let mut ys = Vec::with_capacity(inputs.len());
                let mut cs = Vec::with_capacity(inputs.len());
                for &(x, aux) in inputs {
                    let (y, c) = m.forward(store, x, aux)?;
                    ys.push(y);
                    cs.push(c);
                }
                Ok((ys, BackboneCache::Blstm(cs)))
            }
        }
    }

    /// Accumulates parameter gradients; returns the auxiliary-input gradient
    /// per utterance (`None` for baselines).
    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParameterStore<T>,
        cache: &BackboneCache<T>,
        grads: &[Array2<T>],
    ) -> Result<Vec<Option<Array2<T>>>> {
        match (self, cache) {
            (Backbone::Unet(m), BackboneCache::Unet(c)) => m.backward(store, c, grads),
            (Backbone::Ddae(m), BackboneCache::Ddae(c)) => m.backward(store, c, grads),
            (Backbone::Blstm(m), BackboneCache::Blstm(cs)) => {
                if cs.len() != grads.len() {
                    return Err(Error::Shape("gradient count differs from batch".into()));
                }
                Ok(cs.iter().zip(grads).map(|(c, g)| m.backward(store, c, g)).collect())
            }
            _ => Err(Error::InvalidArgument("cache from a different backbone".into())),
        }
    }

    /// Inference-mode mask for one utterance.
    pub fn infer<'a, T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        x: ArrayView2<'a, T>,
        aux: Option<ArrayView2<'a, T>>,
    ) -> Result<Array2<T>> {
        let mut ctx = Ctx::inference();
        let (mut ys, _) = self.forward(store, &mut ctx, &[(x, aux)])?;
        Ok(ys.remove(0))
    }
}

// ---------------------------------------------------------------- U-Net

#[derive(Debug, Clone)]
pub struct Unet {
    pub cfg: BackboneConfig,
    pub enc: Vec<(Conv2d, BatchNorm)>,
    pub dec: Vec<(ConvTranspose2d, BatchNorm)>,
    pub head: Conv2d,
    /// Per-bin logit offset; convolutions alone cannot tell bins apart.
    pub freq_bias: ParamId,
}

struct Stage<C, T> {
    conv: C,
    bn: BatchNormCache<T>,
    pre: Array4<T>,
    out: Array4<T>,
}

pub struct UnetCache<T> {
    enc: Vec<Stage<ConvCache<T>, T>>,
    dec: Vec<Stage<ConvTransposeCache<T>, T>>,
    head: ConvCache<T>,
    mask: Array4<T>,
    /// (utterance, start frame) per chunk
    chunks: Vec<(usize, usize)>,
    /// per-utterance frame counts and per-frame coverage
    coverage: Vec<Vec<usize>>,
}

/// Chunk start frames covering `frames`.
pub fn chunk_starts(frames: usize, chunk: usize, hop: usize) -> Vec<usize> {
    let mut starts = vec![0];
    let mut s = 0;
    while s + chunk < frames {
        s += hop;
        starts.push(s);
    }
    starts
}

impl Unet {
    fn new<T: Scalar>(store: &mut ParameterStore<T>, name: &str, cfg: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let ch = cfg.unet_channels;
        let k = (4, 4);
        let st = (2, 2);
        let p = (1, 1);
        let mut enc = Vec::new();
        let mut prev = cfg.unet_in_channels();
        for (i, &c) in ch.iter().enumerate() {
            enc.push((
                Conv2d::new(store, &format!("{name}.enc{i}.conv"), prev, c, k, st, p, rng),
                BatchNorm::new(store, &format!("{name}.enc{i}.bn"), c),
            ));
            prev = c;
        }
        let last = (ch[0] / 2).max(1);
        let plan = [
            (ch[3], ch[2]),
            (2 * ch[2], ch[1]),
            (2 * ch[1], ch[0]),
            (2 * ch[0], last),
        ];
        let dec = plan
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| {
                (
                    ConvTranspose2d::new(store, &format!("{name}.dec{i}.conv"), cin, cout, k, st, p, rng),
                    BatchNorm::new(store, &format!("{name}.dec{i}.bn"), cout),
                )
            })
            .collect();
        // the network input rejoins at full resolution before the head
        let head_in = last + cfg.unet_in_channels();
        let head = Conv2d::new(store, &format!("{name}.head"), head_in, 1, (1, 1), (1, 1), (0, 0), rng);
        let freq_bias = store.add_const(format!("{name}.freq_bias"), &[cfg.padded_bins()], 0.0, true);
        Unet {
            cfg: cfg.clone(),
            enc,
            dec,
            head,
            freq_bias,
        }
    }

    /// N × C × chunk × padded-bins to an N × 1 × chunk × padded-bins mask.
    fn core_forward<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        ctx: &mut Ctx<T>,
        x: Array4<T>,
    ) -> Result<(Array4<T>, Vec<Stage<ConvCache<T>, T>>, Vec<Stage<ConvTransposeCache<T>, T>>, ConvCache<T>)> {
        let act = Activation::LeakyRelu;
        let mut enc_caches = Vec::with_capacity(self.enc.len());
        let mut h = x.clone();
        for (conv, bn) in &self.enc {
            let (y, cc) = conv.forward(store, h.view())?;
            let (pre, bc) = bn.forward4(store, ctx, y.view())?;
            let out = act.forward(&pre);
            h = out.clone();
            enc_caches.push(Stage {
                conv: cc,
                bn: bc,
                pre,
                out,
            });
        }
        let n = self.enc.len();
        let mut dec_caches = Vec::with_capacity(self.dec.len());
        for (i, (conv, bn)) in self.dec.iter().enumerate() {
            let input = if i == 0 {
                h
            } else {
                concatenate(Axis(1), &[h.view(), enc_caches[n - 1 - i].out.view()]).expect("matching planes")
            };
            let (y, cc) = conv.forward(store, input.view())?;
            let (pre, bc) = bn.forward4(store, ctx, y.view())?;
            let out = act.forward(&pre);
            h = out.clone();
            dec_caches.push(Stage {
                conv: cc,
                bn: bc,
                pre,
                out,
            });
        }
        let top = concatenate(Axis(1), &[h.view(), x.view()]).expect("matching planes");
        let (mut z, head) = self.head.forward(store, top.view())?;
        let fb = store.value1(self.freq_bias);
        for mut lane in z.lanes_mut(Axis(3)) {
            lane += &fb;
        }
        let mask = Activation::Sigmoid.forward(&z);
        Ok((mask, enc_caches, dec_caches, head))
    }

    fn core_backward<T: Scalar>(&self, store: &mut ParameterStore<T>, cache: &UnetCache<T>, dmask: &Array4<T>) -> Result<Array4<T>> {
        let act = Activation::LeakyRelu;
        let dz = Activation::Sigmoid.backward(&cache.mask, &cache.mask, dmask);
        let mut db = ndarray::Array1::<T>::zeros(dz.dim().3);
        for lane in dz.lanes(Axis(3)) {
            db += &lane;
        }
        *store.grad_mut(self.freq_bias) += &db.into_dyn();
        let g_top = self.head.backward(store, &cache.head, &dz)?;
        let c_dec = g_top.dim().1 - self.cfg.unet_in_channels();
        let mut g = g_top.slice(s![.., ..c_dec, .., ..]).to_owned();
        let g_input = g_top.slice(s![.., c_dec.., .., ..]).to_owned();
        let n = self.enc.len();
        let mut skip_grads: Vec<Option<Array4<T>>> = vec![None; n];
        for (i, ((conv, bn), st)) in self.dec.iter().zip(&cache.dec).enumerate().rev() {
            let d = act.backward(&st.pre, &st.out, &g);
            let d = bn.backward4(store, &st.bn, &d);
            let din = conv.backward(store, &st.conv, &d)?;
            if i == 0 {
                skip_grads[n - 1] = Some(din);
            } else {
                let c_up = din.dim().1 - cache.enc[n - 1 - i].out.dim().1;
                g = din.slice(s![.., ..c_up, .., ..]).to_owned();
                skip_grads[n - 1 - i] = Some(din.slice(s![.., c_up.., .., ..]).to_owned());
            }
        }
        let mut carry: Option<Array4<T>> = None;
        for (k, ((conv, bn), st)) in self.enc.iter().zip(&cache.enc).enumerate().rev() {
            let mut gk = skip_grads[k].take().expect("every level has a decoder consumer");
            if let Some(c) = carry.take() {
                gk += &c;
            }
            let d = act.backward(&st.pre, &st.out, &gk);
            let d = bn.backward4(store, &st.bn, &d);
            carry = Some(conv.backward(store, &st.conv, &d)?);
        }
        Ok(carry.expect("encoder is nonempty") + g_input)
    }

    fn forward<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        ctx: &mut Ctx<T>,
        inputs: &[BackboneInput<T>],
    ) -> Result<(Vec<Array2<T>>, UnetCache<T>)> {
        let chunk = self.cfg.unet_chunk;
        let hop = if ctx.is_training() { chunk } else { chunk / 2 };
        let fp = self.cfg.padded_bins();
        let bins = self.cfg.bins;
        let cin = self.cfg.unet_in_channels();
        let mut chunks = Vec::new();
        for (u, (x, _)) in inputs.iter().enumerate() {
            for s0 in chunk_starts(x.nrows(), chunk, hop) {
                chunks.push((u, s0));
            }
        }
        let mut batch = Array4::<T>::zeros((chunks.len(), cin, chunk, fp));
        for (ci, &(u, s0)) in chunks.iter().enumerate() {
            let (x, aux) = inputs[u];
            let end = (s0 + chunk).min(x.nrows());
            let len = end - s0;
            batch
                .slice_mut(s![ci, 0, ..len, ..bins])
                .assign(&x.slice(s![s0..end, ..]));
            if let Some(a) = aux {
                batch
                    .slice_mut(s![ci, 1, ..len, ..bins])
                    .assign(&a.slice(s![s0..end, ..]));
            }
        }
        let (mask, enc, dec, head) = self.core_forward(store, ctx, batch)?;
        let mut outs: Vec<Array2<T>> = inputs.iter().map(|(x, _)| Array2::zeros(x.dim())).collect();
        let mut coverage: Vec<Vec<usize>> = inputs.iter().map(|(x, _)| vec![0; x.nrows()]).collect();
        for (ci, &(u, s0)) in chunks.iter().enumerate() {
            let end = (s0 + chunk).min(outs[u].nrows());
            let len = end - s0;
            let mut dst = outs[u].slice_mut(s![s0..end, ..]);
            dst += &mask.slice(s![ci, 0, ..len, ..bins]);
            for c in &mut coverage[u][s0..end] {
                *c += 1;
            }
        }
        for (out, cov) in outs.iter_mut().zip(&coverage) {
            for (mut row, &c) in out.outer_iter_mut().zip(cov) {
                if c > 1 {
                    row /= T::lit(c as f64);
                }
            }
        }
        Ok((
            outs,
            UnetCache {
                enc,
                dec,
                head,
                mask,
                chunks,
                coverage,
            },
        ))
    }

    fn backward<T: Scalar>(
        &self,
        store: &mut ParameterStore<T>,
        cache: &UnetCache<T>,
        grads: &[Array2<T>],
    ) -> Result<Vec<Option<Array2<T>>>> {
        if grads.len() != cache.coverage.len() {
            return Err(Error::Shape("gradient count differs from batch".into()));
        }
        let bins = self.cfg.bins;
        let mut dmask = Array4::<T>::zeros(cache.mask.raw_dim());
        for (ci, &(u, s0)) in cache.chunks.iter().enumerate() {
            let frames = grads[u].nrows();
            let end = (s0 + self.cfg.unet_chunk).min(frames);
            for t in s0..end {
                let scale = T::one() / T::lit(cache.coverage[u][t] as f64);
                let mut dst = dmask.slice_mut(s![ci, 0, t - s0, ..bins]);
                dst.zip_mut_with(&grads[u].row(t), |d, &g| *d = g * scale);
            }
        }
        let dx = self.core_backward(store, cache, &dmask)?;
        if !self.cfg.use_aux() {
            return Ok(vec![None; grads.len()]);
        }
        let mut out: Vec<Array2<T>> = grads.iter().map(|g| Array2::zeros(g.dim())).collect();
        for (ci, &(u, s0)) in cache.chunks.iter().enumerate() {
            let end = (s0 + self.cfg.unet_chunk).min(out[u].nrows());
            let mut dst = out[u].slice_mut(s![s0..end, ..]);
            dst += &dx.slice(s![ci, 1, ..end - s0, ..bins]);
        }
        Ok(out.into_iter().map(Some).collect())
    }
}

// ---------------------------------------------------------------- DDAE

#[derive(Debug, Clone)]
pub struct Ddae {
    pub cfg: BackboneConfig,
    pub hidden: Vec<(Dense, BatchNorm)>,
    pub out: Dense,
    pub dropout: Dropout,
}

struct DdaeLayerCache<T> {
    dense: DenseCache<T>,
    bn: BatchNormCache<T>,
    pre: Array2<T>,
    out: Array2<T>,
    mask: Option<Array2<T>>,
}

pub struct DdaeCache<T> {
    layers: Vec<DdaeLayerCache<T>>,
    out: DenseCache<T>,
    frames: Vec<usize>,
}

/// Stacks `context` neighbouring frames around each frame, replicating the
/// first and last frames at the edges.
pub fn context_window<T: Scalar>(frames: ArrayView2<T>, context: usize) -> Array2<T> {
    let (t, d) = frames.dim();
    let r = context / 2;
    let mut out = Array2::zeros((t, d * context));
    for i in 0..t {
        for k in 0..context {
            let src = (i + k).saturating_sub(r).min(t - 1);
            out.slice_mut(s![i, k * d..(k + 1) * d]).assign(&frames.row(src));
        }
    }
    out
}

/// Adjoint of [`context_window`].
fn context_window_backward<T: Scalar>(grad: ArrayView2<T>, d: usize, context: usize) -> Array2<T> {
    let t = grad.nrows();
    let r = context / 2;
    let mut out = Array2::zeros((t, d));
    for i in 0..t {
        for k in 0..context {
            let src = (i + k).saturating_sub(r).min(t - 1);
            let mut row = out.row_mut(src);
            row += &grad.slice(s![i, k * d..(k + 1) * d]);
        }
    }
    out
}

impl Ddae {
    fn new<T: Scalar>(store: &mut ParameterStore<T>, name: &str, cfg: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let mut prev = cfg.ddae_input_dim();
        let mut hidden = Vec::new();
        for (i, &h) in cfg.ddae_hidden.iter().enumerate() {
            hidden.push((
                Dense::new(store, &format!("{name}.h{i}"), prev, h, Activation::None, rng),
                BatchNorm::new(store, &format!("{name}.h{i}.bn"), h),
            ));
            prev = h;
        }
        let out = Dense::new(store, &format!("{name}.out"), prev, cfg.bins, Activation::Sigmoid, rng);
        Ddae {
            cfg: cfg.clone(),
            hidden,
            out,
            dropout: Dropout::new(cfg.dropout),
        }
    }

    fn forward<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        ctx: &mut Ctx<T>,
        inputs: &[BackboneInput<T>],
    ) -> Result<(Vec<Array2<T>>, DdaeCache<T>)> {
        let windows: Vec<Array2<T>> = inputs
            .iter()
            .map(|&(x, aux)| context_window(frame_features(x, aux).view(), self.cfg.ddae_context))
            .collect();
        let views: Vec<_> = windows.iter().map(|w| w.view()).collect();
        let mut h = concatenate(Axis(0), &views).expect("same width");
        let mut layers = Vec::with_capacity(self.hidden.len());
        for (dense, bn) in &self.hidden {
            let (y, dc) = dense.forward(store, h.view())?;
            let (pre, bc) = bn.forward2(store, ctx, y.view())?;
            let out = Activation::Relu.forward(&pre);
            let (dropped, mask) = self.dropout.forward(ctx, out.clone());
            h = dropped;
            layers.push(DdaeLayerCache {
                dense: dc,
                bn: bc,
                pre,
                out,
                mask,
            });
        }
        let (y, oc) = self.out.forward(store, h.view())?;
        let frames: Vec<usize> = inputs.iter().map(|(x, _)| x.nrows()).collect();
        let mut outs = Vec::with_capacity(frames.len());
        let mut at = 0;
        for &t in &frames {
            outs.push(y.slice(s![at..at + t, ..]).to_owned());
            at += t;
        }
        Ok((
            outs,
            DdaeCache {
                layers,
                out: oc,
                frames,
            },
        ))
    }

    fn backward<T: Scalar>(
        &self,
        store: &mut ParameterStore<T>,
        cache: &DdaeCache<T>,
        grads: &[Array2<T>],
    ) -> Result<Vec<Option<Array2<T>>>> {
        if grads.len() != cache.frames.len() {
            return Err(Error::Shape("gradient count differs from batch".into()));
        }
        let views: Vec<_> = grads.iter().map(|g| g.view()).collect();
        let g = concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        let mut g = self.out.backward(store, &cache.out, &g);
        for ((dense, bn), c) in self.hidden.iter().zip(&cache.layers).rev() {
            let d = self.dropout.backward(c.mask.as_ref(), g);
            let d = Activation::Relu.backward(&c.pre, &c.out, &d);
            let d = bn.backward2(store, &c.bn, &d);
            g = dense.backward(store, &c.dense, &d);
        }
        if !self.cfg.use_aux() {
            return Ok(vec![None; grads.len()]);
        }
        let fd = self.cfg.frame_dim();
        let mut out = Vec::with_capacity(grads.len());
        let mut at = 0;
        for &t in &cache.frames {
            let per_frame = context_window_backward(g.slice(s![at..at + t, ..]), fd, self.cfg.ddae_context);
            out.push(Some(per_frame.slice(s![.., self.cfg.bins..]).to_owned()));
            at += t;
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------- BLSTM

#[derive(Debug, Clone)]
pub struct Blstm {
    pub cfg: BackboneConfig,
    pub bi: BiLstm,
    pub hidden: Dense,
    pub out: Dense,
}

pub struct BlstmCache<T> {
    bi: BiLstmCache<T>,
    hidden: DenseCache<T>,
    out: DenseCache<T>,
}

impl Blstm {
    fn new<T: Scalar>(store: &mut ParameterStore<T>, name: &str, cfg: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let bi = BiLstm::new(
            store,
            &format!("{name}.bilstm"),
            cfg.blstm_input_dim(),
            cfg.blstm_hidden,
            cfg.blstm_layers,
            rng,
        );
        let hidden = Dense::new(
            store,
            &format!("{name}.hidden"),
            cfg.blstm_hidden,
            cfg.blstm_head,
            Activation::LeakyRelu,
            rng,
        );
        let out = Dense::new(store, &format!("{name}.out"), cfg.blstm_head, cfg.bins, Activation::Sigmoid, rng);
        Blstm {
            cfg: cfg.clone(),
            bi,
            hidden,
            out,
        }
    }

    /// The head reads the per-step backward-direction states of the top layer.
    fn forward<'a, T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        x: ArrayView2<'a, T>,
        aux: Option<ArrayView2<'a, T>>,
    ) -> Result<(Array2<T>, BlstmCache<T>)> {
        let f = frame_features(x, aux);
        let ((_, b), bi) = self.bi.forward(store, f.view())?;
        let (z, hidden) = self.hidden.forward(store, b.view())?;
        let (y, out) = self.out.forward(store, z.view())?;
        Ok((y, BlstmCache { bi, hidden, out }))
    }

    fn backward<T: Scalar>(&self, store: &mut ParameterStore<T>, cache: &BlstmCache<T>, grad: &Array2<T>) -> Option<Array2<T>> {
        let gz = self.out.backward(store, &cache.out, grad);
        let gb = self.hidden.backward(store, &cache.hidden, &gz);
        let dx = self.bi.backward(store, &cache.bi, None, Some(&gb))?;
        self.cfg
            .use_aux()
            .then(|| dx.slice(s![.., self.cfg.bins..]).to_owned())
    }
}

// ---------------------------------------------------------------- masking

/// Elementwise product of the raw noisy magnitude and a mask.
pub fn apply_mask(mag: &MagnitudeSpectrogram, mask: &Array2<f64>) -> Result<MagnitudeSpectrogram> {
    if mag.values.dim() != mask.dim() {
        return Err(Error::Shape(format!(
            "mask {:?} does not match magnitude {:?}",
            mask.dim(),
            mag.values.dim()
        )));
    }
    Ok(MagnitudeSpectrogram {
        values: &mag.values * mask,
    })
}

/// Inverse STFT of the enhanced magnitude with the noisy phase.
pub fn reconstruct(mag: &MagnitudeSpectrogram, phase: &PhaseSpectrogram, len: Option<usize>) -> Result<Waveform> {
    let spec = dsp::combine_mag_phase(mag, phase)?;
    dsp::istft(&spec, len)
}
