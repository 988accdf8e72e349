//! Confident-noise statistics and the per-frame noise embedding.
//!
//! Noise statistics are computed on raw (unstandardized) noisy magnitudes.
//! Frame selection is a hard threshold on detached posteriors; the only
//! differentiable path from the posterior into the embedding is the `p_t`
//! column of the head input.

use std::io::Write;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::dsp::{MagnitudeSpectrogram, BINS};
use crate::error::{Error, Result};
use crate::nn::dense::DenseCache;
use crate::nn::{Activation, Dense, ParameterStore, Scalar};

pub const DEFAULT_ETA: f64 = 0.3;
/// Thresholds swept by the ablation.
pub const ETA_GRID: [f64; 5] = [0.2, 0.3, 0.4, 0.5, 1.0];
pub const POOLED_DIM: usize = BINS / 2;
pub const DNE_INPUT_DIM: usize = 2 * POOLED_DIM + 1;
pub const DNE_HIDDEN: usize = 128;
/// Frames averaged by the simple-noise baseline.
pub const SN_FRAMES: usize = 10;

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("eta must be in (0, 1], got {eta}")))
    }
}

/// `{ t : p_t < eta }` without the empty-set fallback.
pub fn threshold_set(post: &[f64], eta: f64) -> Vec<usize> {
    post.iter()
        .enumerate()
        .filter(|(_, &p)| p < eta)
        .map(|(t, _)| t)
        .collect()
}

/// Frames whose speech posterior is below `eta`. When no frame qualifies,
/// the frame with the smallest posterior is used (first on ties).
/// `eta = 1.0` selects every frame.
pub fn select_confident_frames(post: &[f64], eta: f64) -> Result<Vec<usize>> {
    check_eta(eta)?;
    if post.is_empty() {
        return Err(Error::EmptyWaveform);
    }
    if eta >= 1.0 {
        return Ok((0..post.len()).collect());
    }
    let set = threshold_set(post, eta);
    if !set.is_empty() {
        return Ok(set);
    }
    let mut best = 0;
    for (t, &p) in post.iter().enumerate() {
        if p < post[best] {
            best = t;
        }
    }
    Ok(vec![best])
}

/// Mean of the magnitude rows indexed by `set`.
pub fn confident_noise_average(mag: ArrayView2<f64>, set: &[usize]) -> Result<Array1<f64>> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("empty confident frame set".into()));
    }
    let mut acc = Array1::zeros(mag.ncols());
    for &t in set {
        if t >= mag.nrows() {
            return Err(Error::InvalidArgument(format!(
                "frame {t} out of range for {} frames",
                mag.nrows()
            )));
        }
        acc += &mag.row(t);
    }
    Ok(acc / set.len() as f64)
}

/// `| |Y_t| - n_avg |` for every frame.
pub fn framewise_difference(mag: ArrayView2<f64>, n_avg: ArrayView1<f64>) -> Result<Array2<f64>> {
    if mag.ncols() != n_avg.len() {
        return Err(Error::Shape(format!(
            "magnitude has {} bins, noise average {}",
            mag.ncols(),
            n_avg.len()
        )));
    }
    Ok((&mag - &n_avg).mapv(f64::abs))
}

/// Window-2 stride-2 mean over the first 256 entries; the Nyquist bin is
/// dropped.
pub fn avg_pool_half<T: Scalar>(v: ArrayView1<T>) -> Result<Array1<T>> {
    if v.len() != BINS {
        return Err(Error::Shape(format!("pooling expects {BINS} entries, got {}", v.len())));
    }
    let half = T::lit(0.5);
    Ok(Array1::from_shape_fn(POOLED_DIM, |i| (v[2 * i] + v[2 * i + 1]) * half))
}

/// Row-wise [`avg_pool_half`].
pub fn avg_pool_half_rows<T: Scalar>(m: ArrayView2<T>) -> Result<Array2<T>> {
    if m.ncols() != BINS {
        return Err(Error::Shape(format!("pooling expects {BINS} columns, got {}", m.ncols())));
    }
    let half = T::lit(0.5);
    Ok(Array2::from_shape_fn((m.nrows(), POOLED_DIM), |(t, i)| {
        (m[[t, 2 * i]] + m[[t, 2 * i + 1]]) * half
    }))
}

/// Confident set plus its noise average, raw and pooled.
#[derive(Debug, Clone)]
pub struct NoiseProfile {
    pub confident_set: Vec<usize>,
    pub n_avg: Array1<f64>,
    pub n_avg_pooled: Array1<f64>,
}

impl NoiseProfile {
    pub fn new(mag: ArrayView2<f64>, confident_set: Vec<usize>) -> Result<Self> {
        let n_avg = confident_noise_average(mag, &confident_set)?;
        let n_avg_pooled = avg_pool_half(n_avg.view())?;
        Ok(NoiseProfile {
            confident_set,
            n_avg,
            n_avg_pooled,
        })
    }

    pub fn count(&self) -> usize {
        self.confident_set.len()
    }
}

#[derive(Debug, Clone)]
pub struct FramewiseDifference {
    pub fd: Array2<f64>,
    pub fd_pooled: Array2<f64>,
}

impl FramewiseDifference {
    pub fn new(mag: ArrayView2<f64>, profile: &NoiseProfile) -> Result<Self> {
        let fd = framewise_difference(mag, profile.n_avg.view())?;
        let fd_pooled = avg_pool_half_rows(fd.view())?;
        Ok(FramewiseDifference { fd, fd_pooled })
    }
}

/// Head input rows `[n_avg_pooled; fd_pooled_t; p_t]`, T × 257.
pub fn dne_input<T: Scalar>(
    n_avg_pooled: ArrayView1<f64>,
    fd_pooled: ArrayView2<f64>,
    post: ArrayView1<T>,
) -> Result<Array2<T>> {
    let frames = fd_pooled.nrows();
    if n_avg_pooled.len() != POOLED_DIM || fd_pooled.ncols() != POOLED_DIM || post.len() != frames {
        return Err(Error::Shape(format!(
            "embedding input parts {} + {}x{} + {} do not line up",
            n_avg_pooled.len(),
            frames,
            fd_pooled.ncols(),
            post.len()
        )));
    }
    let mut x = Array2::zeros((frames, DNE_INPUT_DIM));
    for t in 0..frames {
        let mut row = x.row_mut(t);
        for i in 0..POOLED_DIM {
            row[i] = T::lit(n_avg_pooled[i]);
            row[POOLED_DIM + i] = T::lit(fd_pooled[[t, i]]);
        }
        row[2 * POOLED_DIM] = post[t];
    }
    Ok(x)
}

/// Two-layer embedding head: 257 → 128 leaky ReLU → D tanh.
#[derive(Debug, Clone)]
pub struct DneHead {
    pub hidden: Dense,
    pub out: Dense,
    pub out_dim: usize,
}

pub struct DneCache<T> {
    hidden: DenseCache<T>,
    out: DenseCache<T>,
}

impl DneHead {
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if out_dim != BINS && out_dim != POOLED_DIM {
            return Err(Error::InvalidArgument(format!(
                "embedding dimension must be {BINS} or {POOLED_DIM}, got {out_dim}"
            )));
        }
        Ok(DneHead {
            hidden: Dense::new(
                store,
                &format!("{name}.hidden"),
                DNE_INPUT_DIM,
                DNE_HIDDEN,
                Activation::LeakyRelu,
                rng,
            ),
            out: Dense::new(store, &format!("{name}.out"), DNE_HIDDEN, out_dim, Activation::Tanh, rng),
            out_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.in_dim
    }

    pub fn forward<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        input: ArrayView2<T>,
    ) -> Result<(Array2<T>, DneCache<T>)> {
        let (h, hidden) = self.hidden.forward(store, input)?;
        let (e, out) = self.out.forward(store, h.view())?;
        Ok((e, DneCache { hidden, out }))
    }

    /// Returns the gradient w.r.t. the head input; its last column is the
    /// posterior gradient.
    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParameterStore<T>,
        cache: &DneCache<T>,
        grad: &Array2<T>,
    ) -> Array2<T> {
        let gh = self.out.backward(store, &cache.out, grad);
        self.hidden.backward(store, &cache.hidden, &gh)
    }
}

/// Single-frame embedding from its three parts.
pub fn extract_dne<T: Scalar>(
    head: &DneHead,
    store: &ParameterStore<T>,
    n_avg_pooled: ArrayView1<f64>,
    fd_pooled_t: ArrayView1<f64>,
    p_t: T,
) -> Result<Array1<T>> {
    let fd = fd_pooled_t.insert_axis(Axis(0));
    let p = Array1::from_elem(1, p_t);
    let x = dne_input(n_avg_pooled, fd, p.view())?;
    let (e, _) = head.forward(store, x.view())?;
    Ok(e.row(0).to_owned())
}

/// Embeddings for a whole utterance given its posteriors.
pub fn utterance_dne<T: Scalar>(
    head: &DneHead,
    store: &ParameterStore<T>,
    mag: &MagnitudeSpectrogram,
    post: ArrayView1<T>,
    eta: f64,
) -> Result<Array2<T>> {
    let p64: Vec<f64> = post.iter().map(|p| p.to_f64_lossy()).collect();
    let profile = NoiseProfile::new(mag.values.view(), select_confident_frames(&p64, eta)?)?;
    let fd = FramewiseDifference::new(mag.values.view(), &profile)?;
    let x = dne_input(profile.n_avg_pooled.view(), fd.fd_pooled.view(), post)?;
    Ok(head.forward(store, x.view())?.0)
}

/// Mean of the first ten frames (all frames for shorter utterances).
pub fn simple_noise_feature(mag: &MagnitudeSpectrogram) -> Result<Array1<f64>> {
    let t = mag.values.nrows();
    if t == 0 {
        return Err(Error::EmptyWaveform);
    }
    Ok(mag
        .values
        .slice(s![..t.min(SN_FRAMES), ..])
        .mean_axis(Axis(0))
        .expect("nonempty"))
}

/// Noise average over the confident frames.
pub fn confident_noise_feature(mag: &MagnitudeSpectrogram, post: &[f64], eta: f64) -> Result<Array1<f64>> {
    let set = select_confident_frames(post, eta)?;
    confident_noise_average(mag.values.view(), &set)
}

/// Appends one text record per utterance: id, confident indices and the
/// noise average.
pub fn write_debug_record(
    out: &mut impl Write,
    utterance: &str,
    profile: &NoiseProfile,
) -> std::io::Result<()> {
    writeln!(out, "utterance\t{utterance}")?;
    let idx: Vec<String> = profile.confident_set.iter().map(|t| t.to_string()).collect();
    writeln!(out, "confident\t{}", idx.join(" "))?;
    let avg: Vec<String> = profile.n_avg.iter().map(|v| format!("{v:.6e}")).collect();
    writeln!(out, "n_avg\t{}", avg.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn selection_examples() {
        let p = [0.1, 0.6, 0.25, 0.9];
        assert_eq!(select_confident_frames(&p, 0.3).unwrap(), vec![0, 2]);
        assert_eq!(select_confident_frames(&p, 1.0).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(select_confident_frames(&[0.8, 0.9], 0.3).unwrap(), vec![0]);
        assert_eq!(select_confident_frames(&[0.9, 0.8, 0.8], 0.3).unwrap(), vec![1]);
        assert!(select_confident_frames(&p, 0.0).is_err());
        assert!(select_confident_frames(&p, 1.5).is_err());
    }

    #[test]
    fn average_and_difference_examples() {
        let mag = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(confident_noise_average(mag.view(), &[0, 1]).unwrap(), array![2.0, 3.0]);
        assert_eq!(confident_noise_average(mag.view(), &[1]).unwrap(), array![3.0, 4.0]);
        assert!(confident_noise_average(mag.view(), &[]).is_err());
        let fd = framewise_difference(array![[5.0], [1.0], [2.0]].view(), array![2.0].view()).unwrap();
        assert_eq!(fd, array![[3.0], [1.0], [0.0]]);
    }

    #[test]
    fn pooling_drops_last_bin() {
        let v = Array1::from_shape_fn(BINS, |i| i as f64);
        let p = avg_pool_half(v.view()).unwrap();
        assert_eq!(p.len(), POOLED_DIM);
        assert_eq!(p[0], 0.5);
        assert_eq!(p[1], 2.5);
        assert_eq!(p[127], 254.5);
        let c = avg_pool_half(Array1::from_elem(BINS, 3.0).view()).unwrap();
        assert!(c.iter().all(|&x| x == 3.0));
        assert!(avg_pool_half(Array1::<f64>::zeros(256).view()).is_err());
    }

    #[test]
    fn head_dims_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParameterStore::<f64>::new();
        assert!(DneHead::new(&mut s, "bad", 100, &mut rng).is_err());
        let head = DneHead::new(&mut s, "dne", BINS, &mut rng).unwrap();
        assert_eq!(head.input_dim(), 257);
        let nav = Array1::from_shape_fn(POOLED_DIM, |i| (i as f64 * 0.3).sin().abs() * 5.0);
        let fd = Array1::from_shape_fn(POOLED_DIM, |i| (i as f64 * 0.7).cos().abs() * 9.0);
        let e = extract_dne(&head, &s, nav.view(), fd.view(), 0.4).unwrap();
        assert_eq!(e.len(), BINS);
        assert!(e.iter().all(|&v| v > -1.0 && v < 1.0));
        for p in s.params_mut() {
            p.value.fill(0.0);
        }
        let e = extract_dne(&head, &s, nav.view(), fd.view(), 0.4).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn baseline_features() {
        let mag = MagnitudeSpectrogram {
            values: Array2::from_shape_fn((10, BINS), |(t, f)| (t * 3 + f) as f64),
        };
        let sn = simple_noise_feature(&mag).unwrap();
        assert_eq!(sn, mag.values.mean_axis(Axis(0)).unwrap());
        let post = vec![0.5; 10];
        let cn = confident_noise_feature(&mag, &post, 1.0).unwrap();
        assert_eq!(cn, sn);
        let constant = MagnitudeSpectrogram {
            values: Array2::from_elem((30, BINS), 2.5),
        };
        assert!(simple_noise_feature(&constant).unwrap().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn debug_record_format() {
        let mag = Array2::from_shape_fn((2, BINS), |(t, _)| if t == 0 { 1.0 } else { 3.0 });
        let profile = NoiseProfile::new(mag.view(), vec![0, 1]).unwrap();
        let mut buf = Vec::new();
        write_debug_record(&mut buf, "u1", &profile).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "utterance\tu1");
        assert_eq!(lines[1], "confident\t0 1");
        assert!(lines[2].starts_with("n_avg\t2.000000e0"));
    }
}
