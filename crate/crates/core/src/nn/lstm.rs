//! Unidirectional and bidirectional LSTM stacks.
//!
//! Gate layout along the 4H axis is `[input, forget, cell, output]`. Initial
//! hidden and cell states are zero.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::activation::sigmoid;
use super::{ParamId, ParameterStore, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LstmLayer {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

pub struct LstmLayerCache<T> {
    x: Array2<T>,
    /// activated gates, T × 4H
    gates: Array2<T>,
    /// cell states, T × H
    c: Array2<T>,
    tanh_c: Array2<T>,
    /// hidden states, T × H
    h: Array2<T>,
}

impl LstmLayer {
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(in_dim > 0 && hidden > 0, "lstm dims must be positive");
        let w_ih = store.add_uniform(format!("{name}.w_ih"), &[4 * hidden, in_dim], hidden, rng);
        let w_hh = store.add_uniform(format!("{name}.w_hh"), &[4 * hidden, hidden], hidden, rng);
        let b = store.add_uniform(format!("{name}.b"), &[4 * hidden], hidden, rng);
        store
            .value_mut(b)
            .slice_mut(s![hidden..2 * hidden])
            .fill(T::one());
        LstmLayer {
            w_ih,
            w_hh,
            b,
            in_dim,
            hidden,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        x: ArrayView2<T>,
    ) -> Result<(Array2<T>, LstmLayerCache<T>)> {
        if x.ncols() != self.in_dim {
            return Err(Error::Shape(format!(
                "lstm expects {} inputs, got {}",
                self.in_dim,
                x.ncols()
            )));
        }
        let steps = x.nrows();
        let hd = self.hidden;
        let w_hh = store.value2(self.w_hh);
        let mut gates = x.dot(&store.value2(self.w_ih).t()) + &store.value1(self.b);
        let mut c = Array2::zeros((steps, hd));
        let mut tanh_c = Array2::zeros((steps, hd));
        let mut h = Array2::zeros((steps, hd));
        let mut h_prev = Array1::<T>::zeros(hd);
        let mut c_prev = Array1::<T>::zeros(hd);
        for t in 0..steps {
            let rec = w_hh.dot(&h_prev);
            let mut z = gates.row_mut(t);
            z += &rec;
            for j in 0..hd {
                let i = sigmoid(z[j]);
                let f = sigmoid(z[hd + j]);
                let g = z[2 * hd + j].tanh();
                let o = sigmoid(z[3 * hd + j]);
                z[j] = i;
                z[hd + j] = f;
                z[2 * hd + j] = g;
                z[3 * hd + j] = o;
                let ct = f * c_prev[j] + i * g;
                let tc = ct.tanh();
                c[[t, j]] = ct;
                tanh_c[[t, j]] = tc;
                h[[t, j]] = o * tc;
            }
            h_prev.assign(&h.row(t));
            c_prev.assign(&c.row(t));
        }
        Ok((
            h.clone(),
            LstmLayerCache {
                x: x.to_owned(),
                gates,
                c,
                tanh_c,
                h,
            },
        ))
    }

    /// Backpropagation through time; `grad_h` is dL/dh_t for every step.
    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParameterStore<T>,
        cache: &LstmLayerCache<T>,
        grad_h: &Array2<T>,
    ) -> Array2<T> {
        let steps = cache.x.nrows();
        let hd = self.hidden;
        let mut dz = Array2::<T>::zeros((steps, 4 * hd));
        let mut dh_next = Array1::<T>::zeros(hd);
        let mut dc_next = Array1::<T>::zeros(hd);
        {
            let w_hh = store.value2(self.w_hh);
            for t in (0..steps).rev() {
                let g = cache.gates.row(t);
                let mut dzt = dz.row_mut(t);
                for j in 0..hd {
                    let (i, f, gg, o) = (g[j], g[hd + j], g[2 * hd + j], g[3 * hd + j]);
                    let tc = cache.tanh_c[[t, j]];
                    let c_prev = if t > 0 { cache.c[[t - 1, j]] } else { T::zero() };
                    let dh = grad_h[[t, j]] + dh_next[j];
                    let d_o = dh * tc;
                    let dc = dh * o * (T::one() - tc * tc) + dc_next[j];
                    let di = dc * gg;
                    let dg = dc * i;
                    let df = dc * c_prev;
                    dc_next[j] = dc * f;
                    dzt[j] = di * i * (T::one() - i);
                    dzt[hd + j] = df * f * (T::one() - f);
                    dzt[2 * hd + j] = dg * (T::one() - gg * gg);
                    dzt[3 * hd + j] = d_o * o * (T::one() - o);
                }
                dh_next = dz.row(t).dot(&w_hh);
            }
        }
        let mut h_prev = Array2::<T>::zeros((steps, hd));
        if steps > 1 {
            h_prev.slice_mut(s![1.., ..]).assign(&cache.h.slice(s![..steps - 1, ..]));
        }
        *store.grad_mut(self.w_hh) += &dz.t().dot(&h_prev).into_dyn();
        *store.grad_mut(self.w_ih) += &dz.t().dot(&cache.x).into_dyn();
        *store.grad_mut(self.b) += &dz.sum_axis(Axis(0)).into_dyn();
        dz.dot(&store.value2(self.w_ih))
    }
}

/// Stack of unidirectional layers; returns top-layer states for every step.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub layers: Vec<LstmLayer>,
}

pub struct LstmCache<T> {
    layers: Vec<LstmLayerCache<T>>,
}

impl Lstm {
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(layers > 0, "lstm needs at least one layer");
        let layers = (0..layers)
            .map(|l| {
                let d = if l == 0 { in_dim } else { hidden };
                LstmLayer::new(store, &format!("{name}.l{l}"), d, hidden, rng)
            })
            .collect();
        Lstm { layers }
    }

    pub fn hidden(&self) -> usize {
        self.layers.last().map(|l| l.hidden).unwrap_or(0)
    }

    pub fn forward<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        x: ArrayView2<T>,
    ) -> Result<(Array2<T>, LstmCache<T>)> {
        if x.nrows() == 0 {
            return Err(Error::Shape("lstm on empty sequence".into()));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_owned();
        for layer in &self.layers {
            let (out, cache) = layer.forward(store, cur.view())?;
            caches.push(cache);
            cur = out;
        }
        Ok((cur, LstmCache { layers: caches }))
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParameterStore<T>,
        cache: &LstmCache<T>,
        grad_out: &Array2<T>,
    ) -> Array2<T> {
        let mut g = grad_out.clone();
        for (layer, c) in self.layers.iter().zip(&cache.layers).rev() {
            g = layer.backward(store, c, &g);
        }
        g
    }
}

/// Bidirectional stack. Every layer runs a forward-time and a reversed-time
/// LSTM; layers above the first read the concatenation `[fwd; bwd]` of the
/// layer below. Both output streams are aligned to the original time axis.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub layers: Vec<(LstmLayer, LstmLayer)>,
}

pub struct BiLstmCache<T> {
    layers: Vec<(LstmLayerCache<T>, LstmLayerCache<T>)>,
}

fn reverse_rows<T: Scalar>(x: ArrayView2<T>) -> Array2<T> {
    x.slice(s![..;-1, ..]).to_owned()
}

impl BiLstm {
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        in_dim: usize,
        hidden_per_dir: usize,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(layers > 0, "lstm needs at least one layer");
        let layers = (0..layers)
            .map(|l| {
                let d = if l == 0 { in_dim } else { 2 * hidden_per_dir };
                (
                    LstmLayer::new(store, &format!("{name}.l{l}.fwd"), d, hidden_per_dir, rng),
                    LstmLayer::new(store, &format!("{name}.l{l}.bwd"), d, hidden_per_dir, rng),
                )
            })
            .collect();
        BiLstm { layers }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].0.hidden
    }

    pub fn forward<T: Scalar>(
        &self,
        store: &ParameterStore<T>,
        x: ArrayView2<T>,
    ) -> Result<((Array2<T>, Array2<T>), BiLstmCache<T>)> {
        if x.nrows() == 0 {
            return Err(Error::Shape("lstm on empty sequence".into()));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut input = x.to_owned();
        let mut out = None;
        for (fl, bl) in &self.layers {
            let (f, fc) = fl.forward(store, input.view())?;
            let rev = reverse_rows(input.view());
            let (b, bc) = bl.forward(store, rev.view())?;
            let b = reverse_rows(b.view());
            caches.push((fc, bc));
            input = ndarray::concatenate(Axis(1), &[f.view(), b.view()]).expect("same length");
            out = Some((f, b));
        }
        Ok((out.expect("at least one layer"), BiLstmCache { layers: caches }))
    }

    /// Either top-layer stream's gradient may be omitted when it does not
    /// reach the loss; that top-layer direction then receives no gradient.
    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParameterStore<T>,
        cache: &BiLstmCache<T>,
        grad_fwd: Option<&Array2<T>>,
        grad_bwd: Option<&Array2<T>>,
    ) -> Option<Array2<T>> {
        let (mut gf, mut gb) = (grad_fwd.cloned(), grad_bwd.cloned());
        let mut dx: Option<Array2<T>> = None;
        for (l, ((fl, bl), (fc, bc))) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let mut d: Option<Array2<T>> = None;
            if let Some(g) = &gf {
                d = Some(fl.backward(store, fc, g));
            }
            if let Some(g) = &gb {
                let g_rev = reverse_rows(g.view());
                let db = reverse_rows(bl.backward(store, bc, &g_rev).view());
                d = Some(match d {
                    Some(a) => a + db,
                    None => db,
                });
            }
            let d = d?;
            let h = fl.hidden;
            if l > 0 {
                gf = Some(d.slice(s![.., ..h]).to_owned());
                gb = Some(d.slice(s![.., h..]).to_owned());
            }
            dx = Some(d);
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut s = ParameterStore::<f64>::new();
        let l = Lstm::new(&mut s, "l", 3, 4, 2, &mut rng(0));
        for p in s.params_mut() {
            p.value.fill(0.0);
        }
        let x = Array2::from_elem((5, 3), 0.7);
        let (h, _) = l.forward(&s, x.view()).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut s = ParameterStore::<f32>::new();
        let l = LstmLayer::new(&mut s, "l", 2, 3, &mut rng(0));
        let b = s.value1(l.b);
        assert!(b.slice(s![3..6]).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn single_step_matches_cell_oracle() {
        let mut s = ParameterStore::<f64>::new();
        let layer = LstmLayer::new(&mut s, "l", 3, 2, &mut rng(4));
        let x = Array2::from_shape_vec((1, 3), vec![0.3, -0.8, 1.1]).unwrap();
        let (h, _) = layer.forward(&s, x.view()).unwrap();
        let w = s.value2(layer.w_ih);
        let b = s.value1(layer.b);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for j in 0..2 {
            let z = |gate: usize| {
                let r = gate * 2 + j;
                (0..3).map(|k| w[[r, k]] * x[[0, k]]).sum::<f64>() + b[r]
            };
            let c = sig(z(0)) * z(2).tanh();
            let expected = sig(z(3)) * c.tanh();
            assert!((h[[0, j]] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let mut r = rng(7);
        let mut s = ParameterStore::<f64>::new();
        let l = Lstm::new(&mut s, "l", 3, 4, 2, &mut r);
        let x = s.add_uniform("x", &[3, 3], 1, &mut r);
        let coef = Array2::from_shape_fn((3, 4), |(i, j)| ((i * 4 + j) as f64).cos());
        let rep = grad_check(&mut s, 1e-5, |s, backward| {
            let xv = s.value2(x).to_owned();
            let (h, c) = l.forward(s, xv.view())?;
            if backward {
                let gx = l.backward(s, &c, &coef);
                *s.grad_mut(x) += &gx.into_dyn();
            }
            Ok((&h * &coef).sum())
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    fn share_directions(s: &mut ParameterStore<f64>, bi: &BiLstm) {
        for (f, b) in &bi.layers {
            for (src, dst) in [(f.w_ih, b.w_ih), (f.w_hh, b.w_hh), (f.b, b.b)] {
                let v = s.value(src).clone();
                s.set_value(dst, v);
            }
        }
    }

    #[test]
    fn bilstm_palindrome_with_shared_weights() {
        let mut s = ParameterStore::<f64>::new();
        let bi = BiLstm::new(&mut s, "bi", 2, 3, 1, &mut rng(1));
        share_directions(&mut s, &bi);
        let x = ndarray::array![[0.1, 0.5], [0.9, -0.2], [0.3, 0.3], [0.9, -0.2], [0.1, 0.5]];
        let ((f, b), _) = bi.forward(&s, x.view()).unwrap();
        let f_rev = reverse_rows(f.view());
        for (a, c) in b.iter().zip(f_rev.iter()) {
            assert!((a - c).abs() < 1e-14);
        }
    }

    #[test]
    fn bilstm_single_step_streams_agree_when_shared() {
        let mut s = ParameterStore::<f64>::new();
        let bi = BiLstm::new(&mut s, "bi", 2, 3, 1, &mut rng(2));
        share_directions(&mut s, &bi);
        let x = ndarray::array![[0.4, -0.6]];
        let ((fo, bo), _) = bi.forward(&s, x.view()).unwrap();
        assert_eq!(fo, bo);
    }

    #[test]
    fn bilstm_matches_layerwise_composition() {
        let mut s = ParameterStore::<f64>::new();
        let bi = BiLstm::new(&mut s, "bi", 3, 4, 2, &mut rng(3));
        let x = Array2::from_shape_fn((6, 3), |(i, j)| ((i * 3 + j) as f64 * 0.7).sin());
        let ((f, b), _) = bi.forward(&s, x.view()).unwrap();
        let run = |layer: &LstmLayer, input: &Array2<f64>, reverse: bool| {
            let inp = if reverse { reverse_rows(input.view()) } else { input.clone() };
            let (h, _) = layer.forward(&s, inp.view()).unwrap();
            if reverse { reverse_rows(h.view()) } else { h }
        };
        let f0 = run(&bi.layers[0].0, &x, false);
        let b0 = run(&bi.layers[0].1, &x, true);
        let mid = ndarray::concatenate(Axis(1), &[f0.view(), b0.view()]).unwrap();
        assert_eq!(f, run(&bi.layers[1].0, &mid, false));
        assert_eq!(b, run(&bi.layers[1].1, &mid, true));
    }

    #[test]
    fn bilstm_gradients_match_finite_differences() {
        let mut r = rng(8);
        let mut s = ParameterStore::<f64>::new();
        let bi = BiLstm::new(&mut s, "bi", 2, 3, 2, &mut r);
        let x = s.add_uniform("x", &[4, 2], 1, &mut r);
        let cf = Array2::from_shape_fn((4, 3), |(i, j)| ((i + 2 * j) as f64).sin());
        let cb = Array2::from_shape_fn((4, 3), |(i, j)| ((2 * i + j) as f64).cos());
        let rep = grad_check(&mut s, 1e-5, |s, backward| {
            let xv = s.value2(x).to_owned();
            let ((f, b), c) = bi.forward(s, xv.view())?;
            if backward {
                let gx = bi.backward(s, &c, Some(&cf), Some(&cb)).unwrap();
                *s.grad_mut(x) += &gx.into_dyn();
            }
            Ok((&f * &cf).sum() + (&b * &cb).sum())
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn bilstm_backward_stream_only() {
        let mut r = rng(9);
        let mut s = ParameterStore::<f64>::new();
        let bi = BiLstm::new(&mut s, "bi", 2, 3, 2, &mut r);
        let x = s.add_uniform("x", &[5, 2], 1, &mut r);
        let cb = Array2::from_shape_fn((5, 3), |(i, j)| ((2 * i + j) as f64).cos());
        let rep = grad_check(&mut s, 1e-5, |s, backward| {
            let xv = s.value2(x).to_owned();
            let ((_, b), c) = bi.forward(s, xv.view())?;
            if backward {
                let gx = bi.backward(s, &c, None, Some(&cb)).unwrap();
                *s.grad_mut(x) += &gx.into_dyn();
            }
            Ok((&b * &cb).sum())
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }
}
