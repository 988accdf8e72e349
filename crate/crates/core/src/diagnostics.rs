//! Finite-difference gradient suite over every layer type, each backbone
//! with and without an auxiliary input, and tiny joint models.

use ndarray::{Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dne::{DneHead, DNE_INPUT_DIM, POOLED_DIM};
use crate::enhance::{Backbone, BackboneConfig, BackboneInput, BackboneKind};
use crate::dsp::{Waveform, HOP, MEL_BANDS, SAMPLE_RATE};
use crate::error::Result;
use crate::model::{DneMode, Model, ModelConfig, Utterance};
use crate::nn::loss::{bce_loss, mse_loss};
use crate::nn::{
    grad_check, grad_check_sampled, Activation, BatchNorm, BiLstm, Conv2d, ConvTranspose2d, Ctx, Dense, Dropout,
    GradReport, Lstm, Mode, ParamId, ParameterStore,
};
use crate::seed::derive_seed;
use crate::vad::{FrameLabels, Vad, VadConfig};

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;
/// Elements probed per tensor in the joint-model checks.
pub const JOINT_SAMPLES: usize = 4;
const JOINT_LAMBDA: f64 = 1.0;
const JOINT_FRAMES: usize = 16;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradReport,
}

impl SuiteEntry {
    pub fn passes(&self) -> bool {
        self.report.passes(GRADIENT_TOLERANCE)
    }
}

fn grid(rows: usize, cols: usize, phase: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |(i, j)| ((i * cols + j) as f64 * 0.37 + phase).sin())
}

fn grid4(dims: (usize, usize, usize, usize), phase: f64) -> Array4<f64> {
    let (_, c, h, w) = dims;
    Array4::from_shape_fn(dims, |(n, k, i, j)| {
        ((((n * c + k) * h + i) * w + j) as f64 * 0.29 + phase).sin()
    })
}

fn input_param(s: &mut ParameterStore<f64>, name: &str, x: Array2<f64>) -> ParamId {
    s.add(name, x.into_dyn(), true)
}

/// Runs every check. Fails only on evaluation errors; tolerance is left to
/// the caller via [`SuiteEntry::passes`].
pub fn gradient_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    let mut push = |name: String, report: GradReport| {
        log::debug!("{name}: {report:?}");
        out.push(SuiteEntry { name, report });
    };
    let rng = |tag: u64| ChaCha8Rng::seed_from_u64(derive_seed(seed, &[tag]));

    for (i, act) in [
        Activation::None,
        Activation::Relu,
        Activation::LeakyRelu,
        Activation::Sigmoid,
        Activation::Tanh,
    ]
    .into_iter()
    .enumerate()
    {
        push(format!("dense/{act:?}").to_lowercase(), dense_case(act, rng(10 + i as u64))?);
    }
    push("lstm".into(), lstm_case(rng(20))?);
    push("bilstm".into(), bilstm_case(rng(21))?);
    push("conv2d".into(), conv_case(rng(22))?);
    push("conv_transpose2d".into(), conv_transpose_case(rng(23))?);
    push("batchnorm/2d".into(), batchnorm2_case()?);
    push("batchnorm/4d".into(), batchnorm4_case()?);
    push("dropout".into(), dropout_case(rng(24), seed)?);
    push("loss/mse".into(), mse_case()?);
    push("loss/bce".into(), bce_case()?);
    push("dne_head".into(), dne_head_case(rng(25))?);
    push("vad".into(), vad_case(rng(26))?);
    for (i, kind) in BackboneKind::ALL.into_iter().enumerate() {
        for aux in [0, 3] {
            let aux = if kind == BackboneKind::Unet && aux > 0 { 8 } else { aux };
            let name = format!("backbone/{kind}/aux{aux}");
            push(name, backbone_case(kind, aux, rng(30 + 2 * i as u64 + (aux > 0) as u64))?);
        }
    }
    let batch = [joint_utterance(seed, 0)?, joint_utterance(seed, 1)?];
    let refs: Vec<&Utterance> = batch.iter().collect();
    for kind in BackboneKind::ALL {
        for mode in [DneMode::Off, DneMode::Dne] {
            let (se, vad) = joint_case(kind, mode, &refs, seed)?;
            push(format!("joint/{kind}/{mode}/se"), se);
            push(format!("joint/{kind}/{mode}/vad"), vad);
        }
    }
    Ok(out)
}

fn dense_case(act: Activation, mut rng: ChaCha8Rng) -> Result<GradReport> {
    let mut s = ParameterStore::<f64>::new();
    let d = Dense::new(&mut s, "d", 5, 4, act, &mut rng);
    let x = input_param(&mut s, "x", grid(3, 5, 0.4));
    let coef = grid(3, 4, 1.1);
    grad_check(&mut s, STEP, |s, backward| {
        let xv = s.value2(x).to_owned();
        let (y, c) = d.forward(s, xv.view())?;
        if backward {
            let dx = d.backward(s, &c, &coef);
            *s.grad_mut(x) += &dx.into_dyn();
        }
        Ok((&y * &coef).sum())
    })
}

fn lstm_case(mut rng: ChaCha8Rng) -> Result<GradReport> {
    let mut s = ParameterStore::<f64>::new();
    let l = Lstm::new(&mut s, "l", 3, 4, 2, &mut rng);
    let x = input_param(&mut s, "x", grid(5, 3, 0.2));
    let coef = grid(5, 4, 0.9);
    grad_check(&mut s, STEP, |s, backward| {
        let xv = s.value2(x).to_owned();
        let (y, c) = l.forward(s, xv.view())?;
        if backward {
            let dx = l.backward(s, &c, &coef);
            *s.grad_mut(x) += &dx.into_dyn();
        }
        Ok((&y * &coef).sum())
    })
}

fn bilstm_case(mut rng: ChaCha8Rng) -> Result<GradReport> {
    let mut s = ParameterStore::<f64>::new();
    let l = BiLstm::new(&mut s, "b", 3, 2, 2, &mut rng);
    let x = input_param(&mut s, "x", grid(4, 3, 0.7));
    let (cf, cb) = (grid(4, 2, 0.1), grid(4, 2, 2.3));
    grad_check(&mut s, STEP, |s, backward| {
        let xv = s.value2(x).to_owned();
        let ((f, b), c) = l.forward(s, xv.view())?;
        if backward {
            let dx = l.backward(s, &c, Some(&cf), Some(&cb)).expect("input gradient");
            *s.grad_mut(x) += &dx.into_dyn();
        }
        Ok((&f * &cf).sum() + (&b * &cb).sum())
    })
}

fn conv_case(mut rng: ChaCha8Rng) -> Result<GradReport> {
    let mut s = ParameterStore::<f64>::new();
    let conv = Conv2d::new(&mut s, "c", 2, 3, (3, 3), (2, 2), (1, 1), &mut rng);
    let x = s.add("x", grid4((2, 2, 5, 7), 0.3).into_dyn(), true);
    let coef = grid4((2, 3, 3, 4), 1.7);
    grad_check(&mut s, STEP, |s, backward| {
        let xv = s.value4(x).to_owned();
        let (y, c) = conv.forward(s, xv.view())?;
        if backward {
            let dx = conv.backward(s, &c, &coef)?;
            *s.grad_mut(x) += &dx.into_dyn();
        }
        Ok((&y * &coef).sum())
    })
}

fn conv_transpose_case(mut rng: ChaCha8Rng) -> Result<GradReport> {
    let mut s = ParameterStore::<f64>::new();
    let conv = ConvTranspose2d::new(&mut s, "t", 3, 2, (4, 4), (2, 2), (1, 1), &mut rng);
    let x = s.add("x", grid4((2, 3, 3, 2), 0.5).into_dyn(), true);
    let (oh, ow) = conv.out_hw(3, 2)?;
    let coef = grid4((2, 2, oh, ow), 0.8);
    grad_check(&mut s, STEP, |s, backward| {
        let xv = s.value4(x).to_owned();
        let (y, c) = conv.forward(s, xv.view())?;
        if backward {
            let dx = conv.backward(s, &c, &coef)?;
            *s.grad_mut(x) += &dx.into_dyn();
        }
        Ok((&y * &coef).sum())
    })
}

fn batchnorm2_case() -> Result<GradReport> {
    let mut s = ParameterStore::<f64>::new();
    let bn = BatchNorm::new(&mut s, "bn", 3);
    let x = input_param(&mut s, "x", grid(5, 3, 0.6));
    let coef = grid(5, 3, 1.3);
    grad_check(&mut s, STEP, |s, backward| {
        let xv = s.value2(x).to_owned();
        let mut ctx = Ctx::new(Mode::Training, 0);
        let (y, c) = bn.forward2(s, &mut ctx, xv.view())?;
        if backward {
            let dx = bn.backward2(s, &c, &coef);
            *s.grad_mut(x) += &dx.into_dyn();
        }
        Ok((&y * &coef).sum())
    })
}

fn batchnorm4_case() -> Result<GradReport> {
    let mut s = ParameterStore::<f64>::new();
    let bn = BatchNorm::new(&mut s, "bn", 2);
    let x = s.add("x", grid4((2, 2, 3, 2), 0.1).into_dyn(), true);
    let coef = grid4((2, 2, 3, 2), 2.1);
    grad_check(&mut s, STEP, |s, backward| {
        let xv = s.value4(x).to_owned();
        let mut ctx = Ctx::new(Mode::Training, 0);
        let (y, c) = bn.forward4(s, &mut ctx, xv.view())?;
        if backward {
            let dx = bn.backward4(s, &c, &coef);
            *s.grad_mut(x) += &dx.into_dyn();
        }
        Ok((&y * &coef).sum())
    })
}

/// Dense layer followed by dropout with a fixed mask stream.
fn dropout_case(mut rng: ChaCha8Rng, seed: u64) -> Result<GradReport> {
    let mut s = ParameterStore::<f64>::new();
    let d = Dense::new(&mut s, "d", 4, 6, Activation::Tanh, &mut rng);
    let drop = Dropout::new(0.3);
    let x = grid(3, 4, 0.9);
    let coef = grid(3, 6, 0.2);
    grad_check(&mut s, STEP, |s, backward| {
        let mut ctx = Ctx::new(Mode::Training, seed);
        let (h, c) = d.forward(s, x.view())?;
        let (y, mask) = drop.forward(&mut ctx, h);
        if backward {
            let g = drop.backward(mask.as_ref(), coef.clone());
            d.backward(s, &c, &g);
        }
        Ok((&y * &coef).sum())
    })
}

fn mse_case() -> Result<GradReport> {
    let mut s = ParameterStore::<f64>::new();
    let p = input_param(&mut s, "pred", grid(3, 4, 0.0));
    let target = grid(3, 4, 1.0);
    grad_check(&mut s, STEP, |s, backward| {
        let pv = s.value2(p).to_owned();
        let (l, g) = mse_loss(&pv, &target);
        if backward {
            *s.grad_mut(p) += &g.into_dyn();
        }
        Ok(l)
    })
}

fn bce_case() -> Result<GradReport> {
    let mut s = ParameterStore::<f64>::new();
    let init = Array1::from(vec![0.15, 0.4, 0.55, 0.8, 0.93]);
    let p = s.add("p", init.into_dyn(), true);
    let labels = Array1::from(vec![0.0, 1.0, 0.0, 1.0, 1.0]);
    grad_check(&mut s, 1e-7, |s, backward| {
        let pv = s.value1(p).to_owned();
        let (l, g) = bce_loss(pv.view(), labels.view());
        if backward {
            *s.grad_mut(p) += &g.into_dyn();
        }
        Ok(l)
    })
}

fn dne_head_case(mut rng: ChaCha8Rng) -> Result<GradReport> {
    let mut s = ParameterStore::<f64>::new();
    let head = DneHead::new(&mut s, "dne", POOLED_DIM, &mut rng)?;
    let x = input_param(&mut s, "x", grid(2, DNE_INPUT_DIM, 0.3));
    let coef = grid(2, POOLED_DIM, 1.9);
    grad_check(&mut s, STEP, |s, backward| {
        let xv = s.value2(x).to_owned();
        let (e, c) = head.forward(s, xv.view())?;
        if backward {
            let dx = head.backward(s, &c, &coef);
            *s.grad_mut(x) += &dx.into_dyn();
        }
        Ok((&e * &coef).sum())
    })
}

fn vad_case(mut rng: ChaCha8Rng) -> Result<GradReport> {
    let mut s = ParameterStore::<f64>::new();
    let cfg = VadConfig {
        hidden: 3,
        layers: 2,
        head: 4,
    };
    let vad = Vad::new(&mut s, "vad", cfg, &mut rng);
    let x = grid(6, MEL_BANDS, 0.5) * 0.5;
    let labels = Array1::from(vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
    grad_check(&mut s, STEP, |s, backward| {
        let (p, c) = vad.forward(s, x.view())?;
        let (l, g) = bce_loss(p.view(), labels.view());
        if backward {
            vad.backward(s, &c, g.view());
        }
        Ok(l)
    })
}

fn backbone_case(kind: BackboneKind, aux_dim: usize, mut rng: ChaCha8Rng) -> Result<GradReport> {
    let cfg = BackboneConfig {
        kind,
        bins: 8,
        aux_dim,
        unet_channels: [2, 2, 3, 3],
        unet_chunk: 16,
        ddae_hidden: vec![5, 4, 5],
        ddae_context: 5,
        dropout: 0.2,
        blstm_hidden: 3,
        blstm_layers: 2,
        blstm_head: 4,
    };
    let frames: &[usize] = if kind == BackboneKind::Unet { &[20, 9] } else { &[4, 3] };
    let mut s = ParameterStore::<f64>::new();
    let m = Backbone::new(&mut s, "se", &cfg, &mut rng)?;
    let xs: Vec<_> = frames.iter().enumerate().map(|(i, &t)| grid(t, 8, i as f64)).collect();
    let aux_ids: Vec<_> = frames
        .iter()
        .enumerate()
        .filter(|_| aux_dim > 0)
        .map(|(i, &t)| input_param(&mut s, &format!("aux{i}"), grid(t, aux_dim, 3.0 + i as f64) * 0.5))
        .collect();
    let coefs: Vec<_> = frames.iter().map(|&t| grid(t, 8, 2.0)).collect();
    grad_check(&mut s, STEP, |s, backward| {
        let auxs: Vec<Array2<f64>> = aux_ids.iter().map(|&id| s.value2(id).to_owned()).collect();
        let inputs: Vec<BackboneInput<f64>> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| (x.view(), auxs.get(i).map(|a| a.view())))
            .collect();
        let mut ctx = Ctx::new(Mode::Training, 11);
        let (ys, cache) = m.forward(s, &mut ctx, &inputs)?;
        let loss: f64 = ys.iter().zip(&coefs).map(|(y, c)| (y * c).sum()).sum();
        if backward {
            let daux = m.backward(s, &cache, &coefs)?;
            for (id, d) in aux_ids.iter().zip(daux) {
                if let Some(d) = d {
                    *s.grad_mut(*id) += &d.into_dyn();
                }
            }
        }
        Ok(loss)
    })
}

/// Toy-length mixture (16 frames): a gated harmonic tone in white noise,
/// labelled by the gate.
pub fn joint_utterance(seed: u64, index: u64) -> Result<Utterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x6a74, index]));
    let len = (JOINT_FRAMES - 1) * HOP;
    let f0 = rng.gen_range(120.0..220.0);
    let on = |t: usize| (t / HOP + index as usize) % 6 >= 2;
    let clean: Vec<f64> = (0..len)
        .map(|t| {
            let ph = 2.0 * std::f64::consts::PI * f0 * t as f64 / SAMPLE_RATE as f64;
            let v = 0.3 * ph.sin() + 0.15 * (2.0 * ph).sin() + 0.08 * (3.0 * ph).sin();
            if on(t) {
                v
            } else {
                0.0
            }
        })
        .collect();
    let noisy: Vec<f64> = clean.iter().map(|c| c + rng.gen_range(-0.1..0.1)).collect();
    let y = (0..JOINT_FRAMES).map(|f| on((f * HOP).min(len - 1)) as u8).collect();
    Utterance::prepare(
        format!("joint{index}"),
        &Waveform::new(noisy),
        Some(&Waveform::new(clean)),
        Some(FrameLabels { y }),
    )
}

/// Checks θ_SE ∪ θ_DNE against l_MSE and θ_VAD against l_CE + λ·l_MSE with
/// the confident-frame sets frozen at their current values.
pub fn joint_case(kind: BackboneKind, mode: DneMode, batch: &[&Utterance], seed: u64) -> Result<(GradReport, GradReport)> {
    let mut model = Model::<f64>::new(ModelConfig::tiny(kind, mode), seed)?;
    let step_seed = derive_seed(seed, &[0x7374]);
    let frozen = model.compute_gradients(batch, JOINT_LAMBDA, step_seed, None)?.selections;
    let mut se = std::mem::take(&mut model.se_store);
    let se_report = grad_check_sampled(&mut se, STEP, JOINT_SAMPLES, |s, backward| {
        std::mem::swap(&mut model.se_store, s);
        let r = joint_eval(&mut model, batch, step_seed, &frozen, backward).map(|(mse, _)| mse);
        std::mem::swap(&mut model.se_store, s);
        r
    })?;
    model.se_store = se;
    let mut vad = std::mem::take(&mut model.vad_store);
    let vad_report = grad_check_sampled(&mut vad, STEP, JOINT_SAMPLES, |s, backward| {
        std::mem::swap(&mut model.vad_store, s);
        let r = joint_eval(&mut model, batch, step_seed, &frozen, backward).map(|(mse, ce)| ce + JOINT_LAMBDA * mse);
        std::mem::swap(&mut model.vad_store, s);
        r
    })?;
    Ok((se_report, vad_report))
}

fn joint_eval(
    model: &mut Model<f64>,
    batch: &[&Utterance],
    seed: u64,
    frozen: &[Vec<usize>],
    backward: bool,
) -> Result<(f64, f64)> {
    if backward {
        let r = model.compute_gradients(batch, JOINT_LAMBDA, seed, Some(frozen))?;
        Ok((r.l_mse, r.l_ce))
    } else {
        model.training_losses(batch, seed, Some(frozen))
    }
}
