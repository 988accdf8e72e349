//! Epoch loop around [`joint_train_step`]: validation split, plateau
//! learning-rate decay, per-epoch log and checkpoints, resume.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::corpus::{Manifest, ManifestItem};
use crate::error::{Error, Result};
use crate::model::{joint_train_step, Model, ModelConfig, StepConfig, Utterance};
use crate::nn::Scalar;
use crate::seed::{derive_seed, fnv1a};

pub const LR_DECAY: f64 = 0.1;
pub const LR_FLOOR: f64 = 1e-8;
pub const PLATEAU_PATIENCE: usize = 3;
pub const VAL_FRACTION: f64 = 0.1;

const TAG_EPOCH: u64 = 0x6570;
const TAG_STEP: u64 = 0x7374;
const TAG_EVAL: u64 = 0x6576;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lambda: f64,
    pub lr_se: f64,
    pub lr_vad: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Initialize the detector from this checkpoint instead of at random.
    pub warm_start: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        TrainConfig {
            model,
            lambda: 1.0,
            lr_se: 1e-3,
            lr_vad: 1e-2,
            epochs: 10,
            batch_size: 4,
            seed: 0,
            warm_start: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.lr_se > 0.0 && self.lr_vad > 0.0) {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut v = self.model.to_pairs();
        v.extend([
            ("lambda".into(), self.lambda.to_string()),
            ("lr_se".into(), self.lr_se.to_string()),
            ("lr_vad".into(), self.lr_vad.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("seed".into(), self.seed.to_string()),
            (
                "warm_start".into(),
                self.warm_start
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "none".into()),
            ),
        ]);
        v
    }
}

/// Both rates after applying every plateau seen in `val_history` (one entry
/// per finished evaluation, the initial one included).
pub fn lr_schedule(val_history: &[f64], lr_se: f64, lr_vad: f64) -> (f64, f64) {
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut decays = 0;
    for &v in val_history {
        if v < best {
            best = v;
            stale = 0;
        } else {
            stale += 1;
            if stale == PLATEAU_PATIENCE {
                decays += 1;
                stale = 0;
            }
        }
    }
    let f = LR_DECAY.powi(decays);
    ((lr_se * f).max(LR_FLOOR), (lr_vad * f).max(LR_FLOOR))
}

/// Seed-stable split: the `VAL_FRACTION` of items with the smallest
/// `fnv1a(seed, noisy file name)` go to validation, so moving the corpus
/// does not change the split.
pub fn split_validation(items: &[ManifestItem], seed: u64) -> (Vec<ManifestItem>, Vec<ManifestItem>) {
    if items.len() < 2 {
        return (items.to_vec(), items.to_vec());
    }
    let mut keyed: Vec<(u64, usize)> = items
        .iter()
        .enumerate()
        .map(|(i, it)| {
            let mut bytes = seed.to_le_bytes().to_vec();
            let name = it.noisy.file_name().unwrap_or(it.noisy.as_os_str());
            bytes.extend_from_slice(name.to_string_lossy().as_bytes());
            (fnv1a(&bytes), i)
        })
        .collect();
    keyed.sort();
    let n_val = ((items.len() as f64 * VAL_FRACTION).round() as usize).clamp(1, items.len() - 1);
    let mut is_val = vec![false; items.len()];
    for &(_, i) in &keyed[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (it, v) in items.iter().zip(is_val) {
        if v {
            val.push(it.clone());
        } else {
            train.push(it.clone());
        }
    }
    (train, val)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// NaN for the initial evaluation row.
    pub train_mse: f64,
    pub train_ce: f64,
    pub val_mse: f64,
    pub val_ce: f64,
    pub lr_se: f64,
    pub lr_vad: f64,
}

pub const LOG_HEADER: &str = "epoch\ttrain_mse\ttrain_ce\tval_mse\tval_ce\tlr_se\tlr_vad";

pub fn log_text(records: &[EpochRecord]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in records {
        let _ = writeln!(
            s,
            "{}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}",
            r.epoch, r.train_mse, r.train_ce, r.val_mse, r.val_ce, r.lr_se, r.lr_vad
        );
    }
    s
}

pub fn parse_log(text: &str) -> Result<Vec<EpochRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Checkpoint(format!("training log line {}: {line:?}", n + 1));
        if f.len() != 7 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        out.push(EpochRecord {
            epoch: f[0].parse().map_err(|_| bad())?,
            train_mse: num(1)?,
            train_ce: num(2)?,
            val_mse: num(3)?,
            val_ce: num(4)?,
            lr_se: num(5)?,
            lr_vad: num(6)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: PathBuf,
    pub last: PathBuf,
    pub log_path: PathBuf,
    pub records: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn initial_val_mse(&self) -> f64 {
        self.records[0].val_mse
    }

    pub fn final_val_mse(&self) -> f64 {
        self.records.last().expect("initial row").val_mse
    }
}

pub fn load_utterances(items: &[ManifestItem]) -> Result<Vec<Utterance>> {
    items.iter().map(Utterance::load).collect()
}

/// Entry-weighted MSE and frame-weighted cross-entropy in inference mode.
pub fn validation_losses<T: Scalar>(model: &Model<T>, val: &[Utterance], seed: u64) -> Result<(f64, f64)> {
    let (mut mse, mut ce, mut entries, mut frames) = (0.0, 0.0, 0usize, 0usize);
    for (i, u) in val.iter().enumerate() {
        let (m, c) = model.evaluate_losses(&[u], derive_seed(seed, &[TAG_EVAL, i as u64]))?;
        let e = u.noisy.values.len();
        mse += m * e as f64;
        ce += c * u.frames() as f64;
        entries += e;
        frames += u.frames();
    }
    Ok((mse / entries as f64, ce / frames as f64))
}

fn checkpoint_for(model: &Model<f32>, cfg: &TrainConfig, records: &[EpochRecord]) -> Checkpoint {
    let mut ck = model.to_checkpoint();
    for (k, v) in cfg.to_pairs() {
        ck.set(format!("train.{k}"), v);
    }
    ck.set("train.log", log_text(records));
    ck
}

pub fn epoch_checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("epoch{epoch:03}.ckpt"))
}

/// Trains on the manifest, writing `epochNNN.ckpt`, `best.ckpt` and
/// `train_log.tsv` into `out_dir`. With `resume`, continues from that
/// checkpoint's state up to `cfg.epochs`.
pub fn train(manifest: &Manifest, cfg: &TrainConfig, out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    if manifest.is_empty() {
        return Err(Error::Manifest("training manifest is empty".into()));
    }
    let (train_items, val_items) = split_validation(&manifest.items, cfg.seed);
    log::info!("{} training and {} validation utterances", train_items.len(), val_items.len());
    let train_set = load_utterances(&train_items)?;
    let val_set = load_utterances(&val_items)?;
    train_prepared(&train_set, &val_set, cfg, out_dir, resume)
}

pub fn train_prepared(
    train_set: &[Utterance],
    val_set: &[Utterance],
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be nonempty".into()));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating output directory {}", out_dir.display()), e))?;
    if cfg.model.randomizes_posteriors() {
        log::info!("eta = 1: posteriors are randomized and the detector is bypassed for frame selection");
    }
    let (mut model, mut records) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let model = Model::<f32>::from_checkpoint(&ck)?;
            if model.cfg != cfg.model {
                return Err(Error::Checkpoint(format!(
                    "{} was trained with a different model configuration",
                    path.display()
                )));
            }
            (model, parse_log(ck.get("train.log")?)?)
        }
        None => {
            let mut model = Model::<f32>::new(cfg.model.clone(), cfg.seed)?;
            if let Some(w) = &cfg.warm_start {
                let ck = Checkpoint::load(w)?;
                ck.restore_store("vad", &mut model.vad_store)?;
                model.vad_store.step = 0;
                for p in model.vad_store.params_mut() {
                    p.m.fill(0.0);
                    p.v.fill(0.0);
                }
                log::info!("detector warm-started from {}", w.display());
            }
            let (val_mse, val_ce) = validation_losses(&model, val_set, cfg.seed)?;
            let records = vec![EpochRecord {
                epoch: 0,
                train_mse: f64::NAN,
                train_ce: f64::NAN,
                val_mse,
                val_ce,
                lr_se: cfg.lr_se,
                lr_vad: cfg.lr_vad,
            }];
            (model, records)
        }
    };
    let log_path = out_dir.join("train_log.tsv");
    let best_path = out_dir.join("best.ckpt");
    let mut last = resume.map(Path::to_path_buf).unwrap_or_else(|| best_path.clone());
    if resume.is_none() {
        checkpoint_for(&model, cfg, &records).save(&best_path)?;
    }
    let start = records.last().map_or(0, |r| r.epoch) + 1;
    for epoch in start..=cfg.epochs {
        let history: Vec<f64> = records.iter().map(|r| r.val_mse).collect();
        let (lr_se, lr_vad) = lr_schedule(&history, cfg.lr_se, cfg.lr_vad);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_EPOCH, epoch as u64])));
        let (mut mse_sum, mut ce_sum) = (0.0, 0.0);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (b, idx) in batches.iter().enumerate() {
            let batch: Vec<&Utterance> = idx.iter().map(|&i| &train_set[i]).collect();
            let step = StepConfig {
                lambda: cfg.lambda,
                lr_se,
                lr_vad,
                seed: derive_seed(cfg.seed, &[TAG_STEP, epoch as u64, b as u64]),
            };
            let (m, c) = joint_train_step(&mut model, &batch, &step).map_err(|e| match e {
                Error::NonFiniteLoss(msg) => Error::NonFiniteLoss(format!("epoch {epoch}, batch {b}: {msg}")),
                other => other,
            })?;
            mse_sum += m;
            ce_sum += c;
        }
        let (val_mse, val_ce) = validation_losses(&model, val_set, cfg.seed)?;
        let rec = EpochRecord {
            epoch,
            train_mse: mse_sum / batches.len() as f64,
            train_ce: ce_sum / batches.len() as f64,
            val_mse,
            val_ce,
            lr_se,
            lr_vad,
        };
        log::info!(
            "epoch {epoch}: train mse {:.5} ce {:.4} | val mse {:.5} ce {:.4} | lr {lr_se:e}/{lr_vad:e}",
            rec.train_mse,
            rec.train_ce,
            rec.val_mse,
            rec.val_ce
        );
        let improved = records.iter().all(|r| val_mse < r.val_mse);
        records.push(rec);
        let ck = checkpoint_for(&model, cfg, &records);
        last = epoch_checkpoint_path(out_dir, epoch);
        ck.save(&last)?;
        if improved {
            ck.save(&best_path)?;
        }
    }
    std::fs::write(&log_path, log_text(&records))
        .map_err(|e| Error::io(format!("writing {}", log_path.display()), e))?;
    Ok(TrainOutcome {
        best: best_path,
        last,
        log_path,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let (a, b) = lr_schedule(&[5.0, 4.0, 3.0, 2.0, 1.0], 1e-3, 1e-2);
        assert_eq!((a, b), (1e-3, 1e-2));
        let (a, b) = lr_schedule(&[1.0, 1.0, 1.0, 1.0], 1e-3, 1e-2);
        assert!((a - 1e-4).abs() < 1e-18 && (b - 1e-3).abs() < 1e-17);
        let (a, _) = lr_schedule(&[1.0, 1.1, 1.2], 1e-3, 1e-2);
        assert_eq!(a, 1e-3);
        let flat = vec![1.0; 200];
        let (a, b) = lr_schedule(&flat, 1e-3, 1e-2);
        assert_eq!((a, b), (LR_FLOOR, LR_FLOOR));
    }

    #[test]
    fn split_is_stable_and_disjoint() {
        let items: Vec<ManifestItem> = (0..50)
            .map(|i| ManifestItem {
                noisy: format!("n{i}.wav").into(),
                clean: format!("c{i}.wav").into(),
                label: format!("l{i}.lab").into(),
                noise_kind: "white".into(),
                snr_db: 0.0,
            })
            .collect();
        let (t1, v1) = split_validation(&items, 3);
        let (t2, v2) = split_validation(&items, 3);
        assert_eq!((t1.len(), v1.len()), (45, 5));
        assert_eq!(v1, v2);
        assert_eq!(t1, t2);
        assert!(v1.iter().all(|v| !t1.contains(v)));
        let (_, v3) = split_validation(&items, 4);
        assert_ne!(v1, v3);
        let moved: Vec<ManifestItem> = items
            .iter()
            .map(|it| ManifestItem { noisy: Path::new("/elsewhere/data").join(&it.noisy), ..it.clone() })
            .collect();
        let (_, v4) = split_validation(&moved, 3);
        assert_eq!(v4.iter().map(|v| v.id()).collect::<Vec<_>>(), v1.iter().map(|v| v.id()).collect::<Vec<_>>());
    }

    #[test]
    fn log_round_trip() {
        let r = vec![
            EpochRecord {
                epoch: 0,
                train_mse: f64::NAN,
                train_ce: f64::NAN,
                val_mse: 0.5,
                val_ce: 0.7,
                lr_se: 1e-3,
                lr_vad: 1e-2,
            },
            EpochRecord {
                epoch: 1,
                train_mse: 0.25,
                train_ce: 0.6,
                val_mse: 0.4,
                val_ce: 0.65,
                lr_se: 1e-3,
                lr_vad: 1e-2,
            },
        ];
        let text = log_text(&r);
        assert!(text.starts_with(LOG_HEADER));
        let back = parse_log(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back[0].train_mse.is_nan());
        assert_eq!(back[1], r[1]);
        assert_eq!(log_text(&back), text);
    }
}
