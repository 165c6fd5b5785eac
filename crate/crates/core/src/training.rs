//! Full-batch Adam/AdamW training, checkpointing and grokking detection.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::linalg::Matrix;
use crate::models::checkpoint::{save_checkpoint, Checkpoint, OptimizerState};
use crate::models::modmlp::{argmax_accuracy, modmlp_forward_batch, modmlp_grad};
use crate::models::{tms_grad, tms_loss, ImportanceSpec, ModMlpParams, ModelParams, TmsParams};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Weight decay (if any) is added to the gradient.
    Adam,
    /// Decoupled weight decay.
    Adamw,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitRule {
    /// `N(0, 1/fan_in)` per weight matrix, zero biases.
    #[default]
    FanInGaussian,
}

/// Stop once the loss improved by less than `min_improvement` over the last
/// `window` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub window: usize,
    pub min_improvement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    pub checkpoint_epochs: Vec<usize>,
    pub init_scale_rule: InitRule,
    pub early_stop: Option<EarlyStop>,
}

impl TrainConfig {
    /// Adam, lr 1e-3, no weight decay, 10k epochs with early stopping.
    pub fn tms_default() -> Self {
        Self {
            epochs: 10_000,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 0,
            checkpoint_epochs: Vec::new(),
            init_scale_rule: InitRule::FanInGaussian,
            early_stop: Some(EarlyStop {
                window: 500,
                min_improvement: 1e-9,
            }),
        }
    }

    /// AdamW, lr 1e-2, weight decay 1.0, 500 epochs.
    pub fn modadd_default() -> Self {
        Self {
            epochs: 500,
            lr: 1e-2,
            optimizer: OptimizerKind::Adamw,
            weight_decay: 1.0,
            early_stop: None,
            ..Self::tms_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || !(self.eps > 0.0) {
            return Err(Error::InvalidArgument(
                "betas must lie in [0, 1) and eps be positive".into(),
            ));
        }
        if let Some(&e) = self.checkpoint_epochs.iter().find(|&&e| e > self.epochs) {
            return Err(Error::InvalidArgument(format!(
                "checkpoint epoch {e} exceeds {} epochs",
                self.epochs
            )));
        }
        if self.checkpoint_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "checkpoint epochs must be strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

/// Shapes needed to initialise a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ArchSpec {
    Tms { m: usize, n: usize },
    Modmlp { p: usize, n_hid: usize },
}

/// i.i.d. Gaussian weights with standard deviation `1/√fan_in`; TMS bias 0.
pub fn init_params<T: Real>(arch: ArchSpec, seed: u64) -> ModelParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussian = |rows: usize, cols: usize, fan_in: usize| {
        let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
        Matrix::from_fn(rows, cols, |_, _| T::lit(dist.sample(&mut rng)))
    };
    match arch {
        ArchSpec::Tms { m, n } => ModelParams::Tms(TmsParams {
            w: gaussian(m, n, n),
            b: vec![T::zero(); n],
        }),
        ArchSpec::Modmlp { p, n_hid } => {
            let w1 = gaussian(n_hid, 2 * p, 2 * p);
            let w2 = gaussian(p, n_hid, n_hid);
            ModelParams::ModMlp(ModMlpParams { w1, w2 })
        }
    }
}

/// Adam / AdamW state over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    kind: OptimizerKind,
    lr: T,
    wd: T,
    b1: T,
    b2: T,
    eps: T,
    step: u64,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: &TrainConfig, n: usize) -> Self {
        Self {
            kind: cfg.optimizer,
            lr: T::lit(cfg.lr),
            wd: T::lit(cfg.weight_decay),
            b1: T::lit(cfg.betas.0),
            b2: T::lit(cfg.betas.1),
            eps: T::lit(cfg.eps),
            step: 0,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }

    pub fn from_state(cfg: &TrainConfig, state: &OptimizerState) -> Self {
        let mut adam = Self::new(cfg, state.m.len());
        adam.step = state.step;
        adam.m = state.m.iter().map(|&x| T::lit(x)).collect();
        adam.v = state.v.iter().map(|&x| T::lit(x)).collect();
        adam
    }

    pub fn state(&self) -> OptimizerState {
        OptimizerState {
            step: self.step,
            m: self.m.iter().map(|x| x.to_f64_lossy()).collect(),
            v: self.v.iter().map(|x| x.to_f64_lossy()).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let one = T::one();
        let bc1 = one - self.b1.powi(t);
        let bc2 = one - self.b2.powi(t);
        let decay = match self.kind {
            OptimizerKind::Adamw => one - self.lr * self.wd,
            OptimizerKind::Adam => one,
        };
        for i in 0..params.len() {
            let mut g = grad[i];
            if self.kind == OptimizerKind::Adam {
                g += self.wd * params[i];
            }
            self.m[i] = self.b1 * self.m[i] + (one - self.b1) * g;
            self.v[i] = self.b2 * self.v[i] + (one - self.b2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] = params[i] * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
}

/// One record per epoch (epoch 0 is the initialisation).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub checkpoint_paths: Vec<PathBuf>,
}

impl TrainHistory {
    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "train_loss", "test_loss", "train_acc", "test_acc"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                opt(r.test_loss),
                opt(r.train_acc),
                opt(r.test_acc),
            ])?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv()?)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut records = Vec::new();
        let parse = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                return Ok(None);
            }
            s.parse().map(Some).map_err(|e| Error::Corrupt {
                path: path.display().to_string(),
                reason: format!("bad number {s:?}: {e}"),
            })
        };
        for rec in r.records() {
            let rec = rec?;
            let epoch = rec[0].parse().map_err(|e| Error::Corrupt {
                path: path.display().to_string(),
                reason: format!("bad epoch: {e}"),
            })?;
            records.push(EpochRecord {
                epoch,
                train_loss: parse(&rec[1])?.unwrap_or(f64::NAN),
                test_loss: parse(&rec[2])?,
                train_acc: parse(&rec[3])?,
                test_acc: parse(&rec[4])?,
            });
        }
        Ok(Self {
            records,
            checkpoint_paths: Vec::new(),
        })
    }
}

/// Receives checkpoints during training.
pub trait CheckpointSink<T> {
    /// Returns the path written, if any.
    fn save(&mut self, ckpt: &Checkpoint<T>) -> Result<Option<PathBuf>>;
}

/// Discards checkpoints.
pub struct NoSink;

impl<T> CheckpointSink<T> for NoSink {
    fn save(&mut self, _: &Checkpoint<T>) -> Result<Option<PathBuf>> {
        Ok(None)
    }
}

/// Keeps checkpoints in memory.
#[derive(Default)]
pub struct MemorySink<T> {
    pub checkpoints: Vec<Checkpoint<T>>,
}

impl<T: Clone> CheckpointSink<T> for MemorySink<T> {
    fn save(&mut self, ckpt: &Checkpoint<T>) -> Result<Option<PathBuf>> {
        self.checkpoints.push(ckpt.clone());
        Ok(None)
    }
}

/// Writes `epoch_{NNNNNN}.ckpt` files into a directory.
pub struct DirSink {
    pub dir: PathBuf,
}

impl DirSink {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn path_for(dir: &Path, epoch: usize) -> PathBuf {
        dir.join(format!("epoch_{epoch:06}.ckpt"))
    }
}

impl<T: Real> CheckpointSink<T> for DirSink {
    fn save(&mut self, ckpt: &Checkpoint<T>) -> Result<Option<PathBuf>> {
        let path = Self::path_for(&self.dir, ckpt.epoch);
        save_checkpoint(&path, ckpt)?;
        Ok(Some(path))
    }
}

/// Where a run starts: fresh parameters or a checkpoint with optimizer state.
pub enum Start<T> {
    Fresh(ModelParams<T>),
    Resume(Checkpoint<T>),
}

struct Eval {
    train_loss: f64,
    test_loss: Option<f64>,
    train_acc: Option<f64>,
    test_acc: Option<f64>,
}

fn run<T: Real>(
    start: Start<T>,
    cfg: &TrainConfig,
    sink: &mut dyn CheckpointSink<T>,
    mut loss_and_grad: impl FnMut(&ModelParams<T>) -> Result<(Eval, Vec<T>)>,
) -> Result<(ModelParams<T>, TrainHistory)> {
    cfg.validate()?;
    let (mut params, first_epoch, mut adam) = match start {
        Start::Fresh(p) => {
            let n = p.n_params();
            (p, 0, Adam::new(cfg, n))
        }
        Start::Resume(ck) => {
            let adam = match &ck.optimizer {
                Some(s) => Adam::from_state(cfg, s),
                None if ck.epoch == 0 => Adam::new(cfg, ck.params.n_params()),
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "checkpoint at epoch {} has no optimizer state to resume from",
                        ck.epoch
                    )))
                }
            };
            (ck.params, ck.epoch, adam)
        }
    };
    let arch = params.arch();
    let shapes = params.shapes();
    let mut flat = params.flatten();
    let mut history = TrainHistory::default();
    let resumed = first_epoch > 0;
    let mut pending: Vec<usize> = cfg
        .checkpoint_epochs
        .iter()
        .copied()
        .filter(|&e| e > first_epoch || (e == first_epoch && !resumed))
        .collect();
    pending.reverse();

    let mut epoch = first_epoch;
    loop {
        let (eval, grad) = loss_and_grad(&params)?;
        if !eval.train_loss.is_finite() || !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                loss: eval.train_loss,
            });
        }
        history.records.push(EpochRecord {
            epoch,
            train_loss: eval.train_loss,
            test_loss: eval.test_loss,
            train_acc: eval.train_acc,
            test_acc: eval.test_acc,
        });

        let stop_early = cfg.early_stop.is_some_and(|es| {
            let len = history.records.len();
            len > es.window && {
                let before = history.records[len - 1 - es.window].train_loss;
                before - eval.train_loss < es.min_improvement
            }
        });
        let done = epoch >= cfg.epochs || stop_early;
        let due = pending.last() == Some(&epoch);
        if due {
            pending.pop();
        }
        // An early stop saves the final state in place of the remaining epochs.
        let flush = done && !pending.is_empty();
        if flush {
            pending.clear();
        }
        if due || flush {
            let ck = Checkpoint {
                params: params.clone(),
                epoch,
                seed: cfg.seed,
                optimizer: Some(adam.state()),
            };
            if let Some(path) = sink.save(&ck)? {
                history.checkpoint_paths.push(path);
            }
        }
        if done {
            if stop_early {
                log::info!("early stop at epoch {epoch} (loss {:.3e})", eval.train_loss);
            }
            break;
        }
        adam.step(&mut flat, &grad);
        params = ModelParams::unflatten(arch, &shapes, &flat)?;
        epoch += 1;
    }
    Ok((params, history))
}

/// Full-batch training of the autoencoder on the importance-weighted loss.
pub fn train_tms<T: Real>(
    ds: &Dataset<T>,
    imp: &ImportanceSpec,
    start: Start<T>,
    cfg: &TrainConfig,
    sink: &mut dyn CheckpointSink<T>,
) -> Result<(TmsParams<T>, TrainHistory)> {
    ds.expect_tms()?;
    let (params, history) = run(start, cfg, sink, |p| {
        let p = p.as_tms()?;
        let loss = tms_loss(p, ds, imp)?;
        let grad = tms_grad(p, ds, imp)?;
        let eval = Eval {
            train_loss: loss.to_f64_lossy(),
            test_loss: None,
            train_acc: None,
            test_acc: None,
        };
        Ok((eval, grad.flatten()))
    })?;
    match params {
        ModelParams::Tms(p) => Ok((p, history)),
        ModelParams::ModMlp(_) => Err(Error::InvalidArgument("expected TMS parameters".into())),
    }
}

/// Full-batch training of the quadratic MLP on the training split, recording
/// train/test loss and argmax accuracy every epoch.
pub fn train_modadd<T: Real>(
    ds: &Dataset<T>,
    start: Start<T>,
    cfg: &TrainConfig,
    sink: &mut dyn CheckpointSink<T>,
) -> Result<(ModMlpParams<T>, TrainHistory)> {
    ds.expect_modadd()?;
    let (train, test) = match (ds.train(), ds.test()) {
        (Some(tr), Some(te)) if !te.is_empty() && !tr.is_empty() => (tr, te),
        _ => return Err(Error::InvalidFraction(1.0)),
    };
    let (params, history) = run(start, cfg, sink, |p| {
        let p = p.as_modmlp()?;
        let (_, f_train) = modmlp_forward_batch(p, &train.inputs)?;
        let (_, f_test) = modmlp_forward_batch(p, &test.inputs)?;
        let mse = |f: &Matrix<T>, y: &Matrix<T>| {
            let s: T = f
                .as_slice()
                .iter()
                .zip(y.as_slice())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            s.to_f64_lossy() / f.rows() as f64
        };
        let eval = Eval {
            train_loss: mse(&f_train, &train.labels),
            test_loss: Some(mse(&f_test, &test.labels)),
            train_acc: Some(argmax_accuracy(&f_train, &train.labels)),
            test_acc: Some(argmax_accuracy(&f_test, &test.labels)),
        };
        let grad = modmlp_grad(p, &train.inputs, &train.labels)?;
        Ok((eval, grad.flatten()))
    })?;
    match params {
        ModelParams::ModMlp(p) => Ok((p, history)),
        ModelParams::Tms(_) => Err(Error::InvalidArgument(
            "expected modular MLP parameters".into(),
        )),
    }
}

/// First epoch with test accuracy ≥ 0.99 after train accuracy has been
/// ≥ 0.99 for the five preceding epochs.
pub fn detect_grokking(history: &TrainHistory) -> Option<usize> {
    const LEVEL: f64 = 0.99;
    const SUSTAIN: usize = 5;
    let recs = &history.records;
    (SUSTAIN..recs.len()).find_map(|t| {
        let test_ok = recs[t].test_acc.is_some_and(|a| a >= LEVEL);
        let train_ok = recs[t - SUSTAIN..t]
            .iter()
            .all(|r| r.train_acc.is_some_and(|a| a >= LEVEL));
        (test_ok && train_ok).then_some(recs[t].epoch)
    })
}
