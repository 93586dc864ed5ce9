//! Optimisers, the training loop, evaluation and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::cells::{unroll, CellParams, Counters, UnrollConfig};
use crate::config::{ExperimentConfig, OptimizerKind};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tasks::{Task, TaskBatch, INPUT_CHANNELS, OUTPUT_CLASSES};
use crate::tensor::Tensor;

/// Gradients keyed by parameter name.
pub type Grads = BTreeMap<String, Tensor>;

const DATA_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

pub fn global_norm(grads: &Grads) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// `None` disables clipping. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut Grads, max_norm: Option<f64>) -> Result<f64> {
    let norm = global_norm(grads);
    if let Some(max) = max_norm {
        if !(max > 0.0) {
            return Err(Error::Config(format!("clip norm must be positive, got {max}")));
        }
        if norm > max {
            let f = max / norm;
            for g in grads.values_mut() {
                g.data_mut().iter_mut().for_each(|x| *x *= f);
            }
        }
    }
    Ok(norm)
}

/// First-order optimiser with per-parameter moment buffers.
///
/// Adam uses `β₁ = 0.9`, `β₂ = 0.999`, `ε = 1e-8` with bias correction.
/// RMSprop keeps a `0.99` running mean of squared gradients and divides by
/// `sqrt(v) + 1e-8`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Optimizer {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;
    pub const RMS_DECAY: f64 = 0.99;

    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn apply(&mut self, params: &mut CellParams, grads: &Grads) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let lr = self.lr;
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::dim("optimizer", p.shape(), g.shape()));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= lr * d;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self
                        .first
                        .entry(name.to_string())
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    let v = self
                        .second
                        .entry(name.to_string())
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    let c1 = 1.0 - Self::BETA1.powi(t);
                    let c2 = 1.0 - Self::BETA2.powi(t);
                    let it = p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut().zip(v.data_mut()));
                    for ((x, &d), (mi, vi)) in it {
                        *mi = Self::BETA1 * *mi + (1.0 - Self::BETA1) * d;
                        *vi = Self::BETA2 * *vi + (1.0 - Self::BETA2) * d * d;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *x -= lr * mhat / (vhat.sqrt() + Self::EPS);
                    }
                }
                OptimizerKind::Rmsprop => {
                    let v = self
                        .second
                        .entry(name.to_string())
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    let it = p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut());
                    for ((x, &d), vi) in it {
                        *vi = Self::RMS_DECAY * *vi + (1.0 - Self::RMS_DECAY) * d * d;
                        *x -= lr * d / (vi.sqrt() + Self::EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Loss, gradients and counters of one forward/backward pass.
pub struct Pass {
    pub loss: f64,
    pub grads: Grads,
    pub counters: Counters,
}

pub fn unroll_config(cfg: &ExperimentConfig, trainable: bool) -> UnrollConfig {
    UnrollConfig {
        nu: cfg.nu,
        rho: cfg.rho,
        trainable,
        ..UnrollConfig::default()
    }
}

/// Mean cross-entropy over all positions and its parameter gradients.
pub fn loss_and_grads(params: &CellParams, batch: &TaskBatch, ucfg: &UnrollConfig) -> Result<Pass> {
    let mut tape = Tape::new();
    let un = unroll(&mut tape, params, &batch.inputs, ucfg)?;
    let loss = tape.cross_entropy(un.logits, &batch.targets, &batch.loss_weights())?;
    tape.backward(loss)?;
    let mut grads = Grads::new();
    for (name, id) in un.bound.iter() {
        grads.insert(name.to_string(), tape.grad(id)?);
    }
    Ok(Pass {
        loss: tape.value(loss).item(),
        grads,
        counters: un.counters,
    })
}

/// Fraction of correctly decoded recall positions, plus counters.
pub fn batch_accuracy(params: &CellParams, batch: &TaskBatch, ucfg: &UnrollConfig) -> Result<(f64, Counters)> {
    let mut tape = Tape::new();
    let ucfg = UnrollConfig {
        trainable: false,
        ..ucfg.clone()
    };
    let un = unroll(&mut tape, params, &batch.inputs, &ucfg)?;
    let logits = tape.value(un.logits);
    let mut correct = 0usize;
    for &step in &batch.recall_positions {
        for row in 0..batch.batch {
            let r = logits.row(step * batch.batch + row);
            let pred = r
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            correct += usize::from(pred == batch.target(step, row));
        }
    }
    let total = batch.recall_positions.len() * batch.batch;
    Ok((correct as f64 / total as f64, un.counters))
}

/// Mean recall accuracy over `n_batches` freshly generated batches.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    params: &CellParams,
    task: Task,
    t: usize,
    n_batches: usize,
    batch: usize,
    ucfg: &UnrollConfig,
    rng: &mut Rng,
) -> Result<f64> {
    if params.input != INPUT_CHANNELS || params.output != OUTPUT_CLASSES {
        return Err(Error::Usage(format!(
            "model has {} inputs and {} outputs, task needs {INPUT_CHANNELS} and {OUTPUT_CLASSES}",
            params.input, params.output
        )));
    }
    let mut total = 0.0;
    for _ in 0..n_batches {
        let b = task.generate(rng, t, batch)?;
        total += batch_accuracy(params, &b, ucfg)?.0;
    }
    Ok(total / n_batches as f64)
}

/// One row of the transfer table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub seq_len: usize,
    pub accuracy: f64,
    /// Set when the evaluation length is shorter than the training length.
    pub shorter_than_train: bool,
}

/// Evaluates a checkpoint at each length in `lens` without updating it.
pub fn transfer_eval(ckpt: &Checkpoint, lens: &[usize], n_batches: usize, seed: u64) -> Result<Vec<TransferRow>> {
    let cfg = &ckpt.config;
    let ucfg = unroll_config(cfg, false);
    lens.iter()
        .map(|&t| {
            let mut rng = Rng::derive(seed, EVAL_STREAM ^ (t as u64) << 8);
            let accuracy = evaluate(&ckpt.params, cfg.task, t, n_batches, cfg.batch, &ucfg, &mut rng)?;
            Ok(TransferRow {
                seq_len: t,
                accuracy,
                shorter_than_train: t < cfg.seq_len,
            })
        })
        .collect()
}

/// Per-update metrics row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub update: usize,
    pub train_loss: f64,
    pub grad_norm: f64,
    pub eval_accuracy: Option<f64>,
    pub alignment_evals: u64,
    pub peak_attended: usize,
    pub peak_tape_nodes: usize,
}

impl RunRecord {
    pub const HEADER: [&'static str; 7] = [
        "update",
        "train_loss",
        "grad_norm",
        "eval_accuracy",
        "alignment_evals",
        "peak_attended",
        "peak_tape_nodes",
    ];

    pub fn fields(&self) -> [String; 7] {
        [
            self.update.to_string(),
            format!("{:e}", self.train_loss),
            format!("{:e}", self.grad_norm),
            self.eval_accuracy.map(|a| format!("{a}")).unwrap_or_default(),
            self.alignment_evals.to_string(),
            self.peak_attended.to_string(),
            self.peak_tape_nodes.to_string(),
        ]
    }
}

/// Saved model with the configuration that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub update: usize,
    pub eval_accuracy: Option<f64>,
    pub params: CellParams,
}

impl Checkpoint {
    pub const FORMAT: &'static str = "relrnn-checkpoint";

    pub fn new(config: &ExperimentConfig, params: CellParams, update: usize, eval_accuracy: Option<f64>) -> Self {
        Self {
            format: Self::FORMAT.into(),
            version: 1,
            config: config.clone(),
            seed: config.seed,
            update,
            eval_accuracy,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.format != Self::FORMAT {
            return Err(Error::Usage(format!("{} is not a checkpoint file", path.display())));
        }
        Ok(ck)
    }
}

/// Training state of one run.
pub struct Trainer {
    pub config: ExperimentConfig,
    pub params: CellParams,
    pub optimizer: Optimizer,
    data_rng: Rng,
    eval_rng: Rng,
    ucfg: UnrollConfig,
    pub update: usize,
    pub last_grad_norm: f64,
}

impl Trainer {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut init_rng = Rng::new(config.seed);
        let params = CellParams::init(
            config.model,
            config.nonlinearity,
            config.hidden,
            INPUT_CHANNELS,
            OUTPUT_CLASSES,
            &mut init_rng,
        )?;
        Ok(Self {
            config: config.clone(),
            params,
            optimizer: Optimizer::new(config.optimizer, config.lr),
            data_rng: Rng::derive(config.seed, DATA_STREAM),
            eval_rng: Rng::derive(config.seed, EVAL_STREAM),
            ucfg: unroll_config(config, true),
            update: 0,
            last_grad_norm: 0.0,
        })
    }

    pub fn next_batch(&mut self) -> Result<TaskBatch> {
        self.config
            .task
            .generate(&mut self.data_rng, self.config.seq_len, self.config.batch)
    }

    /// One optimiser update on `batch`; aborts on a non-finite loss.
    pub fn step(&mut self, batch: &TaskBatch) -> Result<RunRecord> {
        let mut pass = loss_and_grads(&self.params, batch, &self.ucfg)?;
        self.update += 1;
        if !pass.loss.is_finite() {
            return Err(Error::Numerical {
                update: self.update,
                loss: pass.loss,
                last_grad_norm: self.last_grad_norm,
            });
        }
        let clip = (self.config.clip_norm > 0.0).then_some(self.config.clip_norm);
        let norm = clip_gradients(&mut pass.grads, clip)?;
        self.last_grad_norm = norm;
        if !norm.is_finite() {
            return Err(Error::Numerical {
                update: self.update,
                loss: pass.loss,
                last_grad_norm: norm,
            });
        }
        self.optimizer.apply(&mut self.params, &pass.grads)?;
        Ok(RunRecord {
            update: self.update,
            train_loss: pass.loss,
            grad_norm: norm,
            eval_accuracy: None,
            alignment_evals: pass.counters.alignment_evals,
            peak_attended: pass.counters.peak_attended,
            peak_tape_nodes: pass.counters.peak_tape_nodes,
        })
    }

    pub fn evaluate(&mut self) -> Result<f64> {
        let c = &self.config;
        evaluate(
            &self.params,
            c.task,
            c.seq_len,
            c.eval_batches,
            c.batch,
            &self.ucfg,
            &mut self.eval_rng,
        )
    }
}

/// Outcome of [`train_run`].
pub struct TrainOutcome {
    /// Checkpoint with the best evaluation accuracy seen.
    pub best: Checkpoint,
    /// Parameters after the last update.
    pub last: Checkpoint,
    pub records: Vec<RunRecord>,
}

/// Trains from scratch, calling `on_record` after every update.
pub fn train_run(config: &ExperimentConfig, mut on_record: impl FnMut(&RunRecord)) -> Result<TrainOutcome> {
    let mut tr = Trainer::new(config)?;
    let mut best = Checkpoint::new(config, tr.params.clone(), 0, None);
    let mut records = Vec::new();
    while tr.update < config.max_updates {
        let batch = tr.next_batch()?;
        let mut rec = tr.step(&batch)?;
        let due = config.eval_every > 0 && tr.update % config.eval_every == 0;
        if due || tr.update == config.max_updates {
            let acc = tr.evaluate()?;
            rec.eval_accuracy = Some(acc);
            log::info!("update {} loss {:.4} eval accuracy {:.4}", tr.update, rec.train_loss, acc);
            if best.eval_accuracy.is_none_or(|b| acc > b) {
                best = Checkpoint::new(config, tr.params.clone(), tr.update, Some(acc));
            }
        }
        on_record(&rec);
        let stop = config.early_stop_accuracy > 0.0
            && rec.eval_accuracy.is_some_and(|a| a >= config.early_stop_accuracy);
        records.push(rec);
        if stop {
            break;
        }
    }
    let last_acc = records.last().and_then(|r| r.eval_accuracy);
    let last = Checkpoint::new(config, tr.params, tr.update, last_acc);
    Ok(TrainOutcome { best, last, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads(vals: &[f64]) -> Grads {
        let mut g = Grads::new();
        g.insert("w".into(), Tensor::from_vec(&[vals.len()], vals.to_vec()).unwrap());
        g
    }

    #[test]
    fn clipping_examples() {
        let mut g = grads(&[3.0, 4.0]);
        assert_eq!(clip_gradients(&mut g, Some(10.0)).unwrap(), 5.0);
        assert_eq!(g["w"].data(), &[3.0, 4.0]);
        let mut g = grads(&[6.0, 8.0]);
        clip_gradients(&mut g, Some(5.0)).unwrap();
        assert!((global_norm(&g) - 5.0).abs() < 1e-12);
        assert_eq!(g["w"].data(), &[3.0, 4.0]);
        let mut g = grads(&[6.0, 8.0]);
        clip_gradients(&mut g, None).unwrap();
        assert_eq!(g["w"].data(), &[6.0, 8.0]);
    }

    #[test]
    fn zero_updates_returns_initial_model() {
        let mut cfg = ExperimentConfig::for_task(Task::Copy);
        cfg.max_updates = 0;
        cfg.hidden = 4;
        let out = train_run(&cfg, |_| {}).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.best.params, Trainer::new(&cfg).unwrap().params);
    }
}
