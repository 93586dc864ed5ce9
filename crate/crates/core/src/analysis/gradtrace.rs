//! `‖∇_{h_t} L‖` along one sequence batch.

use serde::{Deserialize, Serialize};

use crate::analysis::fit::line_fit;
use crate::autograd::Tape;
use crate::cells::{unroll, CellParams, UnrollConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tasks::Task;
use crate::train::{unroll_config, Checkpoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradTraceRow {
    /// One-based step.
    pub t: usize,
    pub norm: f64,
    pub log10_norm: f64,
}

/// One forward/backward pass over a fresh batch of `task` at length
/// `seq_len`; returns the Euclidean norm of the loss gradient at every `h_t`.
pub fn grad_trace(
    params: &CellParams,
    ucfg: &UnrollConfig,
    task: Task,
    seq_len: usize,
    batch: usize,
    seed: u64,
) -> Result<Vec<GradTraceRow>> {
    let mut rng = Rng::new(seed);
    let data = task.generate(&mut rng, seq_len, batch)?;
    let mut tape = Tape::new();
    let ucfg = UnrollConfig {
        trainable: false,
        ..ucfg.clone()
    };
    let un = unroll(&mut tape, params, &data.inputs, &ucfg)?;
    let loss = tape.cross_entropy(un.logits, &data.targets, &data.loss_weights())?;
    tape.backward(loss)?;
    un.h
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            let norm = tape.probe_gradient(h)?.frobenius();
            Ok(GradTraceRow {
                t: i + 1,
                norm,
                log10_norm: norm.log10(),
            })
        })
        .collect()
}

/// [`grad_trace`] with the model, screening sizes and batch of a checkpoint.
pub fn grad_trace_checkpoint(ckpt: &Checkpoint, task: Task, seq_len: usize, seed: u64) -> Result<Vec<GradTraceRow>> {
    let ucfg = unroll_config(&ckpt.config, false);
    grad_trace(&ckpt.params, &ucfg, task, seq_len, ckpt.config.batch, seed)
}

/// Slope of `log10 ‖∇_{h_t} L‖` against the distance `T − t` to the end of
/// the sequence. Positive when gradients grow as they travel backwards.
pub fn backward_trend(rows: &[GradTraceRow]) -> Result<f64> {
    let last = rows.last().map(|r| r.t).unwrap_or(0);
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.log10_norm.is_finite())
        .map(|r| ((last - r.t) as f64, r.log10_norm))
        .unzip();
    Ok(line_fit(&xs, &ys)?.slope)
}

/// `max − min` of the finite log10 norms, in decades.
pub fn log_spread(rows: &[GradTraceRow]) -> Result<f64> {
    let finite: Vec<f64> = rows.iter().map(|r| r.log10_norm).filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return Err(Error::Domain("gradient trace has no nonzero norms".into()));
    }
    let hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(hi - lo)
}
