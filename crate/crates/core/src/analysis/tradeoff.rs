//! Gradient stability over a grid of screening sizes.

use serde::{Deserialize, Serialize};

use crate::analysis::gradtrace::{grad_trace_checkpoint, log_spread, GradTraceRow};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::train::train_run;

pub struct TradeoffCell {
    pub nu: usize,
    pub rho: usize,
    pub trace: Vec<GradTraceRow>,
    pub summary: TradeoffSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffSummary {
    pub nu: usize,
    pub rho: usize,
    pub eval_accuracy: Option<f64>,
    pub mean_log10_norm: f64,
    pub log10_spread: f64,
}

/// Trains `base` once per `(ν, ρ)` cell and traces gradients of the best
/// checkpoint on a batch of length `trace_len`.
pub fn tradeoff_sweep(base: &ExperimentConfig, nus: &[usize], rhos: &[usize], trace_len: usize) -> Result<Vec<TradeoffCell>> {
    if nus.is_empty() || rhos.is_empty() {
        return Err(Error::Usage("trade-off grid is empty".into()));
    }
    let mut cells = Vec::with_capacity(nus.len() * rhos.len());
    for &nu in nus {
        for &rho in rhos {
            let cfg = ExperimentConfig {
                nu,
                rho,
                ..base.clone()
            };
            cfg.validate()?;
            let outcome = train_run(&cfg, |_| {})?;
            let trace = grad_trace_checkpoint(&outcome.best, cfg.task, trace_len, cfg.seed)?;
            let finite: Vec<f64> = trace.iter().map(|r| r.log10_norm).filter(|v| v.is_finite()).collect();
            let mean = finite.iter().sum::<f64>() / finite.len().max(1) as f64;
            let summary = TradeoffSummary {
                nu,
                rho,
                eval_accuracy: outcome.best.eval_accuracy,
                mean_log10_norm: mean,
                log10_spread: log_spread(&trace)?,
            };
            cells.push(TradeoffCell { nu, rho, trace, summary });
        }
    }
    Ok(cells)
}
