//! Exact operation counters as a function of sequence length.

use serde::{Deserialize, Serialize};

use crate::analysis::fit::{quadratic_fit, QuadFit};
use crate::autograd::Tape;
use crate::cells::{unroll, CellParams, ModelKind, UnrollConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tasks::{BLANK, INPUT_CHANNELS, OUTPUT_CLASSES};
use crate::tensor::{Activation, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub model: String,
    pub seq_len: usize,
    pub alignment_evals: u64,
    pub peak_attended: usize,
    pub peak_tape_nodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityFit {
    pub model: String,
    pub counter: String,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub r2: f64,
}

pub struct ComplexityReport {
    pub rows: Vec<ComplexityRow>,
    pub fits: Vec<ComplexityFit>,
}

/// Forward pass of one sequence of blanks; counters do not depend on the
/// input values.
pub fn measure(kind: ModelKind, seq_len: usize, hidden: usize, ucfg: &UnrollConfig, seed: u64) -> Result<ComplexityRow> {
    let mut rng = Rng::new(seed);
    let params = CellParams::init(kind, Activation::Tanh, hidden, INPUT_CHANNELS, OUTPUT_CLASSES, &mut rng)?;
    let mut inputs = Tensor::zeros(&[seq_len, 1, INPUT_CHANNELS]);
    for cell in inputs.data_mut().chunks_exact_mut(INPUT_CHANNELS) {
        cell[BLANK] = 1.0;
    }
    let mut tape = Tape::new();
    let un = unroll(
        &mut tape,
        &params,
        &inputs,
        &UnrollConfig {
            trainable: false,
            ..ucfg.clone()
        },
    )?;
    Ok(ComplexityRow {
        model: kind.name().into(),
        seq_len,
        alignment_evals: un.counters.alignment_evals,
        peak_attended: un.counters.peak_attended,
        peak_tape_nodes: un.counters.peak_tape_nodes,
    })
}

fn fit(model: &str, counter: &str, ts: &[f64], ys: &[f64]) -> Result<ComplexityFit> {
    let QuadFit { a, b, c, r2 } = quadratic_fit(ts, ys)?;
    Ok(ComplexityFit {
        model: model.into(),
        counter: counter.into(),
        a,
        b,
        c,
        r2,
    })
}

/// Counters of every model at every length, with a quadratic fit
/// `a + b·T + c·T²` of each counter per model.
pub fn complexity_sweep(
    kinds: &[ModelKind],
    lengths: &[usize],
    hidden: usize,
    ucfg: &UnrollConfig,
    seed: u64,
) -> Result<ComplexityReport> {
    if lengths.len() < 3 {
        return Err(Error::Usage("complexity sweep needs three or more lengths".into()));
    }
    let mut rows = Vec::new();
    let mut fits = Vec::new();
    for &kind in kinds {
        let per: Vec<ComplexityRow> = lengths
            .iter()
            .map(|&t| measure(kind, t, hidden, ucfg, seed))
            .collect::<Result<_>>()?;
        let ts: Vec<f64> = per.iter().map(|r| r.seq_len as f64).collect();
        let col = |f: fn(&ComplexityRow) -> f64| per.iter().map(f).collect::<Vec<f64>>();
        fits.push(fit(kind.name(), "alignment_evals", &ts, &col(|r| r.alignment_evals as f64))?);
        fits.push(fit(kind.name(), "peak_attended", &ts, &col(|r| r.peak_attended as f64))?);
        fits.push(fit(kind.name(), "peak_tape_nodes", &ts, &col(|r| r.peak_tape_nodes as f64))?);
        rows.extend(per);
    }
    Ok(ComplexityReport { rows, fits })
}
