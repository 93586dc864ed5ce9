//! Synthetic long-memory tasks.
//!
//! Both tasks use ten input channels: eight data symbols (`0..8`), a blank
//! (`8`) and a recall marker (`9`). Targets range over the data symbols and
//! the blank, so a model has nine output classes.
//!
//! Layouts, with positions counted from 1:
//!
//! * Copy with delay `T`: length `T + 20`. Positions 1–10 carry data, the
//!   marker sits at `T + 10`, and positions `T + 11 … T + 20` must reproduce
//!   the data.
//! * Denoise with span `T`: length `T + 11`. Ten distinct positions in
//!   `1 … T` carry data, the marker sits at `T + 1`, and positions
//!   `T + 2 … T + 11` must reproduce the data in order of appearance.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DATA_SYMBOLS: usize = 8;
pub const BLANK: usize = 8;
pub const MARKER: usize = 9;
pub const INPUT_CHANNELS: usize = 10;
pub const OUTPUT_CLASSES: usize = 9;
pub const RECALL_LEN: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Copy,
    Denoise,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "copy" => Ok(Task::Copy),
            "denoise" => Ok(Task::Denoise),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Copy => "copy",
            Task::Denoise => "denoise",
        })
    }
}

impl Task {
    pub fn total_len(self, t: usize) -> usize {
        match self {
            Task::Copy => t + 20,
            Task::Denoise => t + 11,
        }
    }

    pub fn min_len(self) -> usize {
        match self {
            Task::Copy => 1,
            Task::Denoise => RECALL_LEN,
        }
    }

    pub fn generate(self, rng: &mut Rng, t: usize, batch: usize) -> Result<TaskBatch> {
        match self {
            Task::Copy => gen_copy(rng, t, batch),
            Task::Denoise => gen_denoise(rng, t, batch),
        }
    }
}

/// One batch of task instances, stored time-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    /// One-hot inputs `[T_total × B × 10]`.
    pub inputs: Tensor,
    /// Class index per `(step, row)`, time-major.
    pub targets: Vec<usize>,
    /// Steps that contribute to the loss.
    pub loss_mask: Vec<bool>,
    /// Zero-based steps where accuracy is scored.
    pub recall_positions: Vec<usize>,
    pub batch: usize,
}

impl TaskBatch {
    fn blank(total: usize, batch: usize) -> Self {
        let mut inputs = Tensor::zeros(&[total, batch, INPUT_CHANNELS]);
        for cell in inputs.data_mut().chunks_exact_mut(INPUT_CHANNELS) {
            cell[BLANK] = 1.0;
        }
        Self {
            inputs,
            targets: vec![BLANK; total * batch],
            loss_mask: vec![true; total],
            recall_positions: (total - RECALL_LEN..total).collect(),
            batch,
        }
    }

    pub fn steps(&self) -> usize {
        self.loss_mask.len()
    }

    fn set_input(&mut self, step: usize, row: usize, symbol: usize) {
        let off = (step * self.batch + row) * INPUT_CHANNELS;
        let cell = &mut self.inputs.data_mut()[off..off + INPUT_CHANNELS];
        cell.fill(0.0);
        cell[symbol] = 1.0;
    }

    /// Symbol whose channel is hot at `(step, row)`.
    pub fn input_symbol(&self, step: usize, row: usize) -> usize {
        let off = (step * self.batch + row) * INPUT_CHANNELS;
        let cell = &self.inputs.data()[off..off + INPUT_CHANNELS];
        cell.iter().position(|&v| v == 1.0).unwrap_or(BLANK)
    }

    pub fn target(&self, step: usize, row: usize) -> usize {
        self.targets[step * self.batch + row]
    }

    /// Per-position loss weights normalised to a mean over masked positions.
    pub fn loss_weights(&self) -> Vec<f64> {
        let active = self.loss_mask.iter().filter(|&&m| m).count() * self.batch;
        let w = if active == 0 { 0.0 } else { 1.0 / active as f64 };
        self.loss_mask
            .iter()
            .flat_map(|&m| std::iter::repeat_n(if m { w } else { 0.0 }, self.batch))
            .collect()
    }

    /// Writes one sequence as CSV: position, input symbol, target, mask.
    pub fn write_csv<W: Write>(&self, row: usize, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["position", "symbol", "target", "mask"])?;
        for step in 0..self.steps() {
            w.write_record([
                (step + 1).to_string(),
                self.input_symbol(step, row).to_string(),
                self.target(step, row).to_string(),
                u8::from(self.loss_mask[step]).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn gen_copy(rng: &mut Rng, t: usize, batch: usize) -> Result<TaskBatch> {
    if t < 1 || batch < 1 {
        return Err(Error::Domain(format!("copy needs T >= 1 and batch >= 1, got T={t}, batch={batch}")));
    }
    let total = t + 20;
    let mut tb = TaskBatch::blank(total, batch);
    for row in 0..batch {
        for k in 0..RECALL_LEN {
            let sym = rng.below(DATA_SYMBOLS);
            tb.set_input(k, row, sym);
            tb.targets[(t + 10 + k) * batch + row] = sym;
        }
        tb.set_input(t + 9, row, MARKER);
    }
    Ok(tb)
}

pub fn gen_denoise(rng: &mut Rng, t: usize, batch: usize) -> Result<TaskBatch> {
    if t < RECALL_LEN || batch < 1 {
        return Err(Error::Domain(format!("denoise needs T >= 10 and batch >= 1, got T={t}, batch={batch}")));
    }
    let total = t + 11;
    let mut tb = TaskBatch::blank(total, batch);
    for row in 0..batch {
        let positions = rng.sample_sorted(t, RECALL_LEN);
        for (k, &p) in positions.iter().enumerate() {
            let sym = rng.below(DATA_SYMBOLS);
            tb.set_input(p, row, sym);
            tb.targets[(t + 1 + k) * batch + row] = sym;
        }
        tb.set_input(t, row, MARKER);
    }
    Ok(tb)
}
