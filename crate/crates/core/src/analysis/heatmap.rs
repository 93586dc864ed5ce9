//! Dense attention matrices `α_{i,t}`.

use std::io::Write;

use crate::autograd::Tape;
use crate::cells::{unroll, CellParams, UnrollConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tasks::Task;

/// `weights[t−1][i−1] = α_{i,t}` for one sequence; unattended entries are 0.
pub fn attention_matrix(
    params: &CellParams,
    ucfg: &UnrollConfig,
    task: Task,
    seq_len: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if !params.kind.is_attentive() {
        return Err(Error::Usage(format!("{} has no attention weights", params.kind)));
    }
    let mut rng = Rng::new(seed);
    let data = task.generate(&mut rng, seq_len, 1)?;
    let steps = data.steps();
    let mut tape = Tape::new();
    let un = unroll(
        &mut tape,
        params,
        &data.inputs,
        &UnrollConfig {
            trainable: false,
            archive_attention: true,
            ..ucfg.clone()
        },
    )?;
    Ok(un
        .attention
        .iter()
        .map(|rows| {
            let mut dense = vec![0.0; steps];
            for &(birth, w) in &rows[0] {
                dense[birth - 1] = w;
            }
            dense
        })
        .collect())
}

/// Header `t,1,2,…,T`, then one row per step.
pub fn write_heatmap<W: Write>(matrix: &[Vec<f64>], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let steps = matrix.len();
    let mut header = vec!["t".to_string()];
    header.extend((1..=steps).map(|i| i.to_string()));
    w.write_record(&header)?;
    for (t, row) in matrix.iter().enumerate() {
        let mut rec = vec![(t + 1).to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
