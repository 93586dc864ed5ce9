//! Plain-loop reference implementation of every model, used as an
//! independent forward oracle.

#![allow(dead_code)]

use relrnn::cells::{
    CellParams, ModelKind, PARAM_B, PARAM_B_GATES, PARAM_B_OUT, PARAM_MOD_BIAS, PARAM_U, PARAM_U_A, PARAM_U_GATES,
    PARAM_V, PARAM_V_A, PARAM_W_A, PARAM_W_GATES, PARAM_W_OUT,
};
use relrnn::tensor::{Activation, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn mv(m: &Mat, x: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn modrelu(z: f64, b: f64) -> f64 {
    let m = z.abs() + b;
    if m > 0.0 && z != 0.0 {
        z.signum() * m
    } else {
        0.0
    }
}

/// Screening bookkeeping written independently of the library.
#[derive(Clone, Debug, Default)]
pub struct RefBank {
    pub nu: usize,
    pub rho: usize,
    pub buffer: Vec<(usize, f64)>,
    pub relevant: Vec<(usize, f64)>,
    /// β of every state that left the buffer without entering, or was
    /// later pushed out of, the relevant set.
    pub discarded: Vec<f64>,
}

impl RefBank {
    pub fn new(nu: usize, rho: usize) -> Self {
        Self {
            nu,
            rho,
            ..Self::default()
        }
    }

    pub fn push(&mut self, t: usize) {
        self.buffer.push((t, 0.0));
        if self.buffer.len() > self.nu {
            let (i, beta) = self.buffer.remove(0);
            if self.relevant.len() < self.rho {
                self.relevant.push((i, beta));
            } else if self.rho == 0 {
                self.discarded.push(beta);
            } else {
                let (k, &(_, min)) = self
                    .relevant
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
                    .expect("nonempty");
                if beta > min {
                    self.discarded.push(min);
                    self.relevant[k] = (i, beta);
                } else {
                    self.discarded.push(beta);
                }
            }
        }
    }

    pub fn slots(&self) -> Vec<usize> {
        self.buffer.iter().chain(&self.relevant).map(|e| e.0).collect()
    }

    pub fn accumulate(&mut self, weights: &[(usize, f64)]) {
        for (birth, beta) in self.buffer.iter_mut() {
            if let Some(&(_, w)) = weights.iter().find(|(b, _)| b == birth) {
                *beta += w;
            }
        }
    }
}

pub struct RefOutput {
    pub h: Vec<Vec<f64>>,
    pub s: Vec<Vec<f64>>,
    /// Sorted by birth-time.
    pub attention: Vec<Vec<(usize, f64)>>,
    pub logits: Vec<Vec<f64>>,
    pub alignment_evals: u64,
}

/// Runs one sequence `xs[t]` through the model.
pub fn reference_forward(p: &CellParams, xs: &[Vec<f64>], nu: usize, rho: usize) -> RefOutput {
    let n = p.hidden;
    let g = |name: &str| mat(p.get(name).unwrap());
    let vecp = |name: &str| p.get(name).unwrap().data().to_vec();
    let mut s_prev = vec![0.0; n];
    let mut cell = vec![0.0; n];
    let mut hs: Vec<Vec<f64>> = Vec::new();
    let mut out = RefOutput {
        h: Vec::new(),
        s: Vec::new(),
        attention: Vec::new(),
        logits: Vec::new(),
        alignment_evals: 0,
    };
    let mut bank = RefBank::new(nu, rho);
    for (idx, x) in xs.iter().enumerate() {
        let t = idx + 1;
        let h = if p.kind.is_lstm() {
            let z = add(&add(&mv(&g(PARAM_W_GATES), &s_prev), &mv(&g(PARAM_U_GATES), x)), &vecp(PARAM_B_GATES));
            let mut h = vec![0.0; n];
            for k in 0..n {
                let i = sigmoid(z[k]);
                let f = sigmoid(z[n + k]);
                let c = (z[2 * n + k]).tanh();
                let o = sigmoid(z[3 * n + k]);
                cell[k] = f * cell[k] + i * c;
                h[k] = o * cell[k].tanh();
            }
            h
        } else {
            let a = add(&add(&mv(&g(PARAM_V), &s_prev), &mv(&g(PARAM_U), x)), &vecp(PARAM_B));
            match p.activation {
                Activation::Tanh => a.iter().map(|v| v.tanh()).collect(),
                Activation::Identity => a,
                Activation::Modrelu => {
                    let b = vecp(PARAM_MOD_BIAS);
                    a.iter().zip(&b).map(|(&z, &bb)| modrelu(z, bb)).collect()
                }
            }
        };
        hs.push(h.clone());
        let attended: Option<Vec<(usize, f64)>> = match p.kind {
            ModelKind::Rnn | ModelKind::Lstm => None,
            ModelKind::UniformAttnLinearRnn => Some((1..=t).map(|i| (i, 1.0 / t as f64)).collect()),
            kind => {
                let births: Vec<usize> = if kind.is_screened() {
                    bank.push(t);
                    bank.slots()
                } else {
                    (1..=t).collect()
                };
                let q = mv(&g(PARAM_W_A), &s_prev);
                let ua = g(PARAM_U_A);
                let va = vecp(PARAM_V_A);
                let scores: Vec<f64> = births
                    .iter()
                    .map(|&i| {
                        let z = add(&q, &mv(&ua, &hs[i - 1]));
                        z.iter().zip(&va).map(|(a, v)| v * a.tanh()).sum()
                    })
                    .collect();
                out.alignment_evals += births.len() as u64;
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                let w: Vec<(usize, f64)> = births.iter().zip(&e).map(|(&b, &v)| (b, v / z)).collect();
                if kind.is_screened() {
                    bank.accumulate(&w);
                }
                Some(w)
            }
        };
        let s = match &attended {
            None => h.clone(),
            Some(w) => {
                let mut c = vec![0.0; n];
                for &(i, a) in w {
                    for k in 0..n {
                        c[k] += a * hs[i - 1][k];
                    }
                }
                add(&h, &c)
            }
        };
        let mut att = attended.unwrap_or_default();
        att.sort_by_key(|e| e.0);
        out.attention.push(att);
        out.logits.push(add(&mv(&g(PARAM_W_OUT), &s), &vecp(PARAM_B_OUT)));
        out.h.push(h);
        out.s.push(s.clone());
        s_prev = s;
    }
    out
}

/// Splits `[T × B × m]` inputs into the sequence of one batch row.
pub fn row_inputs(inputs: &Tensor, row: usize) -> Vec<Vec<f64>> {
    let (t, b, m) = (inputs.shape()[0], inputs.shape()[1], inputs.shape()[2]);
    (0..t)
        .map(|step| inputs.data()[(step * b + row) * m..(step * b + row + 1) * m].to_vec())
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `max|a − b| ≤ tol · (1 + max|b|)`.
pub fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    a.len() == b.len() && max_abs_diff(a, b) <= tol * (1.0 + scale)
}
