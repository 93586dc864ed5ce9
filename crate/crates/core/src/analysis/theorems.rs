//! Gradient-norm scaling of linear recurrent networks with uniform
//! attention, dense (`1/t` over every past state) and κ-sparse (planted
//! anchors).

use serde::{Deserialize, Serialize};

use crate::analysis::fit::loglog_slope;
use crate::autograd::{NodeId, Tape};
use crate::cells::{unroll, CellParams, ModelKind, UnrollConfig, PARAM_U, PARAM_V};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{init_matrix, Activation, InitScheme, Tensor};

pub const DEFAULT_LENGTHS: [usize; 5] = [50, 100, 200, 400, 800];
pub const THEOREM1_EIGENVALUES: [f64; 4] = [0.9, 0.5, 0.3, 0.1];
/// Largest eigenvalue below 1/2: the self-weight of a sparse step does not
/// shrink with `t`, so `(1 + 1/κ) λ` must stay below one.
pub const THEOREM2_EIGENVALUES: [f64; 4] = [0.45, 0.3, 0.2, 0.1];

/// `Q diag(eigs) Qᵀ` for a random orthogonal `Q`.
pub fn normal_matrix(rng: &mut Rng, eigs: &[f64]) -> Result<Tensor> {
    let n = eigs.len();
    let q = init_matrix(rng, InitScheme::Orthogonal, n, n)?.to_nalgebra()?;
    let d = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(eigs));
    Ok(Tensor::from_nalgebra(&(&q * d * q.transpose())))
}

fn linear_params(kind: ModelKind, v: &Tensor) -> Result<CellParams> {
    let n = v.dims2("linear model")?.0;
    let mut rng = Rng::new(0);
    let mut p = CellParams::init(kind, Activation::Identity, n, 1, 1, &mut rng)?;
    p.set(PARAM_V, v.clone())?;
    p.set(PARAM_U, Tensor::zeros(&[n, 1]))?;
    Ok(p)
}

fn end_to_start_norm(kind: ModelKind, v: &Tensor, steps: usize) -> Result<f64> {
    let params = linear_params(kind, v)?;
    let mut tape = Tape::new();
    let inputs = Tensor::zeros(&[steps, 1, 1]);
    let cfg = UnrollConfig {
        trainable: false,
        ..UnrollConfig::default()
    };
    let un = unroll(&mut tape, &params, &inputs, &cfg)?;
    Ok(tape.jacobian(un.s[steps - 1], un.h[0])?.frobenius())
}

/// `‖ds_T/dh_1‖_F` with `α_{i,t} = 1/t` over all past states.
pub fn uniform_attention_norm(v: &Tensor, steps: usize) -> Result<f64> {
    end_to_start_norm(ModelKind::UniformAttnLinearRnn, v, steps)
}

/// `‖ds_T/dh_1‖_F = ‖V^{T−1}‖_F` without attention.
pub fn no_attention_norm(v: &Tensor, steps: usize) -> Result<f64> {
    end_to_start_norm(ModelKind::Rnn, v, steps)
}

/// Anchor states `1 + j·⌊(T−1)/d⌋`, `j < max(d, 1)`.
pub fn anchors(steps: usize, d: usize) -> Vec<usize> {
    let d = d.max(1);
    let gap = (steps - 1) / d;
    (0..d).map(|j| 1 + j * gap).collect()
}

/// Attended set at step `t`: the latest anchor, then the most recent
/// states, up to `min(κ, t)` distinct entries.
pub fn sparse_set(t: usize, kappa: usize, anchors: &[usize]) -> Vec<usize> {
    let anchor = anchors.iter().copied().filter(|&a| a <= t).max().unwrap_or(1);
    let size = kappa.min(t);
    let mut set = vec![anchor];
    let mut p = t;
    while set.len() < size && p >= 1 {
        if p != anchor {
            set.push(p);
        }
        p -= 1;
    }
    set
}

/// `‖ds_T/dh_1‖_F` for the linear network with κ-sparse uniform attention
/// over the planted pattern of depth `d`.
pub fn sparse_attention_norm(v: &Tensor, steps: usize, kappa: usize, d: usize) -> Result<f64> {
    let n = v.dims2("sparse attention")?.0;
    let anchors = anchors(steps, d);
    let mut tape = Tape::new();
    let vid = tape.leaf(v.clone());
    let mut s_prev = tape.leaf(Tensor::zeros(&[1, n]));
    let mut hs: Vec<NodeId> = Vec::with_capacity(steps);
    for t in 1..=steps {
        let h = tape.matmul_nt(s_prev, vid)?;
        hs.push(h);
        let set = sparse_set(t, kappa, &anchors);
        let w = tape.leaf(Tensor::filled(&[1, set.len()], 1.0 / set.len() as f64));
        let items: Vec<NodeId> = set.iter().map(|&i| hs[i - 1]).collect();
        let c = tape.weighted_sum(w, &items)?;
        s_prev = tape.add(h, c)?;
    }
    Ok(tape.jacobian(s_prev, hs[0])?.frobenius())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRow {
    pub seq_len: usize,
    pub norm: f64,
    pub control_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub rows: Vec<NormRow>,
    pub slope: f64,
    pub control_slope: f64,
    /// `min_T T·‖ds_T/dh_1‖`.
    pub min_scaled: f64,
    /// Slope ≥ −1.1, `T·norm` bounded away from zero, control slope ≤ −5.
    pub lower_bound_holds: bool,
    /// Slope ≤ 0.
    pub no_growth: bool,
    pub passed: bool,
}

/// Asymptotic log-log slope of `ds_T/dh_1` along an eigenvector with
/// eigenvalue `λ ∈ (0, 1)` under dense uniform attention.
///
/// Along the eigenvector the Jacobian `g_t` obeys
/// `g_t = λ g_{t−1} + (1 + λ Σ_{i<t} g_i)/t`; the power-law ansatz
/// `g_t ∝ t^p` balances when `λ (1 + 1/(p + 1)) = 1`, so
/// `p = (2λ − 1)/(1 − λ)`. This is at least −1 for every `λ ≥ 0`, and
/// positive once `λ > 1/2`.
pub fn uniform_growth_exponent(lambda: f64) -> f64 {
    (2.0 * lambda - 1.0) / (1.0 - lambda)
}

fn check_lengths(lengths: &[usize]) -> Result<()> {
    if lengths.len() < 2 || lengths.iter().any(|&t| t < 2) {
        return Err(Error::Domain("need two or more sequence lengths, each ≥ 2".into()));
    }
    Ok(())
}

fn slopes(rows: &[NormRow]) -> Result<(f64, f64)> {
    let ts: Vec<f64> = rows.iter().map(|r| r.seq_len as f64).collect();
    let ns: Vec<f64> = rows.iter().map(|r| r.norm).collect();
    let cs: Vec<f64> = rows.iter().map(|r| r.control_norm).collect();
    Ok((loglog_slope(&ts, &ns)?, loglog_slope(&ts, &cs)?))
}

/// Dense uniform attention: the norm may decay no faster than `1/T`, while
/// the attention-free control decays geometrically.
pub fn verify_theorem1(eigs: &[f64], lengths: &[usize], seed: u64) -> Result<Theorem1Report> {
    check_lengths(lengths)?;
    if eigs.iter().any(|&e| !(e.abs() < 1.0)) {
        return Err(Error::Domain("spectral radius must be below one".into()));
    }
    let v = normal_matrix(&mut Rng::new(seed), eigs)?;
    let rows = lengths
        .iter()
        .map(|&t| {
            Ok(NormRow {
                seq_len: t,
                norm: uniform_attention_norm(&v, t)?,
                control_norm: no_attention_norm(&v, t)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (slope, control_slope) = slopes(&rows)?;
    let min_scaled = rows
        .iter()
        .map(|r| r.norm * r.seq_len as f64)
        .fold(f64::INFINITY, f64::min);
    let lower_bound_holds = slope >= -1.1 && min_scaled > 0.0 && control_slope <= -5.0;
    let no_growth = slope <= 0.0;
    Ok(Theorem1Report {
        rows,
        slope,
        control_slope,
        min_scaled,
        lower_bound_holds,
        no_growth,
        passed: lower_bound_holds && no_growth,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Report {
    pub kappa: usize,
    pub depth: usize,
    pub rows: Vec<NormRow>,
    pub slope: f64,
    pub control_slope: f64,
    /// `min_T κ^d ‖ds_T/dh_1‖`.
    pub fitted_c: f64,
    /// `λ_max^{d−1} / κ^d`, the weight of the anchor-to-anchor path.
    pub path_bound: f64,
    pub passed: bool,
}

/// Sparse uniform attention over planted anchors: the norm stays flat in
/// `T` and above `c/κ^d`. `d = 0` is read as the single-anchor pattern.
pub fn verify_theorem2(kappa: usize, d: usize, eigs: &[f64], lengths: &[usize], seed: u64) -> Result<Theorem2Report> {
    check_lengths(lengths)?;
    if kappa < 1 {
        return Err(Error::Domain("κ must be at least 1".into()));
    }
    let hops = d.max(1);
    if lengths.iter().any(|&t| (t - 1) / hops < 1) {
        return Err(Error::Domain(format!("sequences too short for {hops} distinct anchors")));
    }
    let lambda = eigs.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    if !(lambda * (1.0 + 1.0 / kappa as f64) < 1.0) {
        return Err(Error::Domain("(1 + 1/κ)·λ_max must stay below one".into()));
    }
    let v = normal_matrix(&mut Rng::new(seed), eigs)?;
    let rows = lengths
        .iter()
        .map(|&t| {
            Ok(NormRow {
                seq_len: t,
                norm: sparse_attention_norm(&v, t, kappa, d)?,
                control_norm: no_attention_norm(&v, t)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (slope, control_slope) = slopes(&rows)?;
    let kd = (kappa as f64).powi(hops as i32);
    let fitted_c = rows.iter().map(|r| r.norm * kd).fold(f64::INFINITY, f64::min);
    let path_bound = lambda.powi(hops as i32 - 1) / kd;
    let min_norm = rows.iter().map(|r| r.norm).fold(f64::INFINITY, f64::min);
    let passed = slope.abs() <= 0.1 && fitted_c > 0.0 && min_norm >= path_bound * (1.0 - 1e-12);
    Ok(Theorem2Report {
        kappa,
        depth: d,
        rows,
        slope,
        control_slope,
        fitted_c,
        path_bound,
        passed,
    })
}
