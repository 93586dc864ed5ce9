//! Decomposition of `ds_{t+k}/dh_t` into gradient paths.
//!
//! For a fully attentive RNN with `s = h + c`, the Jacobian of a later
//! macro-state with respect to an earlier hidden state obeys
//!
//! ```text
//! C_0     = E_0
//! C_{k+1} = E_{k+1} + Σ_{j=0}^{k} F_{k+1,j} C_j
//! ```
//!
//! where `E_{k'}` is the direct (skip) dependence of `s_{t+k'}` on `h_t`
//! and `F_{k+1,j}` the dependence of `s_{t+k+1}` on `s_{t+j}`:
//!
//! ```text
//! E_{k'}    = 1[k'=0]·I + α_{t,t+k'} (I + X_{t,t+k'})
//! F_{k+1,j} = α_{t+j+1,t+k+1} (I + X_{t+j+1,t+k+1}) J_{t+j}
//!             + 1[k=j] (J_{t+j} + Σ_i α_{i,t+k+1} Y_{i,t+k+1})
//! X_{j,τ}   = (h_j − c_τ) ∂e_{j,τ}/∂h_j
//! Y_{i,τ}   = h_i (∂e_{i,τ}/∂s_{τ−1} − Σ_l α_{l,τ} ∂e_{l,τ}/∂s_{τ−1})
//! J_τ       = diag(φ'(a_{τ+1})) V
//! ```
//!
//! Unrolling the recursion writes the Jacobian as a sum over index sets
//! `0 ≤ i_1 < … < i_s < k` of products `F_{k,i_s} ⋯ F_{i_2,i_1} E_{i_1}`,
//! one term per backpropagation path.

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::analysis::gradcheck::relative_error;
use crate::autograd::{NodeId, Tape};
use crate::cells::{unroll_with, AttentionMode, CellParams, ModelKind, UnrollConfig, PARAM_B, PARAM_U, PARAM_U_A, PARAM_V, PARAM_V_A, PARAM_W_A};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Activation, Tensor};

/// One gradient path and its contribution.
#[derive(Clone, Debug, PartialEq)]
pub struct PathTerm {
    /// Intermediate indices `i_1 < … < i_s`, all in `[0, k)`.
    pub indices: Vec<usize>,
    /// Product of the attention weights carried by the factors.
    pub weight_product: f64,
    pub value: DMatrix<f64>,
}

fn mat(t: &Tensor) -> Result<DMatrix<f64>> {
    t.to_nalgebra()
}

fn vecn(t: &Tensor) -> DVector<f64> {
    DVector::from_column_slice(t.data())
}

/// Forward trajectory of a single sequence plus everything needed for the
/// closed forms.
pub struct PathAnalysis {
    pub n: usize,
    pub steps: usize,
    /// Attention is forced to `1/τ` and the closed forms reduce to scalar
    /// multiples of `I` and `J`.
    pub uniform: bool,
    v: DMatrix<f64>,
    w_a: Option<DMatrix<f64>>,
    u_a: Option<DMatrix<f64>>,
    v_a: Option<DVector<f64>>,
    /// `h[τ]`, `s[τ]`, `pre[τ]` for `τ = 1..=steps`; index 0 holds zeros.
    h: Vec<DVector<f64>>,
    s: Vec<DVector<f64>>,
    pre: Vec<DVector<f64>>,
    activation: Activation,
    mod_bias: Option<DVector<f64>>,
    /// `alpha[τ][i − 1] = α_{i,τ}`.
    alpha: Vec<Vec<f64>>,
    tape: Tape,
    h_ids: Vec<NodeId>,
    s_ids: Vec<NodeId>,
}

impl PathAnalysis {
    /// Runs the model on `inputs` (`[T × 1 × m]`) with full learned attention
    /// (`uniform = false`) or forced uniform attention.
    pub fn new(params: &CellParams, inputs: &Tensor, uniform: bool) -> Result<Self> {
        if params.kind.is_lstm() {
            return Err(Error::Usage("path decomposition needs a plain recurrent cell".into()));
        }
        if !uniform && !params.kind.has_alignment() {
            return Err(Error::Usage("learned attention needs alignment parameters".into()));
        }
        if inputs.shape().len() != 3 || inputs.shape()[1] != 1 {
            return Err(Error::dim("paths", inputs.shape(), &[0, 1, params.input]));
        }
        let steps = inputs.shape()[0];
        let mode = if uniform { AttentionMode::Uniform } else { AttentionMode::Full };
        let mut tape = Tape::new();
        let ucfg = UnrollConfig {
            trainable: false,
            archive_attention: true,
            ..UnrollConfig::default()
        };
        let un = unroll_with(&mut tape, params, mode, inputs, &ucfg)?;
        let n = params.hidden;
        let v = mat(params.get(PARAM_V)?)?;
        let u = mat(params.get(PARAM_U)?)?;
        let b = vecn(params.get(PARAM_B)?);
        let mut h = vec![DVector::zeros(n)];
        let mut s = vec![DVector::zeros(n)];
        let mut pre = vec![DVector::zeros(n)];
        let mut alpha = vec![Vec::new()];
        let m = params.input;
        for tau in 1..=steps {
            let x = DVector::from_column_slice(&inputs.data()[(tau - 1) * m..tau * m]);
            pre.push(&v * &s[tau - 1] + &u * x + &b);
            h.push(vecn(tape.value(un.h[tau - 1])));
            s.push(vecn(tape.value(un.s[tau - 1])));
            let row = &un.attention[tau - 1][0];
            let mut a = vec![0.0; tau];
            for &(birth, w) in row {
                a[birth - 1] = w;
            }
            alpha.push(a);
        }
        let get = |name: &str| params.get(name).ok().map(mat).transpose();
        Ok(Self {
            n,
            steps,
            uniform,
            v,
            w_a: get(PARAM_W_A)?,
            u_a: get(PARAM_U_A)?,
            v_a: params.get(PARAM_V_A).ok().map(vecn),
            h,
            s,
            pre,
            activation: params.activation,
            mod_bias: params.get(crate::cells::PARAM_MOD_BIAS).ok().map(vecn),
            alpha,
            tape,
            h_ids: un.h,
            s_ids: un.s,
        })
    }

    pub fn alpha(&self, i: usize, tau: usize) -> f64 {
        self.alpha[tau][i - 1]
    }

    fn phi_prime(&self, tau: usize) -> DVector<f64> {
        let a = &self.pre[tau];
        match self.activation {
            Activation::Tanh => a.map(|x| 1.0 - x.tanh().powi(2)),
            Activation::Identity => DVector::from_element(self.n, 1.0),
            Activation::Modrelu => {
                let bias = self.mod_bias.clone().unwrap_or_else(|| DVector::zeros(self.n));
                DVector::from_fn(self.n, |i, _| {
                    let z = a[i];
                    if z != 0.0 && z.abs() + bias[i] > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                })
            }
        }
    }

    /// `J_τ = ∂h_{τ+1}/∂s_τ`.
    pub fn j(&self, tau: usize) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.phi_prime(tau + 1)) * &self.v
    }

    /// `(∂e_{j,τ}/∂h_j, ∂e_{j,τ}/∂s_{τ−1})` as row vectors.
    fn de(&self, j: usize, tau: usize) -> (RowDVector<f64>, RowDVector<f64>) {
        let (w_a, u_a, v_a) = match (&self.w_a, &self.u_a, &self.v_a) {
            (Some(w), Some(u), Some(v)) => (w, u, v),
            _ => return (RowDVector::zeros(self.n), RowDVector::zeros(self.n)),
        };
        let z = w_a * &self.s[tau - 1] + u_a * &self.h[j];
        let g = DVector::from_fn(self.n, |i, _| v_a[i] * (1.0 - z[i].tanh().powi(2)));
        let gt = g.transpose();
        (&gt * u_a, &gt * w_a)
    }

    fn context(&self, tau: usize) -> DVector<f64> {
        (1..=tau).fold(DVector::zeros(self.n), |acc, i| acc + &self.h[i] * self.alpha(i, tau))
    }

    pub fn x(&self, j: usize, tau: usize) -> DMatrix<f64> {
        if self.uniform {
            return DMatrix::zeros(self.n, self.n);
        }
        (&self.h[j] - self.context(tau)) * self.de(j, tau).0
    }

    /// `Σ_i α_{i,τ} Y_{i,τ}`, the derivative of `c_τ` through the query.
    pub fn alpha_y(&self, tau: usize) -> DMatrix<f64> {
        if self.uniform {
            return DMatrix::zeros(self.n, self.n);
        }
        let c = self.context(tau);
        (1..=tau).fold(DMatrix::zeros(self.n, self.n), |acc, i| {
            acc + (&self.h[i] - &c) * self.de(i, tau).1 * self.alpha(i, tau)
        })
    }

    fn eye(&self) -> DMatrix<f64> {
        DMatrix::identity(self.n, self.n)
    }

    /// `E_{k'}` for the base time `t`.
    pub fn e(&self, t: usize, kp: usize) -> DMatrix<f64> {
        let tau = t + kp;
        let base = if kp == 0 { self.eye() } else { DMatrix::zeros(self.n, self.n) };
        if self.uniform {
            return base + self.eye() / tau as f64;
        }
        base + (self.eye() + self.x(t, tau)) * self.alpha(t, tau)
    }

    /// `F_{k+1,j}` for the base time `t`; `kp1 = k + 1`.
    pub fn f(&self, t: usize, kp1: usize, j: usize) -> DMatrix<f64> {
        let k = kp1 - 1;
        let tau = t + kp1;
        let jm = self.j(t + j);
        let same = k == j;
        if self.uniform {
            let coef = 1.0 / tau as f64 + if same { 1.0 } else { 0.0 };
            return jm * coef;
        }
        let item = t + j + 1;
        let mut out = (self.eye() + self.x(item, tau)) * &jm * self.alpha(item, tau);
        if same {
            out += &jm + self.alpha_y(tau);
        }
        out
    }

    fn e_weight(&self, t: usize, kp: usize) -> f64 {
        self.alpha(t, t + kp) + if kp == 0 { 1.0 } else { 0.0 }
    }

    fn f_weight(&self, t: usize, kp1: usize, j: usize) -> f64 {
        self.alpha(t + j + 1, t + kp1) + if kp1 - 1 == j { 1.0 } else { 0.0 }
    }

    /// `ds_{t+k}/dh_t` from the tape, one backward sweep per output unit.
    pub fn tape_jacobian(&self, t: usize, k: usize) -> Result<DMatrix<f64>> {
        let jac = self.tape.jacobian(self.s_ids[t + k - 1], self.h_ids[t - 1])?;
        mat(&jac)
    }

    /// `ds_{t+k}/dh_t` through the recursion.
    pub fn recursion(&self, t: usize, k: usize) -> Vec<DMatrix<f64>> {
        let mut c: Vec<DMatrix<f64>> = vec![self.e(t, 0)];
        for kp1 in 1..=k {
            let mut next = self.e(t, kp1);
            for (j, cj) in c.iter().enumerate() {
                next += self.f(t, kp1, j) * cj;
            }
            c.push(next);
        }
        c
    }

    /// Every path term of `ds_{t+k}/dh_t`.
    pub fn path_terms(&self, t: usize, k: usize) -> Vec<PathTerm> {
        let mut terms = Vec::with_capacity(1 << k);
        for mask in 0u32..(1u32 << k) {
            let indices: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
            let (value, weight_product) = match indices.first() {
                None => (self.e(t, k), self.e_weight(t, k)),
                Some(&first) => {
                    let mut v = self.e(t, first);
                    let mut w = self.e_weight(t, first);
                    for pair in indices.windows(2) {
                        v = self.f(t, pair[1], pair[0]) * v;
                        w *= self.f_weight(t, pair[1], pair[0]);
                    }
                    let last = *indices.last().unwrap_or(&first);
                    v = self.f(t, k, last) * v;
                    w *= self.f_weight(t, k, last);
                    (v, w)
                }
            };
            terms.push(PathTerm {
                indices,
                weight_product,
                value,
            });
        }
        terms
    }

    pub fn enumeration(&self, t: usize, k: usize) -> DMatrix<f64> {
        self.path_terms(t, k)
            .into_iter()
            .fold(DMatrix::zeros(self.n, self.n), |acc, p| acc + p.value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathReport {
    pub n: usize,
    pub steps: usize,
    pub pairs: usize,
    pub tape_vs_recursion: f64,
    pub tape_vs_enumeration: f64,
    pub recursion_vs_enumeration: f64,
    pub worst_t: usize,
    pub worst_k: usize,
}

impl PathReport {
    pub fn max_error(&self) -> f64 {
        self.tape_vs_recursion
            .max(self.tape_vs_enumeration)
            .max(self.recursion_vs_enumeration)
    }
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    relative_error(a.as_slice(), b.as_slice())
}

/// Compares the three evaluations on every pair `(t, k)` with `t + k ≤ T`.
pub fn compare_all(pa: &PathAnalysis) -> Result<PathReport> {
    let mut rep = PathReport {
        n: pa.n,
        steps: pa.steps,
        pairs: 0,
        tape_vs_recursion: 0.0,
        tape_vs_enumeration: 0.0,
        recursion_vs_enumeration: 0.0,
        worst_t: 1,
        worst_k: 0,
    };
    let mut worst = -1.0;
    for t in 1..=pa.steps {
        let rec = pa.recursion(t, pa.steps - t);
        for (k, r) in rec.iter().enumerate() {
            let tape = pa.tape_jacobian(t, k)?;
            let en = pa.enumeration(t, k);
            let (a, b, c) = (rel(&tape, r), rel(&tape, &en), rel(r, &en));
            rep.tape_vs_recursion = rep.tape_vs_recursion.max(a);
            rep.tape_vs_enumeration = rep.tape_vs_enumeration.max(b);
            rep.recursion_vs_enumeration = rep.recursion_vs_enumeration.max(c);
            let m = a.max(b).max(c);
            if m > worst {
                worst = m;
                rep.worst_t = t;
                rep.worst_k = k;
            }
            rep.pairs += 1;
        }
    }
    Ok(rep)
}

/// Random single-sequence instance with `n` hidden units and `steps` steps.
pub fn random_instance(rng: &mut Rng, n: usize, steps: usize, activation: Activation) -> Result<(CellParams, Tensor)> {
    let m = 3;
    let mut params = CellParams::init(ModelKind::MemRnn, activation, n, m, 2, rng)?;
    // Sharpen the alignment so attention weights are far from uniform.
    for name in [PARAM_W_A, PARAM_U_A, PARAM_V_A, PARAM_B] {
        for v in params.get_mut(name)?.data_mut() {
            *v = 2.0 * *v + 0.3 * rng.normal();
        }
    }
    let inputs = Tensor::from_vec(&[steps, 1, m], (0..steps * m).map(|_| rng.normal()).collect())?;
    Ok((params, inputs))
}

/// Checks tape, recursion and enumeration against each other on `trials`
/// random instances with `n ≤ max_n` and `T ≤ max_steps`, under learned or
/// forced uniform attention.
pub fn verify_path_decomposition(
    seed: u64,
    trials: usize,
    max_n: usize,
    max_steps: usize,
    tol: f64,
    uniform: bool,
) -> Result<Vec<PathReport>> {
    if max_n < 1 || !(1..=12).contains(&max_steps) {
        return Err(Error::Domain("need 1 ≤ n and 1 ≤ T ≤ 12".into()));
    }
    let mut rng = Rng::new(seed);
    let mut reports = Vec::with_capacity(trials);
    for _ in 0..trials {
        let n = 1 + rng.below(max_n);
        let steps = 2.min(max_steps) + rng.below(max_steps + 1 - 2.min(max_steps));
        let (params, inputs) = random_instance(&mut rng, n, steps, Activation::Tanh)?;
        let pa = PathAnalysis::new(&params, &inputs, uniform)?;
        let rep = compare_all(&pa)?;
        if !(rep.max_error() <= tol) {
            let terms = pa.path_terms(rep.worst_t, rep.worst_k);
            let big = terms
                .iter()
                .max_by(|a, b| a.value.norm().total_cmp(&b.value.norm()))
                .map(|p| format!("{:?} (weight {:.3e})", p.indices, p.weight_product))
                .unwrap_or_default();
            return Err(Error::Verification(format!(
                "path decomposition disagrees by {:.3e} at t={} k={} (n={}, T={}); largest term {}",
                rep.max_error(),
                rep.worst_t,
                rep.worst_k,
                n,
                steps,
                big
            )));
        }
        reports.push(rep);
    }
    Ok(reports)
}
