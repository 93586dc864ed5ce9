//! Recurrent cells and the three memory regimes: no attention, full
//! attention over every past state, and relevancy-screened attention.
//!
//! All cells run on row batches: a hidden state is a `[B×n]` node and the
//! parameters keep their `[out × in]` orientation, so `V s` becomes
//! `s · Vᵀ`. The macro-state is `s_t = h_t + c_t`, where `c_t` is the
//! attention-weighted sum of the attended hidden states (`h_t` included).

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{init_matrix, Activation, InitScheme, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "rnn")]
    Rnn,
    #[serde(rename = "lstm")]
    Lstm,
    #[serde(rename = "mem-rnn")]
    MemRnn,
    #[serde(rename = "mem-lstm")]
    MemLstm,
    #[serde(rename = "rel-rnn")]
    RelRnn,
    #[serde(rename = "rel-lstm")]
    RelLstm,
    #[serde(rename = "uniform-attn-linear-rnn")]
    UniformAttnLinearRnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::Rnn,
        ModelKind::Lstm,
        ModelKind::MemRnn,
        ModelKind::MemLstm,
        ModelKind::RelRnn,
        ModelKind::RelLstm,
        ModelKind::UniformAttnLinearRnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Rnn => "rnn",
            ModelKind::Lstm => "lstm",
            ModelKind::MemRnn => "mem-rnn",
            ModelKind::MemLstm => "mem-lstm",
            ModelKind::RelRnn => "rel-rnn",
            ModelKind::RelLstm => "rel-lstm",
            ModelKind::UniformAttnLinearRnn => "uniform-attn-linear-rnn",
        }
    }

    pub fn is_lstm(self) -> bool {
        matches!(self, ModelKind::Lstm | ModelKind::MemLstm | ModelKind::RelLstm)
    }

    /// Whether the model carries learned alignment parameters.
    pub fn has_alignment(self) -> bool {
        matches!(
            self,
            ModelKind::MemRnn | ModelKind::MemLstm | ModelKind::RelRnn | ModelKind::RelLstm
        )
    }

    pub fn is_screened(self) -> bool {
        matches!(self, ModelKind::RelRnn | ModelKind::RelLstm)
    }

    pub fn is_attentive(self) -> bool {
        self.has_alignment() || self == ModelKind::UniformAttnLinearRnn
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        let alias = match key.as_str() {
            "memrnn" => "mem-rnn",
            "memlstm" => "mem-lstm",
            "relrnn" => "rel-rnn",
            "rellstm" => "rel-lstm",
            other => other,
        };
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == alias)
            .ok_or_else(|| Error::Config(format!("unknown model kind '{s}'")))
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How the attended set is chosen at every step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttentionMode {
    None,
    /// Every past state, learned additive scores.
    Full,
    /// Short buffer of `nu` states plus up to `rho` screened states.
    Screened { nu: usize, rho: usize },
    /// Every past state with fixed weight `1/t`.
    Uniform,
}

pub const PARAM_V: &str = "V";
pub const PARAM_U: &str = "U";
pub const PARAM_B: &str = "b";
pub const PARAM_MOD_BIAS: &str = "mod_bias";
pub const PARAM_W_GATES: &str = "W_gates";
pub const PARAM_U_GATES: &str = "U_gates";
pub const PARAM_B_GATES: &str = "b_gates";
pub const PARAM_W_A: &str = "W_a";
pub const PARAM_U_A: &str = "U_a";
pub const PARAM_V_A: &str = "v_a";
pub const PARAM_W_OUT: &str = "W_out";
pub const PARAM_B_OUT: &str = "b_out";

/// Named parameter tensors of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    pub kind: ModelKind,
    pub activation: Activation,
    pub hidden: usize,
    pub input: usize,
    pub output: usize,
    tensors: BTreeMap<String, Tensor>,
}

impl CellParams {
    /// Random initialisation: orthogonal recurrent matrices, Glorot-uniform
    /// projections, zero biases, forget-gate bias 1 for LSTMs.
    pub fn init(
        kind: ModelKind,
        activation: Activation,
        hidden: usize,
        input: usize,
        output: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if hidden == 0 || input == 0 || output == 0 {
            return Err(Error::Config("hidden, input and output sizes must be positive".into()));
        }
        let activation = if kind == ModelKind::UniformAttnLinearRnn {
            Activation::Identity
        } else {
            activation
        };
        let n = hidden;
        let mut t = BTreeMap::new();
        if kind.is_lstm() {
            let mut w = Vec::with_capacity(4 * n * n);
            for _ in 0..4 {
                w.extend(init_matrix(rng, InitScheme::Orthogonal, n, n)?.into_data());
            }
            t.insert(PARAM_W_GATES.into(), Tensor::from_vec(&[4 * n, n], w)?);
            t.insert(
                PARAM_U_GATES.into(),
                init_matrix(rng, InitScheme::GlorotUniform, 4 * n, input)?,
            );
            let mut b = vec![0.0; 4 * n];
            b[n..2 * n].iter_mut().for_each(|x| *x = 1.0);
            t.insert(PARAM_B_GATES.into(), Tensor::from_vec(&[4 * n], b)?);
        } else {
            let mut v = init_matrix(rng, InitScheme::Orthogonal, n, n)?;
            // ‖s‖ ≤ 2 max‖h‖, so halving keeps the unbounded modReLU recursion non-expansive.
            if activation == Activation::Modrelu && kind.has_alignment() {
                v = v.scale(0.5);
            }
            t.insert(PARAM_V.into(), v);
            t.insert(PARAM_U.into(), init_matrix(rng, InitScheme::GlorotUniform, n, input)?);
            t.insert(PARAM_B.into(), Tensor::zeros(&[n]));
            if activation == Activation::Modrelu {
                t.insert(PARAM_MOD_BIAS.into(), Tensor::zeros(&[n]));
            }
        }
        if kind.has_alignment() {
            t.insert(PARAM_W_A.into(), init_matrix(rng, InitScheme::GlorotUniform, n, n)?);
            t.insert(PARAM_U_A.into(), init_matrix(rng, InitScheme::GlorotUniform, n, n)?);
            let v = init_matrix(rng, InitScheme::GlorotUniform, 1, n)?.reshape(&[n])?;
            t.insert(PARAM_V_A.into(), v);
        }
        t.insert(PARAM_W_OUT.into(), init_matrix(rng, InitScheme::GlorotUniform, output, n)?);
        t.insert(PARAM_B_OUT.into(), Tensor::zeros(&[output]));
        Ok(Self {
            kind,
            activation,
            hidden,
            input,
            output,
            tensors: t,
        })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Usage(format!("model has no parameter '{name}'")))
    }

    /// Replaces a parameter; the new value must keep the old shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("model has no parameter '{name}'")))?;
        if slot.shape() != value.shape() {
            return Err(Error::dim("set_param", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("model has no parameter '{name}'")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Records every parameter on `tape`, differentiable when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let ids = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let id = if trainable {
                    tape.var(v.clone())
                } else {
                    tape.leaf(v.clone())
                };
                (k.clone(), id)
            })
            .collect();
        Bound {
            ids,
            activation: self.activation,
            hidden: self.hidden,
        }
    }
}

/// Parameters of one model recorded on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    ids: BTreeMap<String, NodeId>,
    pub activation: Activation,
    pub hidden: usize,
}

impl Bound {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Usage(format!("parameter '{name}' is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Exact operation counters of one unroll.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    /// Alignment scores evaluated, one per attended state per step.
    pub alignment_evals: u64,
    /// Largest number of states attended at a single step.
    pub peak_attended: usize,
    /// Tape length at the end of the forward pass.
    pub peak_tape_nodes: usize,
}

impl Counters {
    pub fn merge_max(&mut self, other: &Counters) {
        self.alignment_evals = self.alignment_evals.max(other.alignment_evals);
        self.peak_attended = self.peak_attended.max(other.peak_attended);
        self.peak_tape_nodes = self.peak_tape_nodes.max(other.peak_tape_nodes);
    }
}

fn apply_activation(tape: &mut Tape, bound: &Bound, a: NodeId) -> Result<NodeId> {
    match bound.activation {
        Activation::Tanh => tape.tanh(a),
        Activation::Modrelu => tape.modrelu(a, bound.id(PARAM_MOD_BIAS)?),
        Activation::Identity => Ok(a),
    }
}

/// `h_t = φ(V s_{t−1} + U x_t + b)`.
pub fn rnn_cell_step(tape: &mut Tape, bound: &Bound, s_prev: NodeId, x_t: NodeId) -> Result<NodeId> {
    let vs = tape.matmul_nt(s_prev, bound.id(PARAM_V)?)?;
    let ux = tape.matmul_nt(x_t, bound.id(PARAM_U)?)?;
    let a = tape.add(vs, ux)?;
    let a = tape.add_bias(a, bound.id(PARAM_B)?)?;
    apply_activation(tape, bound, a)
}

/// LSTM step driven by the macro-state; gate blocks are ordered input,
/// forget, candidate, output. Returns `(h_t, cell_t)`.
pub fn lstm_cell_step(
    tape: &mut Tape,
    bound: &Bound,
    s_prev: NodeId,
    cell_prev: NodeId,
    x_t: NodeId,
) -> Result<(NodeId, NodeId)> {
    let n = bound.hidden;
    let ws = tape.matmul_nt(s_prev, bound.id(PARAM_W_GATES)?)?;
    let ux = tape.matmul_nt(x_t, bound.id(PARAM_U_GATES)?)?;
    let z = tape.add(ws, ux)?;
    let z = tape.add_bias(z, bound.id(PARAM_B_GATES)?)?;
    let zi = tape.slice_cols(z, 0, n)?;
    let zf = tape.slice_cols(z, n, 2 * n)?;
    let zg = tape.slice_cols(z, 2 * n, 3 * n)?;
    let zo = tape.slice_cols(z, 3 * n, 4 * n)?;
    let i = tape.sigmoid(zi)?;
    let f = tape.sigmoid(zf)?;
    let g = tape.tanh(zg)?;
    let o = tape.sigmoid(zo)?;
    let keep = tape.mul(f, cell_prev)?;
    let write = tape.mul(i, g)?;
    let cell = tape.add(keep, write)?;
    let tc = tape.tanh(cell)?;
    let h = tape.mul(o, tc)?;
    Ok((h, cell))
}

/// A hidden state together with its cached key projection `U_a h`.
#[derive(Clone, Copy, Debug)]
pub struct Slot {
    pub h: NodeId,
    pub key: Option<NodeId>,
}

impl Slot {
    pub fn new(tape: &mut Tape, bound: &Bound, h: NodeId) -> Result<Self> {
        let key = match bound.ids.get(PARAM_U_A) {
            Some(&ua) => Some(tape.matmul_nt(h, ua)?),
            None => None,
        };
        Ok(Self { h, key })
    }

    fn key(&self) -> Result<NodeId> {
        self.key
            .ok_or_else(|| Error::Usage("state has no key projection; model lacks alignment parameters".into()))
    }
}

/// Query projection `W_a s_{t−1}`, shared by every score of a step.
pub fn query(tape: &mut Tape, bound: &Bound, s_prev: NodeId) -> Result<NodeId> {
    tape.matmul_nt(s_prev, bound.id(PARAM_W_A)?)
}

/// `e = v_aᵀ tanh(W_a s_{t−1} + U_a h_i)` as a `[B×1]` node.
pub fn alignment_score(
    tape: &mut Tape,
    bound: &Bound,
    s_prev: NodeId,
    h_i: NodeId,
    counters: &mut Counters,
) -> Result<NodeId> {
    let ws = query(tape, bound, s_prev)?;
    let slot = Slot::new(tape, bound, h_i)?;
    counters.alignment_evals += 1;
    tape.additive_scores(ws, &[slot.key()?], bound.id(PARAM_V_A)?)
}

/// Result of one attention step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub s: NodeId,
    pub h: NodeId,
    /// `[B×K]` attention weights over the attended slots.
    pub weights: NodeId,
}

fn attend(
    tape: &mut Tape,
    bound: &Bound,
    ws: NodeId,
    h_t: NodeId,
    slots: &[Slot],
    counters: &mut Counters,
) -> Result<StepOutput> {
    if slots.is_empty() {
        return Err(Error::Usage("attention over an empty set of states".into()));
    }
    let keys = slots.iter().map(Slot::key).collect::<Result<Vec<_>>>()?;
    let scores = tape.additive_scores(ws, &keys, bound.id(PARAM_V_A)?)?;
    counters.alignment_evals += slots.len() as u64;
    counters.peak_attended = counters.peak_attended.max(slots.len());
    let weights = tape.softmax(scores)?;
    let hs: Vec<NodeId> = slots.iter().map(|s| s.h).collect();
    let c = tape.weighted_sum(weights, &hs)?;
    let s = tape.add(h_t, c)?;
    Ok(StepOutput { s, h: h_t, weights })
}

/// Attention over the full history `h_1 … h_t` (the last slot is `h_t`).
pub fn full_attention_step(
    tape: &mut Tape,
    bound: &Bound,
    s_prev: NodeId,
    history: &[Slot],
    counters: &mut Counters,
) -> Result<StepOutput> {
    let last = history
        .last()
        .ok_or_else(|| Error::Usage("full attention needs at least one state".into()))?;
    let ws = query(tape, bound, s_prev)?;
    attend(tape, bound, ws, last.h, history, counters)
}

/// Outcome of a state leaving the short buffer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Decision {
    Inserted { birth: usize, beta: f64 },
    Replaced { birth: usize, beta: f64, evicted_birth: usize, evicted_beta: f64 },
    Rejected { birth: usize, beta: f64 },
}

/// Screening state of a single sequence.
///
/// The short buffer holds the last `nu` birth-times with their running
/// relevance `β`. A state leaving the buffer enters the relevant set if
/// there is room, or replaces the lowest-`β` member when its own `β` is
/// strictly larger. Attended slots are the buffer (oldest first) followed by
/// the relevant set.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    nu: usize,
    rho: usize,
    buffer: VecDeque<(usize, f64)>,
    relevant: Vec<(usize, f64)>,
    log: Vec<Decision>,
    keep_log: bool,
}

impl MemoryBank {
    pub fn new(nu: usize, rho: usize) -> Result<Self> {
        if nu < 1 {
            return Err(Error::Config("short buffer size nu must be at least 1".into()));
        }
        Ok(Self {
            nu,
            rho,
            buffer: VecDeque::with_capacity(nu + 1),
            relevant: Vec::with_capacity(rho),
            log: Vec::new(),
            keep_log: false,
        })
    }

    /// Keeps every screening decision for later inspection.
    pub fn with_log(mut self) -> Self {
        self.keep_log = true;
        self
    }

    pub fn nu(&self) -> usize {
        self.nu
    }

    pub fn rho(&self) -> usize {
        self.rho
    }

    /// `(birth, β)` of buffered states, oldest first.
    pub fn buffer(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.buffer.iter().copied()
    }

    /// `(birth, β)` of relevant-set members in slot order.
    pub fn relevant(&self) -> &[(usize, f64)] {
        &self.relevant
    }

    pub fn decisions(&self) -> &[Decision] {
        &self.log
    }

    /// Adds the state born at `t`; evicts and screens the oldest one when the
    /// buffer overflows.
    pub fn admit(&mut self, t: usize) -> Option<Decision> {
        self.buffer.push_back((t, 0.0));
        if self.buffer.len() <= self.nu {
            return None;
        }
        let (birth, beta) = self.buffer.pop_front()?;
        let decision = if self.relevant.len() < self.rho {
            self.relevant.push((birth, beta));
            Decision::Inserted { birth, beta }
        } else if self.rho == 0 {
            Decision::Rejected { birth, beta }
        } else {
            let (slot, &(evicted_birth, evicted_beta)) = self
                .relevant
                .iter()
                .enumerate()
                .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))?;
            if beta > evicted_beta {
                self.relevant[slot] = (birth, beta);
                Decision::Replaced { birth, beta, evicted_birth, evicted_beta }
            } else {
                Decision::Rejected { birth, beta }
            }
        };
        if self.keep_log {
            self.log.push(decision);
        }
        Some(decision)
    }

    /// Birth-times of the attended slots: buffer oldest first, then the
    /// relevant set.
    pub fn slots(&self) -> Vec<usize> {
        self.buffer
            .iter()
            .map(|e| e.0)
            .chain(self.relevant.iter().map(|e| e.0))
            .collect()
    }

    /// Adds this step's weights (aligned with [`MemoryBank::slots`]) to the
    /// relevance of the buffered states.
    pub fn accumulate(&mut self, weights: &[f64]) {
        for (entry, w) in self.buffer.iter_mut().zip(weights) {
            entry.1 += w;
        }
    }
}

/// Screened attention step for a batch: one [`MemoryBank`] per row.
///
/// `states[i]` is the slot of the state born at `i + 1`; the current state
/// `h_t` must already be `states[t − 1]`. Slots that hold different states in
/// different rows are assembled with a row gather.
pub fn screened_attention_step(
    tape: &mut Tape,
    bound: &Bound,
    s_prev: NodeId,
    banks: &mut [MemoryBank],
    states: &[Slot],
    t: usize,
    counters: &mut Counters,
) -> Result<StepOutput> {
    if t == 0 || states.len() < t {
        return Err(Error::Usage(format!("state born at {t} is not available")));
    }
    for bank in banks.iter_mut() {
        bank.admit(t);
    }
    let per_row: Vec<Vec<usize>> = banks.iter().map(MemoryBank::slots).collect();
    let k = per_row[0].len();
    let mut slots = Vec::with_capacity(k);
    for j in 0..k {
        let first = per_row[0][j];
        if per_row.iter().all(|r| r[j] == first) {
            slots.push(states[first - 1]);
        } else {
            let hs: Vec<NodeId> = per_row.iter().map(|r| states[r[j] - 1].h).collect();
            let keys = per_row
                .iter()
                .map(|r| states[r[j] - 1].key())
                .collect::<Result<Vec<_>>>()?;
            slots.push(Slot {
                h: tape.row_gather(&hs)?,
                key: Some(tape.row_gather(&keys)?),
            });
        }
    }
    let ws = query(tape, bound, s_prev)?;
    let out = attend(tape, bound, ws, states[t - 1].h, &slots, counters)?;
    let w = tape.value(out.weights);
    for (b, bank) in banks.iter_mut().enumerate() {
        bank.accumulate(w.row(b));
    }
    Ok(out)
}

/// Options of an unroll beyond the parameters themselves.
#[derive(Clone, Debug)]
pub struct UnrollConfig {
    pub nu: usize,
    pub rho: usize,
    /// Record parameters as differentiable tape inputs.
    pub trainable: bool,
    /// Keep per-step attention rows for heatmaps.
    pub archive_attention: bool,
    /// Keep the screening decision log of every bank.
    pub log_decisions: bool,
}

impl Default for UnrollConfig {
    fn default() -> Self {
        Self {
            nu: 10,
            rho: 10,
            trainable: true,
            archive_attention: false,
            log_decisions: false,
        }
    }
}

/// Weights of one step for one batch row, keyed by birth-time.
pub type AttentionRow = Vec<(usize, f64)>;

pub struct Unrolled {
    pub bound: Bound,
    pub h: Vec<NodeId>,
    pub s: Vec<NodeId>,
    /// Time-major `[T·B × output]` readout logits.
    pub logits: NodeId,
    /// `attention[t][b]`, present when archiving was requested.
    pub attention: Vec<Vec<AttentionRow>>,
    pub banks: Vec<MemoryBank>,
    pub counters: Counters,
}

pub fn attention_mode(kind: ModelKind, cfg: &UnrollConfig) -> AttentionMode {
    match kind {
        ModelKind::Rnn | ModelKind::Lstm => AttentionMode::None,
        ModelKind::MemRnn | ModelKind::MemLstm => AttentionMode::Full,
        ModelKind::RelRnn | ModelKind::RelLstm => AttentionMode::Screened {
            nu: cfg.nu,
            rho: cfg.rho,
        },
        ModelKind::UniformAttnLinearRnn => AttentionMode::Uniform,
    }
}

/// Runs the model over `inputs` (`[T × B × m]`), probing every `h_t`.
pub fn unroll(tape: &mut Tape, params: &CellParams, inputs: &Tensor, cfg: &UnrollConfig) -> Result<Unrolled> {
    let mode = attention_mode(params.kind, cfg);
    unroll_with(tape, params, mode, inputs, cfg)
}

/// [`unroll`] with an explicit attention regime.
pub fn unroll_with(
    tape: &mut Tape,
    params: &CellParams,
    mode: AttentionMode,
    inputs: &Tensor,
    cfg: &UnrollConfig,
) -> Result<Unrolled> {
    let (steps, batch, m) = match inputs.shape() {
        &[t, b, m] => (t, b, m),
        other => return Err(Error::dim("unroll", other, &[0, 0, params.input])),
    };
    if m != params.input {
        return Err(Error::dim("unroll", inputs.shape(), &[steps, batch, params.input]));
    }
    let n = params.hidden;
    let bound = params.bind(tape, cfg.trainable);
    let mut banks = match mode {
        AttentionMode::Screened { nu, rho } => {
            let bank = MemoryBank::new(nu, rho)?;
            let bank = if cfg.log_decisions { bank.with_log() } else { bank };
            vec![bank; batch]
        }
        _ => Vec::new(),
    };
    let mut counters = Counters::default();
    let mut s_prev = tape.leaf(Tensor::zeros(&[batch, n]));
    let mut cell = if params.kind.is_lstm() {
        Some(tape.leaf(Tensor::zeros(&[batch, n])))
    } else {
        None
    };
    let mut states: Vec<Slot> = Vec::with_capacity(steps);
    let (mut hs, mut ss) = (Vec::with_capacity(steps), Vec::with_capacity(steps));
    let mut attention = Vec::new();
    let stride = batch * m;
    for t in 1..=steps {
        let x = Tensor::from_vec(&[batch, m], inputs.data()[(t - 1) * stride..t * stride].to_vec())?;
        let x = tape.leaf(x);
        let h = match cell {
            Some(c) => {
                let (h, c2) = lstm_cell_step(tape, &bound, s_prev, c, x)?;
                cell = Some(c2);
                h
            }
            None => rnn_cell_step(tape, &bound, s_prev, x)?,
        };
        tape.probe(h)?;
        let (s, weights) = match mode {
            AttentionMode::None => (h, None),
            AttentionMode::Full => {
                states.push(Slot::new(tape, &bound, h)?);
                let out = full_attention_step(tape, &bound, s_prev, &states, &mut counters)?;
                (out.s, Some((out.weights, (1..=t).collect::<Vec<_>>())))
            }
            AttentionMode::Screened { .. } => {
                states.push(Slot::new(tape, &bound, h)?);
                let out = screened_attention_step(tape, &bound, s_prev, &mut banks, &states, t, &mut counters)?;
                (out.s, Some((out.weights, Vec::new())))
            }
            AttentionMode::Uniform => {
                states.push(Slot { h, key: None });
                let w = tape.leaf(Tensor::filled(&[batch, t], 1.0 / t as f64));
                let items: Vec<NodeId> = states.iter().map(|s| s.h).collect();
                let c = tape.weighted_sum(w, &items)?;
                counters.peak_attended = counters.peak_attended.max(t);
                (tape.add(h, c)?, Some((w, (1..=t).collect())))
            }
        };
        if cfg.archive_attention {
            if let Some((w, births)) = weights {
                let wv = tape.value(w);
                let rows = (0..batch)
                    .map(|b| {
                        let row_births = match mode {
                            AttentionMode::Screened { .. } => banks[b].slots(),
                            _ => births.clone(),
                        };
                        row_births.into_iter().zip(wv.row(b).iter().copied()).collect()
                    })
                    .collect();
                attention.push(rows);
            }
        }
        tape.probe(s)?;
        hs.push(h);
        ss.push(s);
        s_prev = s;
    }
    let stacked = tape.concat(&ss, 0)?;
    let logits = tape.matmul_nt(stacked, bound.id(PARAM_W_OUT)?)?;
    let logits = tape.add_bias(logits, bound.id(PARAM_B_OUT)?)?;
    counters.peak_tape_nodes = tape.len();
    Ok(Unrolled {
        bound,
        h: hs,
        s: ss,
        logits,
        attention,
        banks,
        counters,
    })
}
