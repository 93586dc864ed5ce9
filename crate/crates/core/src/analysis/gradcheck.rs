//! Central finite-difference checks of the tape gradients.

use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::cells::{unroll, CellParams, ModelKind, UnrollConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Activation, Tensor};

pub const FD_EPS: f64 = 1e-5;

/// Operation kinds covered by [`check_op`].
pub const OP_KINDS: [&str; 18] = [
    "matmul",
    "matmul_nt",
    "add",
    "add_bias",
    "mul",
    "scale",
    "tanh",
    "sigmoid",
    "modrelu",
    "softmax",
    "concat_rows",
    "concat_cols",
    "slice_cols",
    "sum",
    "additive_scores",
    "weighted_sum",
    "row_gather",
    "cross_entropy",
];

type Build = dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Worst relative error between tape and central-difference gradients of
/// `sum(R ⊙ f(inputs))` for a random projection `R`.
pub fn check_function(build: &Build, inputs: &[Tensor], rng: &mut Rng) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = build(&mut tape, &ids)?;
    let proj = Tensor::from_vec(
        tape.value(out).shape(),
        (0..tape.value(out).len()).map(|_| rng.normal()).collect(),
    )?;
    let r = tape.leaf(proj.clone());
    let prod = tape.mul(out, r)?;
    let loss = tape.sum(prod)?;
    tape.backward(loss)?;
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = vals.iter().map(|v| t.leaf(v.clone())).collect();
        let o = build(&mut t, &ids)?;
        Ok(t.value(o).data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
    };
    let mut worst = 0.0f64;
    let mut vals = inputs.to_vec();
    for (k, id) in ids.iter().enumerate() {
        let analytic = tape.grad(*id)?;
        let mut numeric = vec![0.0; analytic.len()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = vals[k].data()[e];
            vals[k].data_mut()[e] = orig + FD_EPS;
            let up = eval(&vals)?;
            vals[k].data_mut()[e] = orig - FD_EPS;
            let down = eval(&vals)?;
            vals[k].data_mut()[e] = orig;
            *slot = (up - down) / (2.0 * FD_EPS);
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    Ok(worst)
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.normal()).collect()).expect("positive shape")
}

fn dim(rng: &mut Rng) -> usize {
    1 + rng.below(4)
}

/// Random instance of one op kind, checked against finite differences.
///
/// modReLU inputs are redrawn until every coordinate is at least `1e-3`
/// away from the two points where the map is not differentiable.
pub fn check_op(kind: &str, rng: &mut Rng) -> Result<f64> {
    let (b, n, k) = (dim(rng), dim(rng), dim(rng));
    let (build, inputs): (Box<Build>, Vec<Tensor>) = match kind {
        "matmul" => (
            Box::new(|t, x| t.matmul(x[0], x[1])),
            vec![randn(rng, &[b, k]), randn(rng, &[k, n])],
        ),
        "matmul_nt" => (
            Box::new(|t, x| t.matmul_nt(x[0], x[1])),
            vec![randn(rng, &[b, k]), randn(rng, &[n, k])],
        ),
        "add" => (
            Box::new(|t, x| t.add(x[0], x[1])),
            vec![randn(rng, &[b, n]), randn(rng, &[b, n])],
        ),
        "add_bias" => (
            Box::new(|t, x| t.add_bias(x[0], x[1])),
            vec![randn(rng, &[b, n]), randn(rng, &[n])],
        ),
        "mul" => (
            Box::new(|t, x| t.mul(x[0], x[1])),
            vec![randn(rng, &[b, n]), randn(rng, &[b, n])],
        ),
        "scale" => {
            let f = rng.normal();
            (Box::new(move |t, x| t.scale(x[0], f)), vec![randn(rng, &[b, n])])
        }
        "tanh" => (Box::new(|t, x| t.tanh(x[0])), vec![randn(rng, &[b, n])]),
        "sigmoid" => (Box::new(|t, x| t.sigmoid(x[0])), vec![randn(rng, &[b, n])]),
        "modrelu" => {
            let (z, bias) = loop {
                let z = randn(rng, &[b, n]);
                let bias = randn(rng, &[n]).scale(0.5);
                let ok = z.data().iter().enumerate().all(|(i, &v)| {
                    v.abs() > 1e-3 && (v.abs() + bias.data()[i % n]).abs() > 1e-3
                });
                if ok {
                    break (z, bias);
                }
            };
            (Box::new(|t, x| t.modrelu(x[0], x[1])), vec![z, bias])
        }
        "softmax" => (Box::new(|t, x| t.softmax(x[0])), vec![randn(rng, &[b, n])]),
        "concat_rows" => (
            Box::new(|t, x| t.concat(&[x[0], x[1]], 0)),
            vec![randn(rng, &[b, n]), randn(rng, &[k, n])],
        ),
        "concat_cols" => (
            Box::new(|t, x| t.concat(&[x[0], x[1]], 1)),
            vec![randn(rng, &[b, n]), randn(rng, &[b, k])],
        ),
        "slice_cols" => {
            let width = n + k;
            let start = rng.below(width);
            let end = start + 1 + rng.below(width - start);
            (
                Box::new(move |t, x| t.slice_cols(x[0], start, end)),
                vec![randn(rng, &[b, width])],
            )
        }
        "sum" => (Box::new(|t, x| t.sum(x[0])), vec![randn(rng, &[b, n])]),
        "additive_scores" => {
            let mut inputs = vec![randn(rng, &[b, n]), randn(rng, &[n])];
            inputs.extend((0..k).map(|_| randn(rng, &[b, n])));
            (
                Box::new(|t, x| t.additive_scores(x[0], &x[2..], x[1])),
                inputs,
            )
        }
        "weighted_sum" => {
            let mut inputs = vec![randn(rng, &[b, k])];
            inputs.extend((0..k).map(|_| randn(rng, &[b, n])));
            (Box::new(|t, x| t.weighted_sum(x[0], &x[1..])), inputs)
        }
        "row_gather" => {
            let sources = 1 + rng.below(3);
            let picks: Vec<usize> = (0..b).map(|_| rng.below(sources)).collect();
            let inputs = (0..sources).map(|_| randn(rng, &[b, n])).collect();
            (
                Box::new(move |t, x| {
                    let ids: Vec<NodeId> = picks.iter().map(|&p| x[p]).collect();
                    t.row_gather(&ids)
                }),
                inputs,
            )
        }
        "cross_entropy" => {
            let classes = 1 + n;
            let targets: Vec<usize> = (0..b).map(|_| rng.below(classes)).collect();
            let weights: Vec<f64> = (0..b).map(|_| rng.uniform()).collect();
            (
                Box::new(move |t, x| t.cross_entropy(x[0], &targets, &weights)),
                vec![randn(rng, &[b, classes])],
            )
        }
        other => return Err(Error::Usage(format!("unknown op kind '{other}'"))),
    };
    check_function(build.as_ref(), &inputs, rng)
}

/// Gradient check of every parameter of a short unroll with two rows and
/// three hidden units.
pub fn check_unroll(
    kind: ModelKind,
    activation: Activation,
    steps: usize,
    (nu, rho): (usize, usize),
    rng: &mut Rng,
) -> Result<f64> {
    let (batch, n, m, classes) = (2, 3, 4, 3);
    let mut params = CellParams::init(kind, activation, n, m, classes, rng)?;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    // Perturb everything so biases are nonzero and attention is far from uniform.
    for name in &names {
        for v in params.get_mut(name)?.data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
    let inputs = randn(rng, &[steps, batch, m]);
    let targets: Vec<usize> = (0..steps * batch).map(|_| rng.below(classes)).collect();
    let weights = vec![1.0 / (steps * batch) as f64; steps * batch];
    let ucfg = UnrollConfig {
        nu,
        rho,
        ..UnrollConfig::default()
    };
    let loss_of = |p: &CellParams| -> Result<f64> {
        let mut tape = Tape::new();
        let un = unroll(&mut tape, p, &inputs, &UnrollConfig { trainable: false, ..ucfg.clone() })?;
        let l = tape.cross_entropy(un.logits, &targets, &weights)?;
        Ok(tape.value(l).item())
    };
    let mut tape = Tape::new();
    let un = unroll(&mut tape, &params, &inputs, &ucfg)?;
    let loss = tape.cross_entropy(un.logits, &targets, &weights)?;
    tape.backward(loss)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for name in &names {
        analytic.extend_from_slice(tape.grad(un.bound.id(name)?)?.data());
        let len = params.get(name)?.len();
        for e in 0..len {
            let orig = params.get(name)?.data()[e];
            params.get_mut(name)?.data_mut()[e] = orig + FD_EPS;
            let up = loss_of(&params)?;
            params.get_mut(name)?.data_mut()[e] = orig - FD_EPS;
            let down = loss_of(&params)?;
            params.get_mut(name)?.data_mut()[e] = orig;
            numeric.push((up - down) / (2.0 * FD_EPS));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub target: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Runs `trials` random instances of every op kind and of a three-step
/// screened unroll.
pub fn gradcheck_suite(seed: u64, trials: usize, tol: f64) -> Result<Vec<GradcheckRow>> {
    let mut rng = Rng::new(seed);
    let mut rows = Vec::new();
    for kind in OP_KINDS {
        let mut worst = 0.0f64;
        for _ in 0..trials {
            worst = worst.max(check_op(kind, &mut rng)?);
        }
        rows.push(GradcheckRow {
            target: kind.to_string(),
            trials,
            max_rel_error: worst,
            passed: worst <= tol,
        });
    }
    let mut worst = 0.0f64;
    for _ in 0..trials {
        worst = worst.max(check_unroll(ModelKind::RelRnn, Activation::Tanh, 3, (1, 1), &mut rng)?);
    }
    rows.push(GradcheckRow {
        target: "rel-rnn unroll (3 steps)".into(),
        trials,
        max_rel_error: worst,
        passed: worst <= tol,
    });
    Ok(rows)
}
