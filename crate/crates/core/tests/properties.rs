mod common;

use common::{close, RefBank};
use proptest::prelude::*;
use relrnn::autograd::Tape;
use relrnn::cells::{unroll, CellParams, MemoryBank, ModelKind, UnrollConfig};
use relrnn::rng::Rng;
use relrnn::tensor::{Activation, Tensor};

fn kind_strategy() -> impl Strategy<Value = ModelKind> {
    prop::sample::select(ModelKind::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bank_agrees_with_reference(nu in 1usize..8, rho in 0usize..8, raw in prop::collection::vec(0.0f64..1.0, 1..400)) {
        let mut bank = MemoryBank::new(nu, rho).unwrap();
        let mut reference = RefBank::new(nu, rho);
        let mut it = raw.iter().cycle();
        for t in 1..=raw.len() {
            bank.admit(t);
            reference.push(t);
            let slots = bank.slots();
            prop_assert_eq!(&slots, &reference.slots());
            prop_assert!(slots.len() <= nu + rho);
            let w: Vec<f64> = slots.iter().map(|_| *it.next().unwrap() + 1e-3).collect();
            let total: f64 = w.iter().sum();
            let w: Vec<f64> = w.iter().map(|x| x / total).collect();
            bank.accumulate(&w);
            reference.accumulate(&slots.iter().copied().zip(w.iter().copied()).collect::<Vec<_>>());
        }
        let min_kept = reference.relevant.iter().map(|e| e.1).fold(f64::INFINITY, f64::min);
        let max_dropped = reference.discarded.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(reference.relevant.is_empty() || max_dropped <= min_kept);
        prop_assert_eq!(bank.relevant(), &reference.relevant[..]);
    }

    /// Each batch row evolves independently of the others.
    #[test]
    fn rows_are_independent(kind in kind_strategy(), seed in 0u64..1000, steps in 1usize..12, nu in 1usize..4, rho in 0usize..4) {
        let mut rng = Rng::new(seed);
        let p = CellParams::init(kind, Activation::Tanh, 3, 2, 2, &mut rng).unwrap();
        let batch = 3;
        let inputs = Tensor::from_vec(&[steps, batch, 2], (0..steps * batch * 2).map(|_| rng.normal()).collect()).unwrap();
        let cfg = UnrollConfig { nu, rho, trainable: false, ..UnrollConfig::default() };
        let mut tape = Tape::new();
        let all = unroll(&mut tape, &p, &inputs, &cfg).unwrap();
        let logits = tape.value(all.logits).clone();
        for row in 0..batch {
            let single: Vec<f64> = common::row_inputs(&inputs, row).concat();
            let one = Tensor::from_vec(&[steps, 1, 2], single).unwrap();
            let mut t2 = Tape::new();
            let un = unroll(&mut t2, &p, &one, &cfg).unwrap();
            for t in 0..steps {
                prop_assert!(close(logits.row(t * batch + row), t2.value(un.logits).row(t), 1e-12));
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-30.0f64..30.0, 1..40), rows in 1usize..4) {
        let cols = vals.len();
        let data: Vec<f64> = (0..rows).flat_map(|r| vals.iter().map(move |v| v * (r + 1) as f64)).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[rows, cols], data).unwrap());
        let y = tape.softmax(x).unwrap();
        for r in 0..rows {
            let row = tape.value(y).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn uniform_logits_cost_log_classes(classes in 2usize..12, n in 1usize..6) {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::filled(&[n, classes], 0.7));
        let targets: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let loss = tape.cross_entropy(logits, &targets, &vec![1.0 / n as f64; n]).unwrap();
        prop_assert!((tape.value(loss).item() - (classes as f64).ln()).abs() < 1e-12);
    }
}
