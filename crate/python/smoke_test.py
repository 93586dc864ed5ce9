"""Smoke test of the relrnn_py extension module.

Build the module first, for example:

    cargo build --release -p relrnn-py --features extension-module
    cp target/release/librelrnn_py.so python/relrnn_py.so
    python3 python/smoke_test.py
"""

import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import relrnn_py as rr


def main():
    assert "rel-rnn" in rr.MODEL_KINDS

    batch = rr.generate_task("copy", 12, batch=2, seed=1)
    steps = len(batch["symbols"])
    assert steps == 12 + 20
    assert batch["recall_positions"] == list(range(steps - 10, steps))

    model = rr.Model("rel-rnn", 8, seed=3, nu=2, rho=2)
    one_hot = [[[1.0 if c == s else 0.0 for c in range(10)] for s in row] for row in batch["symbols"]]
    out = model.forward(one_hot)
    assert len(out["logits"]) == steps and len(out["logits"][0][0]) == 9
    for rows in out["attention"]:
        assert abs(sum(w for _, w in rows[0]) - 1.0) < 1e-10
        assert len(rows[0]) <= 4
    assert out["alignment_evals"] <= 4 * steps

    bank = rr.MemoryBank(1, 1)
    bank.admit(1)
    bank.accumulate([1.0])
    decision = bank.admit(2)
    assert decision[0] == "inserted" and decision[1] == 1

    trace = model.grad_trace("copy", 12, batch=2)
    assert len(trace) == steps and all(math.isfinite(n) for _, n in trace)

    brute, formula = rr.omega(1, 3, 2)
    assert abs(brute - 1.0) < 1e-15 and abs(formula - 1.0) < 1e-15

    echo = rr.resolve_config(None, task="denoise", seq_len=30)
    assert 'optimizer = "rmsprop"' in echo

    trained, records = rr.train(model="rnn", seq_len=10, hidden=8, batch=4, max_updates=3, eval_every=3)
    assert len(records) == 3 and records[-1][3] is not None

    assert rr.verify("theorem2")["passed"]
    assert rr.verify("paths", trials=3)["passed"]

    rows = rr.complexity(["mem-rnn"], [10, 20, 30])
    assert [r[2] for r in rows] == [55, 210, 465]

    print("python smoke test passed")


if __name__ == "__main__":
    main()
