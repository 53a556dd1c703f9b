"""Smoke test of the dualpath_py extension module.

Build and install first:

    pip install --no-build-isolation -e crates/python

then run `python python/smoke_test.py`. Exits nonzero on the first failure.
"""

import csv
import json
import math
import os
import sys
import tempfile

import dualpath_py as dp

TINY = """
[model]
L = 2
d = 8
h_q = 2
h_kv = 2
vocab = 256
T_max = 32
variant = "dual"
K = 3
d_ffn = 64
d_ffn_wide = 128

[train]
total_steps = 4
warmup_steps = 1
batch_size = 2
seq_len = 16
eval_bytes = 256
"""


def check(cond, what):
    if not cond:
        raise AssertionError(what)
    print("ok  ", what)


def main():
    s = dp.solve_widths("80M", variant="dual", k=4, alpha=0.5)
    check((s["d_ffn"], s["d_ffn_wide"]) == (1600, 11392), "solve_widths dual K=4 at 80M")
    s = dp.solve_widths("80M", variant="wide")
    check(s["d_ffn_wide"] == 24576, "solve_widths wide at 80M")
    check(dp.param_count(TINY)["total"] > 0, "param_count")
    check(dp.deep_share(0.5, 0.25, 1.0, 2.0) == 0.5, "deep_share")
    check(dp.bits_per_byte(math.log(2), 1) == 1.0, "bits_per_byte")
    check(dp.lr_at(184, reference_total_steps=20000) == 5e-4, "reference schedule peak")
    check(dp.parse_ablation("shuffle:7") == "shuffle:seed=7", "ablation spec parsing")
    try:
        dp.parse_ablation("loops:3")
        check(False, "bad spec rejected")
    except ValueError:
        check(True, "bad spec rejected")

    m = dp.Model.init(TINY, seed=1)
    check(m.config["K"] == 3 and m.dtype == "f32", "Model.init " + repr(m))
    tokens = list(b"hello world, 1+2=3")[:16]
    logits = m.logits(tokens)
    check(len(logits) == 16 and len(logits[0]) == 256, "logits shape")
    check(all(math.isfinite(v) for row in logits for v in row), "logits finite")

    recs = m.trace(tokens, seq_len=8)
    check(len(recs) == 2 * 2 * 8, "trace record count")
    check(all(len(r["q"]) == 2 for r in recs), "router weights per record")
    check(all(abs(r["g_d"] - 0.5) < 1e-12 for r in recs), "fresh gates are 0.5")

    corpus = dp.synthetic_corpus(0, 4000)
    check(isinstance(corpus, bytes) and len(corpus) >= 4000, "synthetic corpus")
    e = m.evaluate(corpus[:500], seq_len=32)
    check(abs(e["bits_per_byte"] - e["total_nats"] / math.log(2) / e["bytes"]) < 1e-12, "evaluate")
    rows = m.ablate(corpus[:300], ["baseline", "force-loops:3", "gates:1,0", "shuffle:seed=1"], seq_len=32)
    check([r["spec"] for r in rows][:2] == ["baseline", "force-loops:3"], "ablate specs")
    check(rows[0]["delta"] == 0.0 and rows[1]["delta"] == 0.0, "identity ablations")

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "corpus.txt")
        with open(path, "wb") as f:
            f.write(corpus)
        run = os.path.join(tmp, "run")
        summary = dp.train(run, path, config=TINY)
        check(summary["steps"] == 4, "train")
        with open(os.path.join(run, "loss.csv")) as f:
            rows = list(csv.DictReader(f))
        check([int(r["step"]) for r in rows] == [0, 1, 2, 3], "loss.csv steps")
        with open(os.path.join(run, "eval.json")) as f:
            check(json.load(f) == summary["eval"], "eval.json")

        trained = dp.Model.load(os.path.join(run, "checkpoint"))
        check(trained.num_params == m.num_params, "checkpoint load")
        trace_dir = os.path.join(tmp, "trace")
        trained.trace(tokens, seq_len=16, out_dir=trace_dir, corpus="hello")
        header, back = dp.read_trace(trace_dir)
        check(header["K"] == 3 and header["L"] == 2 and header["corpus"] == "hello", "trace header")
        check(len(back) == 32, "trace round trip")
        with open(os.path.join(trace_dir, "trace.csv")) as f:
            cols = next(csv.reader(f))
        check(cols[-3:] == ["rho_d", "q_1", "q_2"], "trace columns")

    print("all smoke checks passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
