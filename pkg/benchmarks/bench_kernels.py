"""Time the compiled kernels against the numpy fallback, plus one training step.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Shapes match the tiny preset on the synthetic benchmark (batch of 288
sequences of length 16, model dim 32, 4 heads).
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from rankforge import kernels


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def kernel_cases(n=288, length=16, dim=32, heads=4, m=36):
    rng = np.random.default_rng(0)
    rows = rng.normal(size=(n * length, dim))
    gain, bias = rng.normal(size=dim), rng.normal(size=dim)
    q, k, v = (rng.normal(size=(n, length, dim)) for _ in range(3))
    mask_bias = np.zeros((n, length))
    mask_bias[:, length - 3 :] = -1e30
    labels = np.zeros(m)
    labels[0] = 1.0
    scores = rng.normal(size=m)
    idx = rng.integers(0, 100, size=n * length)

    def cases(mod):
        y, xhat, rstd = mod.layernorm_forward(rows, gain, bias, 1e-6)
        out, p = mod.attention_forward(q, k, v, mask_bias, heads)
        sm = mod.softmax_forward(rows)
        return {
            "layernorm_forward": lambda: mod.layernorm_forward(rows, gain, bias, 1e-6),
            "layernorm_backward": lambda: mod.layernorm_backward(rows, xhat, rstd, gain),
            "softmax_forward": lambda: mod.softmax_forward(rows),
            "softmax_backward": lambda: mod.softmax_backward(sm, rows),
            "attention_forward": lambda: mod.attention_forward(q, k, v, mask_bias, heads),
            "attention_backward": lambda: mod.attention_backward(out, q, k, v, p, heads),
            "scatter_add_rows": lambda: mod.scatter_add_rows(np.zeros((100, dim)), idx, rows),
            "softmax_ce x32": lambda: [mod.softmax_ce(labels, scores) for _ in range(32)],
            "pair_logistic x32": lambda: [mod.pair_logistic(labels, scores) for _ in range(32)],
        }

    return cases


def train_step_seconds(backend, steps=5):
    """Seconds per training step, measured in a fresh interpreter per backend."""
    code = (
        "import time\n"
        "from rankforge import experiments as E, train as T\n"
        "from rankforge.model import RankerModel\n"
        "import numpy as np\n"
        "b = E.Benchmark()\n"
        "d = E.BenchmarkData.generate(b.synth, extra_domains=())\n"
        "m = RankerModel.init(b.model_config(len(d.vocab.tokens), 0))\n"
        "c = T.EncodedCorpus.build(d.train_lists, d.vocab, b.train)\n"
        "rng = np.random.default_rng(0)\n"
        "T.batch_step(m, T.assemble_batch(c, b.train, rng), b.train)\n"
        "t = time.perf_counter()\n"
        f"for _ in range({steps}): T.batch_step(m, T.assemble_batch(c, b.train, rng), b.train)\n"
        f"print((time.perf_counter() - t) / {steps})\n"
    )
    env = dict(os.environ)
    env["RANKFORGE_PURE_PYTHON"] = "1" if backend == "python" else "0"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--no-train-step", action="store_true")
    args = ap.parse_args()
    try:
        compiled = kernels.backend_module("compiled")
    except ImportError:
        sys.exit("compiled extension not built; run `pip install --no-build-isolation -e .` first")
    python = kernels.backend_module("python")
    cases = kernel_cases()
    py_cases, c_cases = cases(python), cases(compiled)
    print(f"{'kernel':<22}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}")
    for name in py_cases:
        tp = best_of(py_cases[name], args.repeat) * 1e3
        tc = best_of(c_cases[name], args.repeat) * 1e3
        print(f"{name:<22}{tp:>12.3f}{tc:>14.3f}{tp / tc:>9.2f}x")
    if not args.no_train_step:
        tp = train_step_seconds("python") * 1e3
        tc = train_step_seconds("compiled") * 1e3
        print(f"{'full training step':<22}{tp:>12.1f}{tc:>14.1f}{tp / tc:>9.2f}x")


if __name__ == "__main__":
    main()
