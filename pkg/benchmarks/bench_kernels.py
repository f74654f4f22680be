"""
Numba vs numpy kernel timings, plus one training step on the default model.

    python benchmarks/bench_kernels.py [--repeat 20] [--quick]

Each kernel runs once per backend before timing so JIT compilation is not
counted. Reported numbers are the median of ``--repeat`` calls.
"""

import argparse
import statistics
import time

import numpy as np

from latentplan import kernels


def _median_ms(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * statistics.median(times)


def kernel_cases(rng, scale):
    n, d, v, t = 512 * scale, 256, 65, 96
    x = rng.normal(size=(n, d))
    gamma, beta = rng.normal(size=d), rng.normal(size=d)
    y, mean, rstd = kernels.layernorm_fwd(x, gamma, beta)
    g, th = kernels.gelu_fwd(x)
    s = rng.normal(size=(8 * scale, t, t))
    p = kernels.causal_softmax_fwd(s)
    logits = rng.normal(size=(n, v))
    tg = rng.integers(-1, v, size=n)
    w = np.ones(n)
    _, probs = kernels.xent_fwd(logits, tg, w)
    idx = rng.integers(0, 100, size=n)
    a, b = rng.integers(0, 20, size=40 * scale), rng.integers(0, 20, size=40 * scale)
    cases = {
        "layernorm_fwd": lambda: kernels.layernorm_fwd(x, gamma, beta),
        "layernorm_bwd": lambda: kernels.layernorm_bwd(x, x, mean, rstd, gamma),
        "gelu_fwd": lambda: kernels.gelu_fwd(x),
        "gelu_bwd": lambda: kernels.gelu_bwd(x, th, x),
        "causal_softmax_fwd": lambda: kernels.causal_softmax_fwd(s),
        "causal_softmax_bwd": lambda: kernels.causal_softmax_bwd(p, s),
        "xent_fwd": lambda: kernels.xent_fwd(logits, tg, w),
        "xent_bwd": lambda: kernels.xent_bwd(probs, tg, w, 1.0),
        "scatter_add_rows": lambda: kernels.scatter_add_rows(np.zeros((100, d)), idx, x),
        "levenshtein": lambda: kernels.levenshtein(a, b),
    }
    return cases


def train_step_case():
    from latentplan.model import Model, ModelConfig
    from latentplan.toyworld import SCENARIOS, World, make_split
    from latentplan.training import LossWeights, batch_losses, make_batch

    world = World.build(0)
    recs = make_split(world, {s: 4 for s in SCENARIOS}, 1, "bench")
    model = Model(ModelConfig(v_text=world.v_text), 0)
    batch = make_batch(world, model, recs)

    def step():
        model.zero_grad()
        batch_losses(model, batch, LossWeights())[2].backward()

    return step


def main():
    ap = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--quick", action="store_true", help="smaller inputs, skip the training step")
    args = ap.parse_args()
    scale = 1 if args.quick else 4
    if len(kernels.BACKENDS) < 2:
        print("numba is not importable; only the numpy backend can be timed")
    rows = {}
    for backend in kernels.BACKENDS:
        kernels.set_backend(backend)
        cases = kernel_cases(np.random.default_rng(0), scale)
        if not args.quick:
            cases["train_step (12 records)"] = train_step_case()
        for name, fn in cases.items():
            rows.setdefault(name, {})[backend] = _median_ms(fn, args.repeat if "train" not in name else 3)
    print(f"{'kernel':<26s}" + "".join(f"{b:>12s}" for b in kernels.BACKENDS) + ("   speedup" if len(kernels.BACKENDS) > 1 else ""))
    for name, r in rows.items():
        line = f"{name:<26s}" + "".join(f"{r[b]:10.3f}ms" for b in kernels.BACKENDS)
        if "numba" in r:
            line += f"   {r['numpy'] / r['numba']:6.2f}x"
        print(line)


if __name__ == "__main__":
    main()
