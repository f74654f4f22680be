"""
Property suites behind ``latentplan verify``.

Each suite returns None on success or a string naming the first failing
case. Suites are cheap enough to run together in well under five minutes.
"""

from __future__ import annotations

import math
import time
from typing import Callable

import numpy as np
from scipy import stats

from . import numerics as nx
from .evaluation import HIGHER, LOWER, MetricTable, ScfConfig, normalized_score, scf
from .layout import Markers, delay_decode, delay_encode, encoded_length, frame_sequence, split_sequence
from .model import Model, ModelConfig
from .toyworld import SCENARIOS, Detection, World, detect_events, make_split
from .training import (
    STRATEGIES,
    CurriculumSchedule,
    LossWeights,
    audio_loss,
    batch_losses,
    curriculum_draw,
    latent_loss,
    lr_at,
    make_batch,
)

GRADCHECK_TOL = 1e-3
GRADCHECK_BUDGET_S = 60.0


def small_model_setup(seed: int = 0):
    """Dim-16, 2-layer, K=2, Q=2 model on a matching miniature world, plus a 2-record batch."""
    world = World.build(seed, n_events=4, n_words=6, v_audio=32, q=2, d_sem=8, k=2, max_frames=14)
    recs = make_split(world, {"SOUND": 1, "SPEECH": 1, "COMPOSITE": 1}, 1, "gc")
    cfg = ModelConfig(d_model=16, n_layers=2, n_heads=2, d_ff=32, v_text=world.v_text, v_audio=world.v_audio,
                      q=world.q, d_sem=world.d_sem, k=world.k, max_positions=64, init_std=0.3)
    model = Model(cfg, seed)
    batch = make_batch(world, model, recs)
    return world, model, batch


def model_gradcheck(report: dict | None = None, seed: int = 0) -> float:
    _, model, batch = small_model_setup(seed)
    w = LossWeights()
    return nx.finite_diff_check(lambda: batch_losses(model, batch, w)[2], model.params, 1e-5, report)


# ----------------------------------------------------------------------------- suites


def suite_numerics(fault: str | None = None) -> str | None:
    t0 = time.perf_counter()
    report: dict = {}
    if fault:
        with nx.inject_fault(fault):
            err = model_gradcheck(report)
    else:
        err = model_gradcheck(report)
    dt = time.perf_counter() - t0
    if not err < GRADCHECK_TOL:
        worst = max(report, key=report.get)
        return f"model gradient check: max relative error {err:.3g} >= {GRADCHECK_TOL} (worst parameter {worst})"
    if dt > GRADCHECK_BUDGET_S:
        return f"model gradient check took {dt:.1f}s > {GRADCHECK_BUDGET_S}s"
    return None


def suite_layout(n_cases: int = 1000, seed: int = 0) -> str | None:
    rng = np.random.default_rng(seed)
    for case in range(n_cases):
        n, q = int(rng.integers(0, 65)), int(rng.integers(1, 9))
        v = int(rng.integers(2, 100))
        grid = rng.integers(0, v, size=(n, q))
        enc = delay_encode(grid, v)
        want_len = encoded_length(n, q)
        if enc.shape != (want_len, q):
            return f"case {case}: encoded shape {enc.shape} != ({want_len}, {q})"
        if n and int((enc == v).sum()) != q * (q - 1):
            return f"case {case}: pad count {(enc == v).sum()} != {q * (q - 1)}"
        if not np.array_equal(delay_decode(enc, q, v), grid):
            return f"case {case}: delay round trip differs (N={n}, Q={q})"
        markers = Markers(v + 1, v + 2, v + 3, v + 4)
        text = list(rng.integers(0, v, size=int(rng.integers(1, 8))))
        k = int(rng.integers(1, 7))
        seq = frame_sequence(text, k, grid, markers, v)
        t2, k2, g2 = split_sequence(seq, markers, v, k)
        if list(t2) != [int(x) for x in text] or k2 != k or not np.array_equal(g2, grid):
            return f"case {case}: frame_sequence/split_sequence round trip differs"
    return None


def suite_losses() -> str | None:
    lat_cases = [
        ("identity", [[1.0, 0.0]], [[1.0, 0.0]], 0.0),
        ("orthogonal", [[1.0, 0.0]], [[0.0, 1.0]], 2.0),
        ("antipodal", [[1.0, 0.0]], [[-1.0, 0.0]], 4.0),
    ]
    for name, a, b, want in lat_cases:
        got = latent_loss(np.array(a), np.array(b), 1.0).item()
        if abs(got - want) > 1e-12:
            return f"latent_loss {name}: {got} != {want}"
    for v in (4, 64):
        logits = np.zeros((5, 3, v + 1))
        got = audio_loss(logits, np.zeros((5, 3), dtype=np.int64)).item()
        if abs(got - math.log(v + 1)) > 1e-9:
            return f"audio_loss uniform over {v + 1} classes: {got} != ln({v + 1})"
    return None


def suite_schedule() -> str | None:
    peak, warm = 1e-4, 3000
    for step, want in ((3000, 1e-4), (1500, 5e-5), (12000, 5e-5)):
        got = lr_at(step, peak, warm)
        if abs(got - want) > 1e-15:
            return f"lr_at({step}) = {got} != {want}"
    left, right = lr_at(warm - 1e-9, peak, warm), lr_at(warm + 1e-9, peak, warm)
    if abs(lr_at(warm, peak, warm) - peak) > 1e-12 or abs(left - right) > 1e-12:
        return "lr_at discontinuous at the warmup boundary"
    for step in (10**6, 10**8, 10**10):
        if lr_at(step, peak, warm) < 0.1 * peak - 1e-18:
            return f"lr_at({step}) below the 0.1 floor"
    return None


def suite_curriculum(n: int = 50_000, tol: float = 0.02, seed: int = 0) -> str | None:
    for name in STRATEGIES:
        sched = CurriculumSchedule.named(name, 50)
        for stage in sched.stages:
            rng = np.random.default_rng([seed, stage.start])
            draws = curriculum_draw(sched, stage.start, rng, n)
            counts = np.array([(draws == s).sum() for s in SCENARIOS])
            freq = counts / n
            w = np.array(stage.weights)
            if np.abs(freq - w).max() > tol:
                return f"{name}/{stage.name}: frequencies {freq.round(4).tolist()} vs weights {w.tolist()}"
            if (counts[w == 0] != 0).any():
                return f"{name}/{stage.name}: zero-weight scenario drawn"
            live = w > 0
            if live.sum() > 1:
                p = stats.chisquare(counts[live], n * w[live] / w[live].sum()).pvalue
                if p < 1e-4:
                    return f"{name}/{stage.name}: chi-square p={p:.2g}"
    return None


def suite_scf(n_specs: int = 200, n_random: int = 1000, seed: int = 0) -> str | None:
    world = World.build(seed)
    embed = lambda i: world.embeddings[i]
    rng = np.random.default_rng(seed)
    for case in range(n_specs):
        spec = world.sample_prompt(SCENARIOS[case % 3], rng)
        got = scf(detect_events(world, world.render(spec)), [e for e, _ in spec.events], embed)
        if got != 1.0:
            return f"ground-truth render {case} ({spec.scenario}) scores SCF {got}"
    eye = np.eye(4)
    hand = scf([Detection(0, 0.5, 0, 3)], [0, 1], lambda i: eye[i])
    if abs(hand - 0.25) > 1e-12:
        return f"hand case gt=[A,B], det=[(A,0.5)] gives {hand}"
    for case in range(n_random):
        gt = list(rng.integers(0, world.n_items, size=int(rng.integers(1, 5))))
        dets = [Detection(int(rng.integers(0, world.n_items)), float(rng.random()), 0, 0)
                for _ in range(int(rng.integers(0, 8)))]
        v = scf(dets, gt, embed, ScfConfig(float(rng.random()), float(rng.random())))
        if not 0.0 <= v <= 1.0:
            return f"random set {case}: SCF {v} outside [0, 1]"
    return None


def suite_normalize() -> str | None:
    t = MetricTable()
    for s, v in zip("ABCD", (177, 217, 230, 319)):
        t.add(s, "COMPOSITE", "FD", v, LOWER)
    got = normalized_score(t, "COMPOSITE")
    want = {"A": 1.0, "B": 0.718, "C": 0.627, "D": 0.0}
    for s in want:
        if abs(got[s] - want[s]) > 1e-3:
            return f"normalized FD for {s}: {got[s]:.4f} != {want[s]}"
    t2 = MetricTable()
    t2.add("x", "SOUND", "scf", 0.4, HIGHER)
    t2.add("y", "SOUND", "scf", 0.4, HIGHER)
    if normalized_score(t2, "SOUND") != {"x": 0.5, "y": 0.5}:
        return "constant metric does not score 0.5"
    return None


SUITES: dict[str, Callable[..., str | None]] = {
    "numerics": suite_numerics,
    "layout": suite_layout,
    "losses": suite_losses,
    "schedule": suite_schedule,
    "curriculum": suite_curriculum,
    "scf": suite_scf,
    "normalize": suite_normalize,
}


def run_all(fault: str | None = None, out=print) -> list[tuple[str, str | None, float]]:
    results = []
    for name, fn in SUITES.items():
        t0 = time.perf_counter()
        try:
            err = fn(fault) if name == "numerics" else fn()
        except Exception as exc:  # a crash is a failure of that suite
            err = f"{type(exc).__name__}: {exc}"
        dt = time.perf_counter() - t0
        out(f"{'PASS' if err is None else 'FAIL'}  {name:<11s} {dt:7.2f}s" + ("" if err is None else f"  {err}"))
        results.append((name, err, dt))
    return results
