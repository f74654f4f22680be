"""
Two-phase generation.

Phase 1 runs K deterministic latent steps: the projected state at the
current position is recorded and fed into the next latent slot through the
input adapter. Phase 2 appends SOA and samples one delayed frame step at a
time, each codebook independently with top-k sampling, until codebook 1
emits EOA or the step budget runs out.

With ``constrain_layout`` the delay pattern is enforced while sampling:
corner positions are forced to PAD, interior positions may not sample PAD,
and once codebook 1 emits its first PAD the closing triangle and the EOA
step are filled in deterministically. Every trace then decodes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .layout import AUDIO, LATENT, SPECIAL, TEXT, Markers, MalformedLayoutError, UnifiedSequence, delay_decode
from .model import Model, collate
from .numerics import no_grad
from .seeds import SEED_GENERATE

EOA, MAX_LEN = "EOA", "MAX_LEN"


@dataclass
class GenConfig:
    top_k: int = 8
    temperature: float = 1.0
    max_frames: int = 96
    seed: int = 0
    constrain_layout: bool = True  # force corner pads and the EOA step, mask illegal classes elsewhere

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


@dataclass
class GenTrace:
    text: list[int]
    latents: np.ndarray  # (K, d_sem)
    frames: np.ndarray  # (T, Q) delayed steps, PAD included
    termination: str
    probs: np.ndarray  # (T, Q) renormalized probability of each chosen token
    ranks: np.ndarray  # (T, Q) rank of each chosen token among the classes it was sampled from (0 = best)
    seed: int
    eoa_prob: float | None = None
    events: list[str] = field(default_factory=list)  # phase log, e.g. ["latent", ..., "soa", "frame", ...]

    def to_json(self) -> dict:
        return {
            "text": list(self.text),
            "latents": self.latents.tolist(),
            "frames": self.frames.tolist(),
            "termination": self.termination,
            "seed": self.seed,
            "probs": self.probs.tolist(),
        }


def top_k_sample(logits, k: int, temperature: float, rng: np.random.Generator) -> tuple[int, float]:
    """Sample from the softmax (at ``temperature``) restricted to the k largest logits.

    Ties at the k-th place are broken toward the lower index. Returns the
    token and its renormalized probability.
    """
    logits = np.asarray(logits, dtype=np.float64)
    v = logits.shape[0]
    if not 1 <= k <= v:
        raise ValueError(f"k={k} outside [1, {v}]")
    top = np.argsort(-logits, kind="stable")[:k]
    z = logits[top] / temperature
    p = np.exp(z - z.max())
    p /= p.sum()
    i = int(np.searchsorted(np.cumsum(p), rng.random() * 1.0, side="right"))
    i = min(i, k - 1)
    return int(top[i]), float(p[i])


def _prefix(markers: Markers, text, q: int) -> UnifiedSequence:
    text = np.asarray(text, dtype=np.int64)
    m = text.size
    tags = np.concatenate([[SPECIAL], np.full(m, TEXT), [SPECIAL]]).astype(np.int8)
    ids = np.concatenate([[markers.sot], text, [markers.sol]]).astype(np.int64)
    return UnifiedSequence(tags, ids, np.full((m + 2, q), -1, dtype=np.int64), np.full(m + 2, -1, dtype=np.int64))


def _append(s: UnifiedSequence, tag: int, ident: int = -1, frame=None, slot: int = -1) -> UnifiedSequence:
    q = s.frames.shape[1]
    fr = np.full((1, q), -1, dtype=np.int64) if frame is None else np.asarray(frame, dtype=np.int64)[None, :]
    return UnifiedSequence(
        np.append(s.tags, np.int8(tag)), np.append(s.ids, ident), np.vstack([s.frames, fr]), np.append(s.slot, slot)
    )


def _last_hidden(model: Model, seqs: list[UnifiedSequence], latents: list[np.ndarray]) -> np.ndarray:
    """Final-layer state at the last position of each sequence, (B, d_model)."""
    with no_grad():
        batch = collate(seqs, latents, model.cfg)
        out = model.forward_batch(batch)
    t = batch.text_idx.shape[1]
    rows = np.arange(len(seqs)) * t + batch.lengths - 1
    return out.hidden.data[rows]


def _allowed(c: int, t: int, n_end: int | None, q: int, v: int):
    """Legal classes for codebook ``c`` at delayed step ``t``; None means the pad is forced."""
    if t < c or (n_end is not None and t - c >= n_end):
        return None
    if c > 0:
        return range(v)
    extra = []
    if t == 0 or q == 1:
        extra.append(v + 1)  # EOA: empty grid, or no trailing triangle to wait for
    if t > 0 and q > 1:
        extra.append(v)  # first pad on codebook 1 starts the closing triangle
    return list(range(v)) + extra


def generate_batch(model: Model, markers: Markers, texts: list, gen: GenConfig, seeds: list[int] | None = None) -> list[GenTrace]:
    """Generate for several prompts at once; each prompt gets its own rng stream."""
    cfg = model.cfg
    k, q = cfg.k, cfg.q
    b = len(texts)
    seeds = [gen.seed] * b if seeds is None else list(seeds)
    rngs = [np.random.default_rng(np.random.SeedSequence([s, SEED_GENERATE])) for s in seeds]
    max_steps = gen.max_frames + q - 1
    for t in texts:
        need = len(t) + k + max_steps + 4
        if need > cfg.max_positions:
            raise nx.ContractError(
                f"prompt of {len(t)} tokens needs {need} positions > max_positions={cfg.max_positions}"
            )
        bad = [int(x) for x in t if not 0 <= int(x) < cfg.v_text]
        if bad:
            raise IndexError(f"prompt token ids out of vocabulary: {bad}")

    seqs = [_prefix(markers, t, q) for t in texts]
    lat = [np.zeros((k, cfg.d_sem)) for _ in range(b)]
    logs: list[list[str]] = [[] for _ in range(b)]
    p = model.params
    for j in range(k):
        h = _last_hidden(model, seqs, lat)
        z = h @ p["phi.w"].data + p["phi.b"].data
        for i in range(b):
            lat[i][j] = z[i]
            seqs[i] = _append(seqs[i], LATENT, slot=j)
            logs[i].append("latent")
    for i in range(b):
        seqs[i] = _append(seqs[i], SPECIAL, ident=markers.soa)
        logs[i].append("soa")

    frames = [[] for _ in range(b)]
    probs = [[] for _ in range(b)]
    ranks = [[] for _ in range(b)]
    term = [None] * b
    eoa_p = [None] * b
    n_end: list[int | None] = [None] * b  # grid length once codebook 1 has emitted its first pad
    budget = [False] * b
    active = list(range(b))
    n_tok = cfg.v_audio + 1
    pad, eoa = cfg.pad, cfg.eoa_class
    while active:
        h = _last_hidden(model, [seqs[i] for i in active], [lat[i] for i in active])
        logits = (h @ p["heads.w"].data + p["heads.b"].data).reshape(len(active), q, cfg.n_classes)
        still = []
        for r, i in enumerate(active):
            t = len(frames[i])
            if gen.constrain_layout:
                if n_end[i] is None and t == gen.max_frames:
                    n_end[i], budget[i] = t, True
                if n_end[i] is not None and t == n_end[i] + q - 1:
                    term[i] = MAX_LEN if budget[i] else EOA
                    eoa_p[i] = None if budget[i] else 1.0
                    logs[i].append("eoa")
                    continue
            row, pr, rk = [], [], []
            for c in range(q):
                head = logits[r, c] if c == 0 else logits[r, c, :n_tok]
                if gen.constrain_layout:
                    allowed = _allowed(c, t, n_end[i], q, cfg.v_audio)
                    if allowed is None:
                        row.append(pad)
                        pr.append(1.0)
                        rk.append(0)
                        continue
                    masked = np.full(head.shape, -np.inf)
                    idx = [a for a in allowed if a < head.shape[0]]
                    masked[idx] = head[idx]
                    head = masked
                    kk = min(gen.top_k, len(idx))
                else:
                    kk = min(gen.top_k, head.shape[0])
                tok, prob = top_k_sample(head, kk, gen.temperature, rngs[i])
                if c == 0 and tok == eoa:
                    pr.append(prob)
                    break
                row.append(tok)
                pr.append(prob)
                rk.append(int((head > head[tok]).sum()))
            if len(row) < q:
                term[i], eoa_p[i] = EOA, pr[0] if pr else None
                logs[i].append("eoa")
                continue
            if gen.constrain_layout and n_end[i] is None and row[0] == pad:
                n_end[i] = t
            frames[i].append(row)
            probs[i].append(pr)
            ranks[i].append(rk)
            seqs[i] = _append(seqs[i], AUDIO, frame=row)
            logs[i].append("frame")
            if not gen.constrain_layout and len(frames[i]) >= max_steps:
                term[i] = MAX_LEN
            else:
                still.append(i)
        active = still

    return [
        GenTrace(
            list(map(int, texts[i])),
            lat[i],
            np.array(frames[i], dtype=np.int64).reshape(-1, q),
            term[i],
            np.array(probs[i]).reshape(-1, q),
            np.array(ranks[i], dtype=np.int64).reshape(-1, q),
            seeds[i],
            eoa_p[i],
            logs[i],
        )
        for i in range(b)
    ]


def generate(model: Model, markers: Markers, text, gen: GenConfig) -> GenTrace:
    return generate_batch(model, markers, [list(text)], gen)[0]


def decode_output(trace: GenTrace, q: int, pad: int, repair: bool = True) -> tuple[np.ndarray, int]:
    """Token grid from a trace plus the number of frames dropped by truncation repair."""
    frames = trace.frames
    if trace.termination == EOA:
        return delay_decode(frames, q, pad), 0
    if not repair:
        raise MalformedLayoutError("trace ended at MAX_LEN and repair is disabled")
    t = frames.shape[0]
    ch1 = frames[:, 0]
    pads = np.nonzero(ch1 == pad)[0]
    n_real = int(pads[0]) if pads.size else t
    n = max(0, min(n_real, t - q + 1))
    if n == 0:
        return np.zeros((0, q), dtype=np.int64), n_real
    kept = frames[: n + q - 1].copy()
    steps = np.arange(n + q - 1)[:, None] - np.arange(q)[None, :]
    kept[steps >= n] = pad
    return delay_decode(kept, q, pad), n_real - n


def write_trace(path, trace: GenTrace) -> None:
    with open(path, "w") as fh:
        json.dump(trace.to_json(), fh)
