"""
Delayed multi-codebook interleaving and unified-sequence framing.

A token grid is an ``(N, Q)`` int array: N frames, Q codebook tokens each.
The delayed layout shifts codebook q (0-based) right by q steps, giving
``N + Q - 1`` steps whose triangular corners hold the pad id. An empty grid
encodes to zero steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics.tensor import ContractError

TEXT, LATENT, AUDIO, SPECIAL = 0, 1, 2, 3
TAG_NAMES = {TEXT: "TEXT", LATENT: "LATENT", AUDIO: "AUDIO", SPECIAL: "SPECIAL"}


class MalformedLayoutError(ValueError):
    def __init__(self, msg: str, step: int | None = None, channel: int | None = None):
        super().__init__(msg)
        self.step = step
        self.channel = channel


class MalformedSequenceError(ValueError):
    pass


def as_grid(tokens, q: int | None = None) -> np.ndarray:
    g = np.asarray(tokens, dtype=np.int64)
    if g.ndim == 1 and g.size == 0 and q is not None:
        g = g.reshape(0, q)
    if g.ndim != 2:
        raise ValueError(f"token grid must be 2-D (N, Q), got shape {g.shape}")
    return g


def delay_encode(grid, pad: int) -> np.ndarray:
    """(N, Q) grid -> (N+Q-1, Q) delayed frames; step t channel q holds grid[t-q, q]."""
    grid = as_grid(grid)
    n, q = grid.shape
    if n == 0:
        return np.zeros((0, q), dtype=np.int64)
    if np.any(grid == pad):
        raise ValueError(f"pad id {pad} appears inside the token grid")
    t = n + q - 1
    frames = np.full((t, q), pad, dtype=np.int64)
    for c in range(q):
        frames[c : c + n, c] = grid[:, c]
    return frames


def delay_decode(frames, q: int, pad: int) -> np.ndarray:
    """Exact inverse of :func:`delay_encode`.

    Raises MalformedLayoutError (with 1-based step/channel) if a pad sits in
    the interior or a real token sits in a corner.
    """
    frames = as_grid(frames, q)
    t = frames.shape[0]
    if frames.shape[1] != q:
        raise MalformedLayoutError(f"expected {q} channels, got {frames.shape[1]}")
    if t == 0:
        return np.zeros((0, q), dtype=np.int64)
    n = t - q + 1
    if n < 1:
        raise MalformedLayoutError(f"{t} steps is too short for {q} codebooks")
    steps = np.arange(t)[:, None] - np.arange(q)[None, :]
    corner = (steps < 0) | (steps >= n)
    is_pad = frames == pad
    bad = np.argwhere(corner != is_pad)
    if bad.size:
        ti, ci = (int(v) for v in bad[0])
        what = "real token in corner" if corner[ti, ci] else "pad in interior"
        raise MalformedLayoutError(f"{what} at step {ti + 1}, channel {ci + 1}", ti + 1, ci + 1)
    grid = np.empty((n, q), dtype=np.int64)
    for c in range(q):
        grid[:, c] = frames[c : c + n, c]
    return grid


def encoded_length(n: int, q: int) -> int:
    return 0 if n == 0 else n + q - 1


@dataclass(frozen=True)
class Markers:
    sot: int
    sol: int
    soa: int
    eoa: int

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.sot, self.sol, self.soa, self.eoa)


@dataclass
class UnifiedSequence:
    """[SOT, text, SOL, K latent slots, SOA, delayed frames, EOA] with per-position tags.

    ``ids`` holds the text-vocabulary id at TEXT/SPECIAL positions (-1 elsewhere),
    ``frames`` the Q-tuple at AUDIO positions (-1 elsewhere) and ``slot`` the
    0-based latent index at LATENT positions (-1 elsewhere).
    """

    tags: np.ndarray
    ids: np.ndarray
    frames: np.ndarray
    slot: np.ndarray

    def __len__(self) -> int:
        return int(self.tags.shape[0])

    @property
    def q(self) -> int:
        return int(self.frames.shape[1])

    def positions(self, tag: int) -> np.ndarray:
        return np.nonzero(self.tags == tag)[0]

    def marker_position(self, marker_id: int) -> int:
        hits = np.nonzero((self.tags == SPECIAL) & (self.ids == marker_id))[0]
        if hits.size != 1:
            raise MalformedSequenceError(f"expected exactly one marker {marker_id}, found {hits.size}")
        return int(hits[0])

    def delete(self, i: int) -> "UnifiedSequence":
        keep = np.arange(len(self)) != i
        return UnifiedSequence(self.tags[keep], self.ids[keep], self.frames[keep], self.slot[keep])

    def tag_histogram(self) -> tuple[int, int, int, int]:
        return tuple(int((self.tags == t).sum()) for t in (TEXT, LATENT, AUDIO, SPECIAL))


def frame_sequence(text, k: int, grid, markers: Markers, pad: int) -> UnifiedSequence:
    text = np.asarray(text, dtype=np.int64).reshape(-1)
    if k <= 0:
        raise ContractError(f"latent slot count must be >= 1, got {k}")
    if text.size == 0:
        raise ContractError("text must be nonempty")
    grid = as_grid(grid)
    q = grid.shape[1]
    frames = delay_encode(grid, pad)
    m, t = text.size, frames.shape[0]
    length = m + k + t + 4
    tags = np.empty(length, dtype=np.int8)
    ids = np.full(length, -1, dtype=np.int64)
    fr = np.full((length, q), -1, dtype=np.int64)
    slot = np.full(length, -1, dtype=np.int64)

    p = 0
    tags[p], ids[p] = SPECIAL, markers.sot
    p += 1
    tags[p : p + m], ids[p : p + m] = TEXT, text
    p += m
    tags[p], ids[p] = SPECIAL, markers.sol
    p += 1
    tags[p : p + k], slot[p : p + k] = LATENT, np.arange(k)
    p += k
    tags[p], ids[p] = SPECIAL, markers.soa
    p += 1
    tags[p : p + t], fr[p : p + t] = AUDIO, frames
    p += t
    tags[p], ids[p] = SPECIAL, markers.eoa
    return UnifiedSequence(tags, ids, fr, slot)


def split_sequence(s: UnifiedSequence, markers: Markers, pad: int, k: int | None = None):
    """Inverse of :func:`frame_sequence`: returns (text ids, latent slot count, grid)."""
    specials = s.positions(SPECIAL)
    found = [int(s.ids[i]) for i in specials]
    if found != list(markers.as_tuple()):
        raise MalformedSequenceError(f"markers {found} are not exactly [SOT, SOL, SOA, EOA] in order")
    sot, sol, soa, eoa = (int(i) for i in specials)
    if sot != 0 or eoa != len(s) - 1:
        raise MalformedSequenceError("sequence must start with SOT and end with EOA")
    if not np.all(s.tags[sot + 1 : sol] == TEXT) or sol - sot - 1 == 0:
        raise MalformedSequenceError("text segment missing or contains non-text positions")
    if not np.all(s.tags[sol + 1 : soa] == LATENT):
        raise MalformedSequenceError("latent segment contains non-latent positions")
    n_slots = soa - sol - 1
    if k is not None and n_slots != k:
        raise MalformedSequenceError(f"found {n_slots} latent slots, declared {k}")
    if n_slots < 1 or not np.array_equal(s.slot[sol + 1 : soa], np.arange(n_slots)):
        raise MalformedSequenceError("latent slots missing or out of order")
    if not np.all(s.tags[soa + 1 : eoa] == AUDIO):
        raise MalformedSequenceError("audio segment contains non-audio positions")
    text = s.ids[sot + 1 : sol].copy()
    try:
        grid = delay_decode(s.frames[soa + 1 : eoa], s.q, pad)
    except MalformedLayoutError as exc:
        raise MalformedSequenceError(f"audio segment: {exc}") from exc
    return text, n_slots, grid
