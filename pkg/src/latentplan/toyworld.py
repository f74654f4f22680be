"""
Synthetic, exactly invertible audio world.

Items are sound events, a reserved "clean" background, and lexicon words.
Each item type owns a fixed motif: a short run of frames whose Q-token
tuples come from a keyed hash of (item, frame index, codebook). The world
build re-keys the hash until every tuple in the motif table is distinct,
so any rendered frame maps back to exactly one (item, frame index).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layout import Markers
from .seeds import SEED_WORLD

SOUND, SPEECH, COMPOSITE = "SOUND", "SPEECH", "COMPOSITE"
SCENARIOS = (SOUND, SPEECH, COMPOSITE)

EVENT_NAMES = (
    "dog", "bell", "rain", "car", "door", "bird", "horn", "drum",
    "siren", "clock", "glass", "train", "thunder", "water", "wind", "cat",
)

SOUND_TEMPLATES = (
    "{ev}",
    "the sound of {ev}",
    "we hear {ev}",
    "a recording of {ev}",
    "{ev} in the background",
)
SPEECH_TEMPLATES = (
    "a person says {p}",
    "someone says {p} clearly",
    "a voice in a quiet room says {p}",
    "{p} says a speaker",
    "a speaker says {p} with no background",
)
COMPOSITE_TEMPLATES = (
    "{ev} {c} a person says {p}",
    "we hear {ev} {c} someone says {p}",
    "the sound of {ev} {c} a voice says {p}",
    "{ev} {c} a speaker says {p} clearly",
    "a recording of {ev} {c} someone says {p}",
)
TEMPLATES = {SOUND: SOUND_TEMPLATES, SPEECH: SPEECH_TEMPLATES, COMPOSITE: COMPOSITE_TEMPLATES}
QUOTE_OPEN, QUOTE_CLOSE = "<q>", "</q>"
MARKER_TOKENS = ("<|sot|>", "<|sol|>", "<|soa|>", "<|eoa|>")

OVERLAP_EVENTS_P = 0.3
OVERLAP_SPEECH_P = 0.5


class WorldBuildError(RuntimeError):
    pass


class InversionError(ValueError):
    pass


@dataclass
class PromptSpec:
    scenario: str
    events: list[tuple[int, int]]  # (item id, duration in frames)
    payload: list[int]  # word ids in [0, W)
    overlaps: list[bool]  # one flag per adjacent pair of rendered items

    def to_json(self) -> dict:
        return {
            "scenario": self.scenario,
            "events": [list(e) for e in self.events],
            "payload": list(self.payload),
            "overlaps": list(self.overlaps),
        }

    @classmethod
    def from_json(cls, d: dict) -> "PromptSpec":
        return cls(d["scenario"], [tuple(e) for e in d["events"]], list(d["payload"]), list(d["overlaps"]))


@dataclass(frozen=True)
class Detection:
    label: int  # item id
    confidence: float
    start: int  # first frame index (0-based, inclusive)
    end: int  # last frame index (inclusive)


def _hash_token(key: int, item: int, j: int, q: int, v: int) -> int:
    h = hashlib.blake2b(f"{item}:{j}:{q}".encode(), digest_size=8, key=key.to_bytes(8, "little"))
    return int.from_bytes(h.digest(), "little") % v


@dataclass
class World:
    seed: int
    hash_key: int
    n_events: int
    n_words: int
    v_audio: int
    q: int
    d_sem: int
    k: int
    max_frames: int
    durations: np.ndarray  # (n_items,)
    embeddings: np.ndarray  # (n_items, d_sem), unit rows
    text_vocab: list[str]
    motifs: list[np.ndarray] = field(repr=False, default_factory=list)
    lookup: dict[tuple, tuple[int, int]] = field(repr=False, default_factory=dict)

    # item id layout: events [0, E), clean E, words [E+1, E+1+W)
    @property
    def clean_id(self) -> int:
        return self.n_events

    @property
    def n_items(self) -> int:
        return self.n_events + 1 + self.n_words

    def word_item(self, w: int) -> int:
        return self.n_events + 1 + w

    def is_word(self, item: int) -> bool:
        return item > self.n_events

    def item_name(self, item: int) -> str:
        if item < self.n_events:
            return EVENT_NAMES[item] if item < len(EVENT_NAMES) else f"ev{item}"
        if item == self.n_events:
            return "clean"
        return f"w{item - self.n_events - 1}"

    @property
    def pad(self) -> int:
        return self.v_audio

    @property
    def v_text(self) -> int:
        return len(self.text_vocab)

    @property
    def markers(self) -> Markers:
        n = len(self.text_vocab)
        return Markers(n - 4, n - 3, n - 2, n - 1)

    @property
    def token_to_id(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.text_vocab)}

    # ------------------------------------------------------------------ build

    @classmethod
    def build(
        cls,
        seed: int = 0,
        n_events: int = 16,
        n_words: int = 32,
        v_audio: int = 64,
        q: int = 4,
        d_sem: int = 32,
        k: int = 6,
        max_frames: int = 96,
    ) -> "World":
        rng = np.random.default_rng(np.random.SeedSequence([seed, SEED_WORLD]))
        n_items = n_events + 1 + n_words
        durations = np.empty(n_items, dtype=np.int64)
        durations[:n_events] = rng.integers(4, 13, size=n_events)
        durations[n_events] = 4
        durations[n_events + 1 :] = rng.integers(4, 9, size=n_words)
        embeddings = _spread_unit_vectors(n_items, d_sem, rng)

        names = [EVENT_NAMES[i] if i < len(EVENT_NAMES) else f"ev{i}" for i in range(n_events)]
        filler: list[str] = []
        for group in TEMPLATES.values():
            for t in group:
                for tok in t.split():
                    if not tok.startswith("{") and tok not in filler:
                        filler.append(tok)
        vocab = filler + ["then", "while", QUOTE_OPEN, QUOTE_CLOSE] + names
        vocab += [f"w{i}" for i in range(n_words)] + list(MARKER_TOKENS)
        if len(set(vocab)) != len(vocab):
            raise WorldBuildError("text vocabulary has duplicate tokens")

        world = cls(seed, 0, n_events, n_words, v_audio, q, d_sem, k, max_frames, durations, embeddings, vocab)
        for _ in range(1000):
            key = int(rng.integers(0, 2**63 - 1))
            if world._install_motifs(key):
                return world
        raise WorldBuildError("no injective hash key found within 1000 tries")

    def _install_motifs(self, key: int) -> bool:
        motifs, lookup = [], {}
        for item in range(self.n_items):
            m = np.array(
                [[_hash_token(key, item, j, c, self.v_audio) for c in range(self.q)] for j in range(self.durations[item])],
                dtype=np.int64,
            )
            for j, row in enumerate(m):
                t = tuple(int(v) for v in row)
                if t in lookup:
                    return False
                lookup[t] = (item, j)
            motifs.append(m)
        self.hash_key, self.motifs, self.lookup = key, motifs, lookup
        return True

    # --------------------------------------------------------------- serialize

    def to_json(self) -> dict:
        return {
            "format": "latentplan-world/1",
            "seed": self.seed,
            "hash_key": self.hash_key,
            "n_events": self.n_events,
            "n_words": self.n_words,
            "v_audio": self.v_audio,
            "q": self.q,
            "d_sem": self.d_sem,
            "k": self.k,
            "max_frames": self.max_frames,
            "durations": self.durations.tolist(),
            "text_vocab": self.text_vocab,
            "item_names": [self.item_name(i) for i in range(self.n_items)],
            "embeddings": self.embeddings.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "World":
        w = cls(
            d["seed"], d["hash_key"], d["n_events"], d["n_words"], d["v_audio"], d["q"], d["d_sem"], d["k"],
            d["max_frames"], np.array(d["durations"], dtype=np.int64), np.array(d["embeddings"], dtype=np.float64),
            list(d["text_vocab"]),
        )
        if not w._install_motifs(d["hash_key"]):
            raise WorldBuildError("stored hash key does not give an injective motif table")
        return w

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "World":
        return cls.from_json(json.loads(Path(path).read_text()))

    # -------------------------------------------------------------- operations

    def items_of(self, spec: PromptSpec) -> list[int]:
        return [e for e, _ in spec.events] + [self.word_item(w) for w in spec.payload]

    def sample_prompt(self, scenario: str, rng: np.random.Generator) -> PromptSpec:
        return sample_prompt(self, scenario, rng)

    def render(self, spec: PromptSpec) -> np.ndarray:
        return render(self, spec)


def _spread_unit_vectors(n: int, d: int, rng: np.random.Generator, max_cos: float = 0.45) -> np.ndarray:
    """n random unit vectors with pairwise |cosine| below max_cos (rejection sampling)."""
    out = np.empty((n, d))
    for i in range(n):
        for _ in range(10000):
            v = rng.standard_normal(d)
            v /= np.linalg.norm(v)
            if i == 0 or np.abs(out[:i] @ v).max() < max_cos:
                out[i] = v
                break
        else:
            raise WorldBuildError(f"could not place embedding {i} with |cos| < {max_cos}")
    return out


def total_frames(world: World, spec: PromptSpec) -> int:
    return int(sum(world.durations[i] for i in world.items_of(spec)))


def sample_prompt(world: World, scenario: str, rng: np.random.Generator) -> PromptSpec:
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    dur = world.durations
    if scenario == SPEECH:
        events = [(world.clean_id, int(dur[world.clean_id]))]
    else:
        n_ev = int(rng.integers(1, 4))
        ids = rng.choice(world.n_events, size=n_ev, replace=False)
        events = [(int(e), int(dur[e])) for e in ids]
    payload: list[int] = []
    if scenario in (SPEECH, COMPOSITE):
        payload = [int(w) for w in rng.integers(0, world.n_words, size=int(rng.integers(2, 7)))]

    spec = PromptSpec(scenario, events, payload, [])
    while total_frames(world, spec) > world.max_frames:
        if len(spec.payload) > 1:
            spec.payload.pop()
        elif len(spec.events) > 1:
            spec.events.pop()
        else:
            break

    flags = []
    n_ev = len(spec.events)
    for i in range(n_ev + len(spec.payload) - 1):
        if scenario == SPEECH or i >= n_ev:
            flags.append(False)
        elif i < n_ev - 1:
            flags.append(bool(rng.random() < OVERLAP_EVENTS_P))
        else:
            flags.append(bool(rng.random() < OVERLAP_SPEECH_P))
    spec.overlaps = flags
    return spec


def frame_items(world: World, spec: PromptSpec) -> list[tuple[int, int]]:
    """(item, motif index) for every rendered frame, in order.

    Overlapping neighbours share a region of min(d_a, d_b)//2 frames from each
    side, interleaved a, b, a, b; every motif frame is still present once.
    """
    items = world.items_of(spec)
    if len(spec.overlaps) != max(len(items) - 1, 0):
        raise ValueError("overlap flag count must equal number of adjacent item pairs")
    out: list[tuple[int, int]] = []
    held: list[tuple[int, int]] = []
    for m, item in enumerate(items):
        d = int(world.durations[item])
        cur = [(item, j) for j in range(d)]
        o_next = 0
        if m + 1 < len(items) and spec.overlaps[m]:
            o_next = min(d, int(world.durations[items[m + 1]])) // 2
        for a, b in zip(held, cur[: len(held)]):
            out.append(a)
            out.append(b)
        out.extend(cur[len(held) : d - o_next])
        held = cur[d - o_next :]
    out.extend(held)
    return out


def render(world: World, spec: PromptSpec) -> np.ndarray:
    """Token grid (N, Q) for a prompt spec."""
    frames = frame_items(world, spec)
    if not frames:
        return np.zeros((0, world.q), dtype=np.int64)
    return np.stack([world.motifs[i][j] for i, j in frames]).astype(np.int64)


def _events_phrase(world: World, spec: PromptSpec) -> list[str]:
    words: list[str] = []
    for i, (e, _) in enumerate(spec.events):
        if i:
            words.append("while" if spec.overlaps[i - 1] else "then")
        words.append(world.item_name(e))
    return words


def realize_text_tokens(world: World, spec: PromptSpec, rng: np.random.Generator) -> list[str]:
    templates = TEMPLATES[spec.scenario]
    template = templates[int(rng.integers(0, len(templates)))]
    quote = [QUOTE_OPEN] + [f"w{w}" for w in spec.payload] + [QUOTE_CLOSE]
    n_ev = len(spec.events)
    conn = ""
    if spec.scenario == COMPOSITE:
        conn = "while" if spec.overlaps[n_ev - 1] else "then"
    out: list[str] = []
    for tok in template.split():
        if tok == "{ev}":
            out.extend(_events_phrase(world, spec))
        elif tok == "{p}":
            out.extend(quote)
        elif tok == "{c}":
            out.append(conn)
        else:
            out.append(tok)
    return out


def realize_text(world: World, spec: PromptSpec, rng: np.random.Generator) -> list[int]:
    """Text token ids for a spec (whitespace tokens looked up in the world vocabulary)."""
    return tokenize(world, " ".join(realize_text_tokens(world, spec, rng)))


def tokenize(world: World, text: str) -> list[int]:
    table = world.token_to_id
    missing = [t for t in text.split() if t not in table]
    if missing:
        raise KeyError(f"tokens not in text vocabulary: {missing}")
    return [table[t] for t in text.split()]


def detokenize(world: World, ids) -> str:
    return " ".join(world.text_vocab[int(i)] for i in ids)


def invert_frames(world: World, grid) -> list[tuple[int, int] | None]:
    """(item, motif index) per frame, or None for tuples outside the motif table."""
    return [world.lookup.get(tuple(int(v) for v in row)) for row in np.asarray(grid)]


def oracle_embed(world: World, grid, k: int | None = None) -> np.ndarray:
    """K x d_sem pooled semantic targets: mean of per-frame item embeddings over K segments."""
    k = world.k if k is None else k
    grid = np.asarray(grid, dtype=np.int64).reshape(-1, world.q)
    n = grid.shape[0]
    per_frame = np.empty((n, world.d_sem))
    for p, hit in enumerate(invert_frames(world, grid)):
        if hit is None:
            raise InversionError(f"frame {p} tuple {tuple(grid[p])} is not in the motif table")
        per_frame[p] = world.embeddings[hit[0]]
    h = np.zeros((k, world.d_sem))
    bounds = [(i * n) // k for i in range(k + 1)]
    for i in range(k):
        a, b = bounds[i], bounds[i + 1]
        if b > a:
            h[i] = per_frame[a:b].mean(axis=0)
    return h


def detect_events(world: World, grid) -> list[Detection]:
    """Group invertible frames into item detections ordered by start frame.

    A frame joins an open group of the same item when its motif index is 1 or
    2 past the group's last index and at most one frame lies between them;
    this absorbs overlap alternation and single-frame dropouts.
    """
    open_groups: list[dict] = []
    done: list[dict] = []
    for p, hit in enumerate(invert_frames(world, grid)):
        still = []
        for g in open_groups:
            (done if p - g["last_p"] > 2 else still).append(g)
        open_groups = still
        if hit is None:
            continue
        item, j = hit
        target = None
        for g in open_groups:
            if g["item"] == item and 0 < j - g["last_j"] <= 2:
                target = g
                break
        if target is None:
            open_groups.append({"item": item, "start": p, "last_p": p, "last_j": j, "idx": {j}})
        else:
            target["last_p"], target["last_j"] = p, j
            target["idx"].add(j)
    done.extend(open_groups)
    dets = [
        Detection(
            label=g["item"],
            confidence=min(1.0, len(g["idx"]) / float(world.durations[g["item"]])),
            start=g["start"],
            end=g["last_p"],
        )
        for g in done
    ]
    dets.sort(key=lambda d: (d.start, d.end))
    return dets


def extract_payload(world: World, grid) -> list[int]:
    """Word ids of word-type detections in order of first frame."""
    return [d.label - world.n_events - 1 for d in detect_events(world, grid) if world.is_word(d.label)]


# -----------------------------------------------------------------------------
# dataset files
# -----------------------------------------------------------------------------


@dataclass
class Record:
    id: str
    scenario: str
    text: list[int]
    spec: PromptSpec
    grid: np.ndarray
    semantic: np.ndarray

    def to_json(self) -> dict:
        n, q = self.grid.shape
        return {
            "id": self.id,
            "scenario": self.scenario,
            "text_token_ids": list(self.text),
            "prompt_spec": self.spec.to_json(),
            "grid": {"N": n, "Q": q, "tokens": self.grid.reshape(-1).tolist()},
            "semantic": self.semantic.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Record":
        g = d["grid"]
        grid = np.array(g["tokens"], dtype=np.int64).reshape(g["N"], g["Q"])
        return cls(
            d["id"], d["scenario"], list(d["text_token_ids"]), PromptSpec.from_json(d["prompt_spec"]), grid,
            np.array(d["semantic"], dtype=np.float64),
        )


def make_record(world: World, scenario: str, rng: np.random.Generator, rid: str) -> Record:
    spec = sample_prompt(world, scenario, rng)
    text = realize_text(world, spec, rng)
    grid = render(world, spec)
    return Record(rid, scenario, text, spec, grid, oracle_embed(world, grid))


def make_split(world: World, counts: dict[str, int], seed: int, prefix: str) -> list[Record]:
    rng = np.random.default_rng(np.random.SeedSequence([world.seed, seed]))
    out = []
    for scenario in SCENARIOS:
        for i in range(counts.get(scenario, 0)):
            out.append(make_record(world, scenario, rng, f"{prefix}-{scenario.lower()}-{i:05d}"))
    return out


RECORDS_FORMAT = "latentplan-records/1"


def record_lines(records: list[Record]) -> list[str]:
    return [json.dumps(r.to_json(), separators=(",", ":"), sort_keys=True) for r in records]


def write_records(path, records: list[Record], header: dict | None = None) -> None:
    """JSONL: one header object ({"format", "count", ...}) then one record per line."""
    head = {"format": RECORDS_FORMAT, "count": len(records), **(header or {})}
    with open(path, "w") as fh:
        fh.write(json.dumps(head, sort_keys=True) + "\n")
        for line in record_lines(records):
            fh.write(line + "\n")


def read_records(path) -> list[Record]:
    with open(path) as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        raise ValueError(f"{path}: empty file, expected a header line")
    head = json.loads(lines[0])
    if head.get("format") != RECORDS_FORMAT:
        raise ValueError(f"{path}: not a {RECORDS_FORMAT} file")
    recs = [Record.from_json(json.loads(line)) for line in lines[1:]]
    if len(recs) != head["count"]:
        raise ValueError(f"{path}: header says {head['count']} records, found {len(recs)}")
    return recs
