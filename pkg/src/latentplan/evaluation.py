"""
Metrics on generated grids and the per-scenario normalized-score aggregation.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import kernels
from . import numerics as nx
from .inference import GenConfig, decode_output, generate_batch
from .layout import MalformedLayoutError
from .model import Model
from .numerics import no_grad
from .toyworld import COMPOSITE, SCENARIOS, SOUND, SPEECH, Detection, Record, World, detect_events, extract_payload
from .training import make_batch

HIGHER, LOWER = "higher", "lower"
UNAVAILABLE = ("FAD", "FD", "KL", "IS", "CLAP", "UTMOS")


@dataclass
class ScfConfig:
    sim_threshold: float = 0.5
    conf_floor: float = 0.1

    def __post_init__(self):
        if not (0 <= self.sim_threshold <= 1 and 0 <= self.conf_floor <= 1):
            raise ValueError("SCF thresholds must lie in [0, 1]")


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    if np.array_equal(a, b):
        return 1.0
    na, nb = max(np.linalg.norm(a), nx.tensor.COS_EPS), max(np.linalg.norm(b), nx.tensor.COS_EPS)
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def scf(
    detections: Sequence[Detection | tuple],
    gt_events: Sequence,
    embed_fn: Callable[[object], np.ndarray],
    cfg: ScfConfig = ScfConfig(),
) -> float:
    """Semantic coverage of ground-truth events by detections, in [0, 1].

    Detections below ``conf_floor`` are dropped. A pair (gt, det) is eligible
    when the cosine similarity of their embeddings exceeds ``sim_threshold``
    and is worth similarity x confidence. Each gt and each detection is used
    at most once; the one-to-one assignment maximizing the total is taken, and
    the total is divided by the number of gt events.
    """
    if len(gt_events) == 0:
        raise nx.ContractError("SCF is undefined for an empty ground-truth event list")
    dets = [(d.label, d.confidence) if isinstance(d, Detection) else (d[0], float(d[1])) for d in detections]
    dets = [(lab, c) for lab, c in dets if c >= cfg.conf_floor]
    if not dets:
        return 0.0
    w = np.zeros((len(gt_events), len(dets)))
    for i, g in enumerate(gt_events):
        eg = embed_fn(g)
        for j, (lab, c) in enumerate(dets):
            s = _cos(eg, embed_fn(lab))
            if s > cfg.sim_threshold:
                w[i, j] = s * min(c, 1.0)
    rows, cols = linear_sum_assignment(w, maximize=True)
    return float(w[rows, cols].sum() / len(gt_events))


def payload_wer(hyp: Sequence[int], ref: Sequence[int]) -> float:
    """Unit-cost edit distance divided by the reference length."""
    if len(ref) == 0:
        raise nx.ContractError("WER is undefined for an empty reference")
    return kernels.levenshtein(list(hyp), list(ref)) / len(ref)


def latent_fidelity(pred, target) -> float:
    """Mean per-step cosine between predicted and target semantic vectors."""
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise nx.ShapeError(f"latent_fidelity shape mismatch: {pred.shape} vs {target.shape}")
    with no_grad():
        return float(nx.rowwise_cosine(pred, target).data.mean())


# -----------------------------------------------------------------------------
# normalized score
# -----------------------------------------------------------------------------


@dataclass
class MetricTable:
    values: dict[tuple[str, str, str], float] = field(default_factory=dict)
    orientation: dict[str, str] = field(default_factory=dict)

    def add(self, strategy: str, scenario: str, metric: str, value: float, orient: str | None = None) -> None:
        if orient is not None:
            self.orientation[metric] = orient
        if metric not in self.orientation:
            raise ValueError(f"metric {metric!r} has no declared orientation")
        self.values[(strategy, scenario, metric)] = float(value)

    def strategies(self) -> list[str]:
        return sorted({k[0] for k in self.values})


def normalized_score(table: MetricTable, scenario: str) -> dict[str, float]:
    """Per strategy, the mean over metrics of min-max normalized values (1 = best)."""
    rows = {k: v for k, v in table.values.items() if k[1] == scenario}
    if not rows:
        raise KeyError(f"scenario {scenario!r} not in table")
    strategies = sorted({k[0] for k in rows})
    metrics = sorted({k[2] for k in rows})
    totals = {s: [] for s in strategies}
    for m in metrics:
        vals = {s: rows[(s, scenario, m)] for s in strategies if (s, scenario, m) in rows}
        lo, hi = min(vals.values()), max(vals.values())
        for s, v in vals.items():
            if hi == lo:
                x = 0.5
            elif table.orientation[m] == HIGHER:
                x = (v - lo) / (hi - lo)
            else:
                x = (hi - v) / (hi - lo)
            totals[s].append(x)
    return {s: float(np.mean(v)) for s, v in totals.items() if v}


# -----------------------------------------------------------------------------
# evaluation over a split
# -----------------------------------------------------------------------------


def token_accuracy(model: Model, world: World, recs: list[Record]) -> list[float]:
    """Teacher-forced argmax accuracy over every supervised (step, codebook) entry, per record."""
    out = []
    with no_grad():
        batch = make_batch(world, model, recs)
        o = model.forward_batch(batch)
    pred = o.audio_logits.data.argmax(axis=-1)
    tgt = batch.audio_targets
    valid = tgt >= 0
    hit = (pred == tgt) & valid
    for b in range(len(recs)):
        rows = batch.audio_owner == b
        out.append(float(hit[rows].sum() / max(valid[rows].sum(), 1)))
    return out


def score_grid(world: World, record: Record, grid, scf_cfg: ScfConfig = ScfConfig()) -> dict:
    """SCF (and payload WER when the prompt has one) of a decoded grid against a record's prompt."""
    grid = np.asarray(grid)
    embed = lambda item: world.embeddings[item]
    out = {"scf": scf(detect_events(world, grid), [e for e, _ in record.spec.events], embed, scf_cfg)}
    if record.spec.payload:
        out["wer"] = payload_wer(extract_payload(world, grid), record.spec.payload)
    out["n_frames"] = int(grid.shape[0])
    return out


def evaluate_records(
    model: Model,
    world: World,
    records: list[Record],
    gen: GenConfig,
    scf_cfg: ScfConfig = ScfConfig(),
    batch_size: int = 32,
) -> list[dict]:
    """Per-record metrics: SCF, payload WER, token accuracy, latent fidelity."""
    rows = []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        seeds = [gen.seed * 1_000_003 + start + i for i in range(len(chunk))]
        traces = generate_batch(model, world.markers, [r.text for r in chunk], gen, seeds)
        accs = token_accuracy(model, world, chunk)
        for r, tr, acc in zip(chunk, traces, accs):
            row = {"id": r.id, "scenario": r.scenario, "termination": tr.termination, "token_acc": acc}
            try:
                grid, dropped = decode_output(tr, world.q, world.pad)
                row["undecodable"] = False
                row["dropped"] = dropped
            except MalformedLayoutError as exc:
                grid = None
                row["undecodable"] = True
                row["error"] = str(exc)
            if grid is None:
                row["scf"] = 0.0
                if r.spec.payload:
                    row["wer"] = 1.0
            else:
                row.update(score_grid(world, r, grid, scf_cfg))
            row["latent_fidelity"] = latent_fidelity(tr.latents, r.semantic)
            rows.append(row)
    return rows


def summarize(rows: list[dict]) -> dict:
    out = {}
    for s in SCENARIOS:
        rs = [r for r in rows if r["scenario"] == s]
        if not rs:
            continue
        block = {"count": len(rs), "undecodable": int(sum(r["undecodable"] for r in rs))}
        for key in ("scf", "wer", "token_acc", "latent_fidelity"):
            vals = [r[key] for r in rs if key in r]
            if vals:
                block[key] = float(np.mean(vals))
        for m in UNAVAILABLE:
            block[m] = None
        out[s] = block
    return out


def evaluate(model: Model, world: World, records: list[Record], gen: GenConfig, scf_cfg: ScfConfig = ScfConfig()) -> dict:
    rows = evaluate_records(model, world, records, gen, scf_cfg)
    return {"scenarios": summarize(rows), "records": rows, "gen": gen.__dict__, "scf": scf_cfg.__dict__}


def scenario_metrics(summary: dict) -> Iterable[tuple[str, str, float, str]]:
    """(scenario, metric, value, orientation) rows for a summary block."""
    orient = {"scf": HIGHER, "wer": LOWER, "token_acc": HIGHER, "latent_fidelity": HIGHER}
    for s, block in summary.items():
        for m, o in orient.items():
            if block.get(m) is not None:
                yield s, m, block[m], o


def write_report(path_json, path_csv, report: dict, config: dict | None = None) -> None:
    doc = dict(report)
    if config is not None:
        doc["config"] = config
    with open(path_json, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    with open(path_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "metric", "value"])
        for s, m, v, _ in scenario_metrics(report["scenarios"]):
            w.writerow([s, m, repr(v)])
