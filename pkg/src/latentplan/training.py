"""
Dual-objective training: latent (MSE + cosine) and audio (cross-entropy)
losses, warmup + inverse-sqrt learning rate, length-binned batching,
gradient accumulation and staged scenario curricula.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .layout import frame_sequence
from .model import Batch, Model, collate
from .numerics import AdamState, Tensor, adam_step
from .layout import encoded_length
from .seeds import SEED_TRAIN_LOOP
from .toyworld import SCENARIOS, Record, World

log = logging.getLogger(__name__)


class OversizeRecordError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


# -----------------------------------------------------------------------------
# losses
# -----------------------------------------------------------------------------


@dataclass
class LossWeights:
    cos: float = 1.0  # weight of the cosine term inside the latent loss
    latent: float = 1.0
    audio: float = 1.0

    def __post_init__(self):
        if min(self.cos, self.latent, self.audio) < 0:
            raise ValueError("loss weights must be >= 0")


def latent_loss(pred, target, lam: float = 1.0) -> Tensor:
    """mean_k [ mse(pred_k, target_k) + lam * (1 - cos(pred_k, target_k)) ] over (K, d_sem) rows."""
    pred, target = nx.tensor.as_tensor(pred), nx.tensor.as_tensor(target)
    if pred.shape != target.shape:
        raise nx.ShapeError(f"latent_loss shape mismatch: {pred.shape} vs {target.shape}")
    if pred.ndim == 1:
        pred, target = pred.reshape(1, -1), target.reshape(1, -1)
    per_row_mse = nx.square(pred - target).mean(axis=-1)
    per_row_cos = nx.rowwise_cosine(pred, target)
    return (per_row_mse + (1.0 - per_row_cos) * lam).mean()


def audio_loss(logits, targets, owner: np.ndarray | None = None) -> Tensor:
    """Cross-entropy over (t, q) positions; targets < 0 are ignored.

    Without ``owner`` this is the mean over valid positions. With ``owner``
    (batch index per row) it is the mean over sequences of each sequence's
    per-position mean, which keeps gradient accumulation exact.
    """
    logits = nx.tensor.as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise nx.ContractError(f"logits {logits.shape} do not align with targets {targets.shape}")
    if owner is None:
        return nx.cross_entropy(logits, targets)
    valid = targets >= 0
    per_row = valid.sum(axis=1)
    n_seq = int(owner.max()) + 1 if owner.size else 1
    counts = np.bincount(owner, weights=per_row, minlength=n_seq)
    w = np.where(valid, (1.0 / (counts[owner] * n_seq))[:, None], 0.0)
    return nx.cross_entropy(logits, targets, w)


def total_loss(latent, audio, w: LossWeights) -> Tensor:
    return nx.tensor.as_tensor(latent) * w.latent + nx.tensor.as_tensor(audio) * w.audio


# -----------------------------------------------------------------------------
# schedule and batching
# -----------------------------------------------------------------------------


def lr_at(step: int, lr_peak: float, warmup: int, floor_factor: float = 0.1) -> float:
    """Linear warmup to lr_peak, then lr_peak * max(floor_factor, sqrt(warmup / step))."""
    if step < 1:
        raise ValueError("step is 1-based")
    if step <= warmup:
        return lr_peak * step / warmup
    return lr_peak * max(floor_factor, math.sqrt(warmup / step))


def plan_batches(
    lengths: Sequence[tuple[object, int]],
    max_batch_bin: int,
    max_batch_size: int,
    rng: np.random.Generator,
) -> list[list]:
    """Greedy length-binned batching.

    ``lengths`` is a list of (record id, framed length). Records are shuffled,
    stably sorted by length, and packed in order while the summed length stays
    within ``max_batch_bin`` and the count within ``max_batch_size``. Batch
    order is shuffled at the end.
    """
    for rid, n in lengths:
        if n > max_batch_bin:
            raise OversizeRecordError(f"record {rid} has length {n} > max_batch_bin={max_batch_bin}")
    order = rng.permutation(len(lengths))
    order = sorted(order, key=lambda i: lengths[i][1])
    batches: list[list] = []
    cur: list = []
    tot = 0
    for i in order:
        rid, n = lengths[i]
        if cur and (tot + n > max_batch_bin or len(cur) >= max_batch_size):
            batches.append(cur)
            cur, tot = [], 0
        cur.append(rid)
        tot += n
    if cur:
        batches.append(cur)
    return [batches[i] for i in rng.permutation(len(batches))]


# -----------------------------------------------------------------------------
# curriculum
# -----------------------------------------------------------------------------

THIRD = 1.0 / 3.0
# (end epoch on a 50-epoch run, Sound/Speech/Composite weights)
STRATEGIES = {
    "constant": [(10, (THIRD, THIRD, THIRD)), (25, (THIRD, THIRD, THIRD)), (50, (THIRD, THIRD, THIRD))],
    "gradual": [(10, (0.40, 0.40, 0.20)), (25, (0.40, 0.20, 0.40)), (50, (0.25, 0.25, 0.50))],
    "disjoint": [(10, (0.50, 0.50, 0.00)), (25, (0.50, 0.50, 0.00)), (50, (0.00, 0.00, 1.00))],
}
STAGE_NAMES = ("early", "middle", "final")


@dataclass
class Stage:
    start: int
    end: int  # exclusive
    weights: tuple[float, float, float]
    name: str = ""


@dataclass
class CurriculumSchedule:
    stages: list[Stage]
    name: str = "custom"

    def __post_init__(self):
        pos = 0
        for s in self.stages:
            if s.start != pos or s.end < s.start:
                raise ValueError("stage epoch ranges must partition [0, total_epochs)")
            if abs(sum(s.weights) - 1.0) > 1e-9 or min(s.weights) < 0:
                raise ValueError(f"stage weights {s.weights} must be nonnegative and sum to 1")
            pos = s.end

    @property
    def total_epochs(self) -> int:
        return self.stages[-1].end

    def stage_at(self, epoch: int) -> Stage:
        for s in self.stages:
            if s.start <= epoch < s.end:
                return s
        raise nx.ContractError(f"epoch {epoch} outside schedule [0, {self.total_epochs})")

    @classmethod
    def named(cls, name: str, total_epochs: int = 50) -> "CurriculumSchedule":
        if name not in STRATEGIES:
            raise ValueError(f"unknown curriculum {name!r}; choose from {sorted(STRATEGIES)}")
        stages, start = [], 0
        for (end50, w), sname in zip(STRATEGIES[name], STAGE_NAMES):
            end = int(round(end50 * total_epochs / 50))
            stages.append(Stage(start, end, w, sname))
            start = end
        return cls(stages, name)

    def to_json(self) -> dict:
        return {"name": self.name, "stages": [asdict(s) for s in self.stages]}


def curriculum_draw(schedule: CurriculumSchedule, epoch: int, rng: np.random.Generator, n: int | None = None):
    """Scenario (or array of n scenarios) drawn with the active stage's weights."""
    w = np.asarray(schedule.stage_at(epoch).weights, dtype=np.float64)
    cum = np.cumsum(w) / w.sum()
    u = rng.random(1 if n is None else n)
    idx = np.searchsorted(cum, u, side="right")
    # zero-weight classes have an empty [cum[i-1], cum[i]) interval and are never hit
    idx = np.minimum(idx, len(w) - 1)
    names = np.array(SCENARIOS)[idx]
    return str(names[0]) if n is None else names


# -----------------------------------------------------------------------------
# training loop
# -----------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 10
    lr_peak: float = 1e-3
    warmup: int = 300
    floor_factor: float = 0.1
    accumulation: int = 2
    max_batch_bin: int = 2000
    max_batch_size: int = 16
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float | None = None


def record_sequence(world: World, rec: Record):
    return frame_sequence(rec.text, world.k, rec.grid, world.markers, world.pad)


def make_batch(world: World, model: Model, recs: list[Record]) -> Batch:
    seqs = [record_sequence(world, r) for r in recs]
    sem = [r.semantic for r in recs]
    return collate(seqs, sem, model.cfg, latent_targets=sem, with_audio_targets=True)


def batch_losses(model: Model, batch: Batch, w: LossWeights):
    out = model.forward_batch(batch)
    lat = latent_loss(out.latent_pred, batch.latent_targets, w.cos)
    aud = audio_loss(out.audio_logits, batch.audio_targets, batch.audio_owner)
    return lat, aud, total_loss(lat, aud, w)


def epoch_items(records: list[Record], schedule: CurriculumSchedule, epoch: int, rng: np.random.Generator) -> list[int]:
    """Record indices for one epoch: len(records) curriculum draws, each served from a reshuffled per-scenario pool."""
    pools = {s: [i for i, r in enumerate(records) if r.scenario == s] for s in SCENARIOS}
    draws = curriculum_draw(schedule, epoch, rng, len(records))
    queues = {s: [] for s in SCENARIOS}
    out = []
    for s in draws:
        if not queues[s]:
            if not pools[s]:
                raise nx.ContractError(f"curriculum drew {s} but the dataset has no {s} records")
            queues[s] = list(rng.permutation(pools[s]))
        out.append(int(queues[s].pop()))
    return out


def _checkpoint_arrays(model: Model, opt: AdamState) -> dict[str, np.ndarray]:
    arrays = dict(model.state_dict())
    for k in model.params:
        if k in opt.m:
            arrays[f"adam.m/{k}"] = opt.m[k]
            arrays[f"adam.v/{k}"] = opt.v[k]
    return arrays


def save_training_state(ckpt_dir, model: Model, opt: AdamState, epoch: int, step: int, extra: dict | None = None) -> Path:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    path = ckpt_dir / f"epoch{epoch:03d}.ckpt"
    nx.save_checkpoint(path, _checkpoint_arrays(model, opt))
    state = {"epoch": epoch, "step": step, "adam_step": opt.step, "model": model.cfg.to_dict(), **(extra or {})}
    (ckpt_dir / f"epoch{epoch:03d}.json").write_text(json.dumps(state, indent=2))
    return path


def load_training_state(path, model: Model, opt: AdamState) -> dict:
    path = Path(path)
    arrays = nx.load_checkpoint(path)
    model.load_state_dict(arrays)
    opt.m = {k[len("adam.m/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam.m/")}
    opt.v = {k[len("adam.v/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam.v/")}
    state = json.loads(path.with_suffix(".json").read_text())
    opt.step = state["adam_step"]
    return state


def train(
    model: Model,
    world: World,
    records: list[Record],
    schedule: CurriculumSchedule,
    cfg: TrainConfig,
    log_path=None,
    ckpt_dir=None,
    resume_from=None,
    on_epoch_end: Callable[[int, dict], None] | None = None,
    max_epochs: int | None = None,
) -> list[dict]:
    """Run the curriculum for ``schedule.total_epochs`` epochs; returns per-epoch metric rows."""
    opt = AdamState(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay, cfg.clip_norm)
    first_epoch, step = 0, 0
    if resume_from is not None:
        state = load_training_state(resume_from, model, opt)
        first_epoch, step = state["epoch"] + 1, state["step"]
    lengths_of = {i: len(r.text) + world.k + encoded_length(r.grid.shape[0], world.q) + 4 for i, r in enumerate(records)}
    history = []
    last = schedule.total_epochs if max_epochs is None else min(schedule.total_epochs, max_epochs)
    for epoch in range(first_epoch, last):
        t0 = time.perf_counter()
        stage = schedule.stage_at(epoch)
        if epoch == stage.start:
            log.info("stage %s begins at epoch %d with weights %s", stage.name, epoch, stage.weights)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, SEED_TRAIN_LOOP, epoch]))
        items = epoch_items(records, schedule, epoch, rng)
        plan = plan_batches([(j, lengths_of[i]) for j, i in enumerate(items)], cfg.max_batch_bin, cfg.max_batch_size, rng)
        sums = np.zeros(3)
        n_micro = 0
        pending = 0
        model.zero_grad()
        for bi, slot_ids in enumerate(plan):
            recs = [records[items[j]] for j in slot_ids]
            batch = make_batch(world, model, recs)
            lat, aud, tot = batch_losses(model, batch, cfg.weights)
            if not np.isfinite(tot.item()):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {step}, batch {bi} "
                    f"(records {[r.id for r in recs]}): latent={lat.item()} audio={aud.item()}"
                )
            tot.backward()
            sums += (lat.item(), aud.item(), tot.item())
            n_micro += 1
            pending += 1
            if pending == cfg.accumulation or bi == len(plan) - 1:
                step += 1
                lr = lr_at(step, cfg.lr_peak, cfg.warmup, cfg.floor_factor)
                grads = {}
                for k, p in model.params.items():
                    grads[k] = p.grad / pending if p.grad is not None else np.zeros_like(p.data)
                adam_step(opt, {k: p.data for k, p in model.params.items()}, grads, lr)
                model.zero_grad()
                pending = 0
        means = sums / max(n_micro, 1)
        row = {
            "epoch": epoch,
            "stage": stage.name,
            "L_latent": float(means[0]),
            "L_audio": float(means[1]),
            "L_total": float(means[2]),
            "lr": lr_at(max(step, 1), cfg.lr_peak, cfg.warmup, cfg.floor_factor),
            "wall_seconds": time.perf_counter() - t0,
            "steps": step,
        }
        history.append(row)
        log.info("epoch %d [%s] latent=%.4f audio=%.4f total=%.4f lr=%.2e (%.1fs)", epoch, row["stage"],
                 row["L_latent"], row["L_audio"], row["L_total"], row["lr"], row["wall_seconds"])
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(row) + "\n")
        if ckpt_dir is not None:
            save_training_state(ckpt_dir, model, opt, epoch, step)
        if on_epoch_end is not None:
            on_epoch_end(epoch, row)
    return history

