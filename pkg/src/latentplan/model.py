"""
Decoder-only causal transformer over the unified sequence.

Inputs per position come from one of three adapters: the text embedding
table (text and marker tokens), the sum of per-codebook embeddings (audio
frames, PAD has its own row), or a linear adapter from the semantic space
(latent slots). Outputs are read at the position *before* the thing being
predicted: SOL and latent slots give the next latent through the linear
projection ``phi``; SOA and frame steps give the next frame through Q
parallel heads. Each head has V_audio + 2 classes: the audio tokens, PAD,
and EOA (only ever a target on codebook 1).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .layout import AUDIO, LATENT, SPECIAL, TEXT, UnifiedSequence
from .numerics import Tensor
from .seeds import SEED_MODEL_INIT


@dataclass
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    v_text: int = 75
    v_audio: int = 64
    q: int = 4
    d_sem: int = 32
    k: int = 6
    max_positions: int = 160
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("d_model", "n_layers", "n_heads", "d_ff", "v_text", "v_audio", "q", "d_sem", "k", "max_positions"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def n_classes(self) -> int:
        return self.v_audio + 2

    @property
    def pad(self) -> int:
        return self.v_audio

    @property
    def eoa_class(self) -> int:
        return self.v_audio + 1

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_count(cfg: ModelConfig) -> int:
    d, f = cfg.d_model, cfg.d_ff
    per_layer = 2 * d + 4 * d * d + 3 * d + 2 * d + d * f + f + f * d + d
    return (
        cfg.v_text * d
        + cfg.q * (cfg.v_audio + 1) * d
        + cfg.max_positions * d
        + cfg.d_sem * d + d
        + cfg.n_layers * per_layer
        + 2 * d
        + d * cfg.d_sem + cfg.d_sem
        + d * cfg.q * cfg.n_classes + cfg.q * cfg.n_classes
    )


@dataclass
class Batch:
    """Padded model inputs plus read-out positions and targets for B sequences."""

    text_idx: np.ndarray  # (B, T)
    audio_idx: np.ndarray  # (B, T, Q) offset into the stacked codebook table
    latent_in: np.ndarray  # (B, T, d_sem)
    text_mask: np.ndarray  # (B, T, 1)
    audio_mask: np.ndarray
    latent_mask: np.ndarray
    lengths: np.ndarray  # (B,)
    latent_rows: np.ndarray  # (B*K,) flat b*T+t read positions
    audio_rows: np.ndarray  # (R,) flat read positions for frame/EOA prediction
    audio_owner: np.ndarray  # (R,) batch index of each audio row
    latent_targets: np.ndarray | None = None  # (B*K, d_sem)
    audio_targets: np.ndarray | None = None  # (R, Q) class ids, -1 = no loss

    @property
    def size(self) -> int:
        return int(self.lengths.shape[0])


def collate(
    seqs: list[UnifiedSequence],
    latent_inputs: list[np.ndarray],
    cfg: ModelConfig,
    k: int | None = None,
    latent_targets: list[np.ndarray] | None = None,
    with_audio_targets: bool = False,
) -> Batch:
    """Build a padded batch.

    ``latent_inputs[b]`` holds the vector fed at each latent slot present in
    ``seqs[b]`` (teacher semantics during training, fed-back predictions at
    inference). Sequences may be prefixes; read rows are emitted for every
    latent/audio prediction whose source position exists.
    """
    k = cfg.k if k is None else k
    b = len(seqs)
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    t = int(lengths.max())
    if t > cfg.max_positions:
        raise nx.ContractError(f"sequence length {t} exceeds max_positions={cfg.max_positions}")
    v1 = cfg.v_audio + 1
    offsets = np.arange(cfg.q, dtype=np.int64) * v1
    text_idx = np.zeros((b, t), dtype=np.int64)
    audio_idx = np.zeros((b, t, cfg.q), dtype=np.int64)
    latent_in = np.zeros((b, t, cfg.d_sem))
    tm = np.zeros((b, t, 1))
    am = np.zeros((b, t, 1))
    lm = np.zeros((b, t, 1))
    latent_rows, audio_rows, owner, a_targets = [], [], [], []
    for i, s in enumerate(seqs):
        n = len(s)
        tok = (s.tags == TEXT) | (s.tags == SPECIAL)
        text_idx[i, :n] = np.where(tok, s.ids, 0)
        tm[i, :n, 0] = tok
        aud = s.tags == AUDIO
        if aud.any():
            audio_idx[i, :n][aud] = s.frames[aud] + offsets
        am[i, :n, 0] = aud
        lat = s.tags == LATENT
        if lat.any():
            latent_in[i, :n][lat] = latent_inputs[i][s.slot[lat]]
        lm[i, :n, 0] = lat

        specials = np.nonzero(s.tags == SPECIAL)[0]
        sol = int(specials[1]) if specials.size > 1 else None
        soa = int(specials[2]) if specials.size > 2 else None
        if sol is not None:
            for j in range(k):
                if sol + j < n:
                    latent_rows.append(i * t + sol + j)
        if soa is not None:
            audio_pos = np.nonzero(aud)[0]
            src = [soa] + [int(p) for p in audio_pos]
            if with_audio_targets:
                frames = s.frames[aud]
                ends = specials.size > 3
                for j, p in enumerate(src):
                    if j < len(frames):
                        tgt = frames[j]
                    elif ends:
                        tgt = np.full(cfg.q, -1, dtype=np.int64)
                        tgt[0] = cfg.eoa_class
                    else:
                        continue
                    audio_rows.append(i * t + p)
                    owner.append(i)
                    a_targets.append(tgt)
            else:
                for p in src:
                    audio_rows.append(i * t + p)
                    owner.append(i)
    return Batch(
        text_idx, audio_idx, latent_in, tm, am, lm, lengths,
        np.array(latent_rows, dtype=np.int64), np.array(audio_rows, dtype=np.int64),
        np.array(owner, dtype=np.int64),
        None if latent_targets is None else np.concatenate([np.asarray(x)[:k] for x in latent_targets]),
        np.array(a_targets, dtype=np.int64).reshape(-1, cfg.q) if with_audio_targets else None,
    )


@dataclass
class ModelOutput:
    hidden: Tensor  # (B*T, d_model) final-layer states
    latent_hidden: Tensor  # (rows, d_model)
    latent_pred: Tensor  # (rows, d_sem)
    audio_logits: Tensor  # (rows, Q, n_classes)


class Model:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([seed, SEED_MODEL_INIT]))
        d, f, s = cfg.d_model, cfg.d_ff, cfg.init_std
        out_s = s / math.sqrt(2 * cfg.n_layers)
        p: dict[str, np.ndarray] = {}
        p["text_emb"] = rng.normal(0, s, (cfg.v_text, d))
        p["audio_emb"] = rng.normal(0, s, (cfg.q * (cfg.v_audio + 1), d))
        p["pos_emb"] = rng.normal(0, s, (cfg.max_positions, d))
        p["latent_in.w"] = rng.normal(0, s, (cfg.d_sem, d))
        p["latent_in.b"] = np.zeros(d)
        for i in range(cfg.n_layers):
            pre = f"blocks.{i}."
            p[pre + "ln1.g"], p[pre + "ln1.b"] = np.ones(d), np.zeros(d)
            for name in ("q", "k", "v"):
                p[pre + f"attn.{name}.w"] = rng.normal(0, s, (d, d))
                if name != "k":  # a key bias only shifts each score row by a constant, which softmax ignores
                    p[pre + f"attn.{name}.b"] = np.zeros(d)
            p[pre + "attn.o.w"] = rng.normal(0, out_s, (d, d))
            p[pre + "attn.o.b"] = np.zeros(d)
            p[pre + "ln2.g"], p[pre + "ln2.b"] = np.ones(d), np.zeros(d)
            p[pre + "ff.w1"] = rng.normal(0, s, (d, f))
            p[pre + "ff.b1"] = np.zeros(f)
            p[pre + "ff.w2"] = rng.normal(0, out_s, (f, d))
            p[pre + "ff.b2"] = np.zeros(d)
        p["ln_f.g"], p["ln_f.b"] = np.ones(d), np.zeros(d)
        p["phi.w"] = rng.normal(0, s, (d, cfg.d_sem))
        p["phi.b"] = np.zeros(cfg.d_sem)
        p["heads.w"] = rng.normal(0, s, (d, cfg.q * cfg.n_classes))
        p["heads.b"] = np.zeros(cfg.q * cfg.n_classes)
        self.params = {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            if k not in arrays:
                raise KeyError(f"checkpoint lacks parameter {k}")
            if arrays[k].shape != t.shape:
                raise ValueError(f"shape mismatch for {k}: {arrays[k].shape} vs {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # ------------------------------------------------------------------ forward

    def project_latent(self, hidden: Tensor) -> Tensor:
        return hidden @ self.params["phi.w"] + self.params["phi.b"]

    def embed(self, batch: Batch) -> Tensor:
        cfg, p = self.cfg, self.params
        b, t = batch.text_idx.shape
        x = nx.embedding(p["text_emb"], batch.text_idx) * batch.text_mask
        a = nx.embedding(p["audio_emb"], batch.audio_idx).sum(axis=2)
        x = x + a * batch.audio_mask
        lat = Tensor(batch.latent_in) @ p["latent_in.w"] + p["latent_in.b"]
        x = x + lat * batch.latent_mask
        return x + nx.embedding(p["pos_emb"], np.arange(t))

    def _block(self, x: Tensor, i: int) -> Tensor:
        cfg, p = self.cfg, self.params
        pre = f"blocks.{i}."
        b, t, d = x.shape
        h, dh = cfg.n_heads, d // cfg.n_heads
        y = nx.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])

        def heads(name):
            z = y @ p[pre + f"attn.{name}.w"]
            if name != "k":
                z = z + p[pre + f"attn.{name}.b"]
            return z.reshape(b, t, h, dh).transpose(0, 2, 1, 3)

        q, k, v = heads("q"), heads("k"), heads("v")
        att = nx.causal_softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)))
        o = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        x = x + (o @ p[pre + "attn.o.w"] + p[pre + "attn.o.b"])
        y = nx.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        ff = nx.gelu(y @ p[pre + "ff.w1"] + p[pre + "ff.b1"]) @ p[pre + "ff.w2"] + p[pre + "ff.b2"]
        return x + ff

    def forward_batch(self, batch: Batch) -> ModelOutput:
        cfg, p = self.cfg, self.params
        x = self.embed(batch)
        for i in range(cfg.n_layers):
            x = self._block(x, i)
        x = nx.layer_norm(x, p["ln_f.g"], p["ln_f.b"])
        b, t, d = x.shape
        flat = x.reshape(b * t, d)
        lh = nx.take_rows(flat, batch.latent_rows)
        ah = nx.take_rows(flat, batch.audio_rows)
        logits = (ah @ p["heads.w"] + p["heads.b"]).reshape(-1, cfg.q, cfg.n_classes)
        return ModelOutput(flat, lh, self.project_latent(lh), logits)

    def forward(self, seq: UnifiedSequence, teacher_latents: np.ndarray | None = None) -> ModelOutput:
        """Single-sequence forward; ``teacher_latents`` (K, d_sem) feeds the latent slots."""
        if teacher_latents is None:
            teacher_latents = np.zeros((self.cfg.k, self.cfg.d_sem))
        return self.forward_batch(collate([seq], [np.asarray(teacher_latents)], self.cfg))
