"""Training loop, adapter fine-tuning and the binary checkpoint format.

Two regimes share one loop:

* ``joint``: every group trains with the tone path fused in.
* ``lora``: the base model is trained style-free first (``train`` with
  ``mode="lora"``), then :func:`lora_adapt` freezes ``phoneme_encoder`` and
  ``duration_adaptor`` and trains the style encoder together with the mel
  decoder and output projection.

Checkpoint layout (all integers little-endian)::

    b"SSPC" | version:u8 | meta_len:u32 | meta (UTF-8 JSON) | float32 blobs

The blobs follow ``meta["params"]`` order, which is the model's
declaration order.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import DataError, NumericError
from .model import AcousticModel, Batch, ModelConfig, collate, losses
from .pinyin import SymbolTable, phoneme_table, tone_table

log = logging.getLogger(__name__)

MAGIC = b"SSPC"
VERSION = 1
LORA_FROZEN = ("phoneme_encoder", "duration_adaptor")


class CorruptCheckpoint(DataError):
    pass


class DatasetEmpty(DataError):
    pass


class NonFiniteLoss(NumericError):
    pass


@dataclass
class TrainConfig:
    mode: str = "joint"
    fusion_stage: int = 0
    steps: int = 2000
    batch_size: int = 16
    warmup_steps: int = 4000
    seed: int = 0
    mel_weight: float = 1.0
    duration_weight: float = 1.0
    checkpoint_every: int = 0  # 0 = only the final checkpoint
    grad_clip: float = 1.0
    adam_betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-9

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        self.validate()

    def validate(self):
        if self.mode not in ("joint", "lora"):
            raise ValueError(f"mode must be 'joint' or 'lora', got {self.mode!r}")
        if self.fusion_stage not in (0, 1, 2):
            raise ValueError(f"fusion_stage must be 0, 1 or 2, got {self.fusion_stage}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def sub_seed(root: int, name: str) -> int:
    """Stable per-component seed derived from the root seed."""
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


def lr_at(step: int, d_model: int, warmup: int) -> float:
    if step < 1:
        raise ValueError("step must be >= 1")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


class Adam:
    """Adam over the trainable tensors of a parameter set.

    Moment buffers are created lazily on the first update of a tensor, so
    tensors that stay frozen never get optimizer state.
    """

    def __init__(self, params: ad.ParameterSet, betas=(0.9, 0.98), eps=1e-9):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.state: dict[str, list] = {}

    def step(self, lr: float):
        for name, t in self.params.items():
            if not t.trainable or t.grad is None:
                continue
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = [np.zeros_like(t.data), np.zeros_like(t.data), 0]
            m, v, n = st
            n += 1
            st[2] = n
            g = t.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * (g * g)
            m_hat_scale = 1.0 / (1 - self.b1 ** n)
            v_hat_scale = 1.0 / (1 - self.b2 ** n)
            update = (lr * m_hat_scale) * m / (np.sqrt(v * v_hat_scale) + self.eps)
            t.data -= update.astype(t.dtype)


def clip_grad_norm(params: ad.ParameterSet, max_norm: float) -> float:
    grads = [t.grad for _, t in params.items() if t.trainable and t.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


# --------------------------------------------------------------- dataset

@dataclass
class Utterance:
    utt_id: str
    phonemes: np.ndarray
    tones: np.ndarray
    durations: np.ndarray
    mel: np.ndarray

    def __post_init__(self):
        if not (len(self.phonemes) == len(self.tones) == len(self.durations)):
            raise DataError(f"{self.utt_id}: token streams and durations differ in length")
        if int(np.sum(self.durations)) != len(self.mel):
            raise DataError(f"{self.utt_id}: durations sum to {int(np.sum(self.durations))}, mel has {len(self.mel)} frames")


def make_batch(utts: Sequence[Utterance]) -> Batch:
    return collate([u.phonemes for u in utts], [u.tones for u in utts],
                   [u.durations for u in utts], [u.mel for u in utts], [u.utt_id for u in utts])


# ------------------------------------------------------------ checkpoint

@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    mode: str = "joint"
    freeze: dict[str, bool] = field(default_factory=dict)  # group -> trainable
    phonemes: list[str] = field(default_factory=lambda: phoneme_table().to_list())
    tones: list[str] = field(default_factory=lambda: tone_table().to_list())
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: AcousticModel, step=0, mode="joint", phones: SymbolTable | None = None,
                   tones: SymbolTable | None = None, extra=None) -> "Checkpoint":
        return cls(
            model.config,
            {n: t.data.astype(np.float32).copy() for n, t in model.params.items()},
            step, mode, model.params.freeze_map(),
            (phones or phoneme_table()).to_list(), (tones or tone_table()).to_list(), dict(extra or {}),
        )

    def build_model(self) -> AcousticModel:
        model = AcousticModel(self.model_config)
        if model.params.names() != list(self.params):
            raise CorruptCheckpoint("checkpoint parameter names do not match the model layout")
        for name, t in model.params.items():
            if t.shape != self.params[name].shape:
                raise CorruptCheckpoint(f"{name}: shape {self.params[name].shape}, model expects {t.shape}")
            t.data = self.params[name].astype(np.float32).copy()
        for group, trainable in self.freeze.items():
            ad.set_trainable(model.params, f"{group}.*", trainable)
        return model

    def blob_hash(self, group: str) -> str:
        h = hashlib.sha256()
        for name, arr in self.params.items():
            if ad.ParameterSet.group_of(name) == group:
                h.update(name.encode())
                h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()

    def to_bytes(self) -> bytes:
        meta = {
            "model_config": self.model_config.to_dict(),
            "step": int(self.step),
            "mode": self.mode,
            "freeze": {k: bool(v) for k, v in self.freeze.items()},
            "vocab": {"phonemes": list(self.phonemes), "tones": list(self.tones)},
            "params": [[n, list(a.shape)] for n, a in self.params.items()],
            "extra": self.extra,
        }
        meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts = [MAGIC, struct.pack("<BI", VERSION, len(meta_bytes)), meta_bytes]
        parts += [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in self.params.values()]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < 9 or data[:4] != MAGIC:
            raise CorruptCheckpoint("bad magic")
        version, meta_len = struct.unpack_from("<BI", data, 4)
        if version != VERSION:
            raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
        try:
            meta = json.loads(data[9:9 + meta_len].decode("utf-8"))
        except (UnicodeDecodeError, ValueError) as exc:
            raise CorruptCheckpoint(f"unreadable metadata: {exc}") from exc
        offset = 9 + meta_len
        params = {}
        for name, shape in meta["params"]:
            count = int(np.prod(shape)) if shape else 1
            end = offset + 4 * count
            if end > len(data):
                raise CorruptCheckpoint(f"truncated at parameter {name}")
            params[name] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
            offset = end
        if offset != len(data):
            raise CorruptCheckpoint(f"{len(data) - offset} trailing bytes")
        try:
            config = ModelConfig.from_dict(meta["model_config"])
        except (TypeError, ValueError) as exc:
            raise CorruptCheckpoint(f"bad model config: {exc}") from exc
        return cls(config, params, meta["step"], meta["mode"], meta["freeze"],
                   meta["vocab"]["phonemes"], meta["vocab"]["tones"], meta.get("extra", {}))

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise CorruptCheckpoint(f"{path}: {exc}") from exc
        return cls.from_bytes(data)


# ------------------------------------------------------------- training

@dataclass
class StepResult:
    step: int
    mel_loss: float
    duration_loss: float
    lr: float
    grad_norm: float


class Trainer:
    """Owns a model, its optimizer and the dropout RNG for one training run."""

    def __init__(self, model: AcousticModel, config: TrainConfig, style: str = "normal"):
        self.model = model
        self.config = config
        self.style = style
        self.optimizer = Adam(model.params, config.adam_betas, config.adam_eps)
        self.rng = np.random.default_rng(sub_seed(config.seed, "dropout"))
        self.step_count = 0

    def train_step(self, batch: Batch) -> StepResult:
        if batch.durations is None:
            from .model import MissingDurations
            raise MissingDurations("training batches need ground-truth durations")
        cfg = self.config
        self.step_count += 1
        lr = lr_at(self.step_count, self.model.config.d_model, cfg.warmup_steps)
        self.model.params.zero_grad()
        out = self.model.forward(batch, training=True, rng=self.rng, style=self.style)
        mel_loss, dur_loss = losses(self.model, batch, out)
        mel_v, dur_v = float(mel_loss.data), float(dur_loss.data)
        if not (math.isfinite(mel_v) and math.isfinite(dur_v)):
            raise NonFiniteLoss(f"step {self.step_count}: mel_loss={mel_v}, dur_loss={dur_v}, batch={batch.ids}")
        total = ad.add(ad.scalar_mul(mel_loss, cfg.mel_weight), ad.scalar_mul(dur_loss, cfg.duration_weight))
        gnorm = 0.0
        if total.requires_grad:
            ad.backward(total)
            gnorm = clip_grad_norm(self.model.params, cfg.grad_clip)
            if not math.isfinite(gnorm):
                raise NonFiniteLoss(f"step {self.step_count}: non-finite gradient norm")
            self.optimizer.step(lr)
        return StepResult(self.step_count, mel_v, dur_v, lr, gnorm)


def _batches(data: Sequence[Utterance], batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(len(data))
        for i in range(0, len(order), batch_size):
            yield make_batch([data[j] for j in order[i:i + batch_size]])


def _run(trainer: Trainer, data, cfg: TrainConfig, mode, out_dir, on_step, phones, tones, extra=None):
    extra = {**(extra or {}), "style": trainer.style}
    if not data:
        raise DatasetEmpty("no training utterances")
    batches = _batches(data, cfg.batch_size, np.random.default_rng(sub_seed(cfg.seed, "shuffle")))
    out_dir = Path(out_dir) if out_dir is not None else None
    for _ in range(cfg.steps):
        res = trainer.train_step(next(batches))
        if on_step is not None:
            on_step(res)
        if out_dir is not None and cfg.checkpoint_every and res.step % cfg.checkpoint_every == 0:
            Checkpoint.from_model(trainer.model, res.step, mode, phones, tones, extra).save(out_dir / f"step{res.step:07d}.sspc")
    ckpt = Checkpoint.from_model(trainer.model, trainer.step_count, mode, phones, tones, extra)
    if out_dir is not None:
        ckpt.save(out_dir / "final.sspc")
    return ckpt


def train(data: Sequence[Utterance], config: TrainConfig, model_config: ModelConfig | None = None,
          out_dir=None, on_step: Callable[[StepResult], None] | None = None,
          phones: SymbolTable | None = None, tones: SymbolTable | None = None,
          extra: dict | None = None) -> Checkpoint:
    """Train from scratch.

    ``mode="joint"`` trains all groups with the tone path fused in;
    ``mode="lora"`` trains the style-free base model that
    :func:`lora_adapt` later decorates.
    """
    model_config = model_config or ModelConfig()
    model_config.fusion_stage = config.fusion_stage
    model = AcousticModel(model_config, seed=sub_seed(config.seed, "init"))
    style = "normal" if config.mode == "joint" else "none"
    if style == "none":
        ad.set_trainable(model.params, "style_encoder.*", False)
    trainer = Trainer(model, config, style=style)
    return _run(trainer, data, config, config.mode, out_dir, on_step, phones, tones, extra)


def lora_adapt(base: Checkpoint, data: Sequence[Utterance], config: TrainConfig, out_dir=None,
               on_step: Callable[[StepResult], None] | None = None, extra: dict | None = None) -> Checkpoint:
    """Fine-tune the tone path on top of a base checkpoint with the phoneme path frozen."""
    if base is None:
        raise CorruptCheckpoint("lora_adapt needs a base checkpoint")
    if config.fusion_stage != base.model_config.fusion_stage:
        base = Checkpoint(ModelConfig.from_dict({**base.model_config.to_dict(), "fusion_stage": config.fusion_stage}),
                          base.params, base.step, base.mode, base.freeze, base.phonemes, base.tones, base.extra)
    model = base.build_model()
    ad.set_trainable(model.params, "*", True)
    for group in LORA_FROZEN:
        ad.set_trainable(model.params, f"{group}.*", False)
    trainer = Trainer(model, config, style="normal")
    phones, tones = SymbolTable(base.phonemes), SymbolTable(base.tones)
    return _run(trainer, data, config, "lora", out_dir, on_step, phones, tones, {**base.extra, **(extra or {})})


def evaluate_mel_mse(model: AcousticModel, data: Sequence[Utterance], style: str = "normal") -> float:
    """Masked log-mel MSE with ground-truth durations, dropout off."""
    batch = make_batch(data)
    with ad.no_grad():
        out = model.forward(batch, training=False, use_gt_durations=True, style=style)
        mel_loss, _ = losses(model, batch, out)
    return float(mel_loss.data)
