"""Acoustic model: phoneme and tone encoders, duration adaptor, additive style fusion, mel decoder.

The phoneme path (``phoneme_encoder``, ``duration_adaptor``, ``mel_decoder``,
``output_linear``) and the tone path (``style_encoder``) own disjoint
parameter groups.  The tone embedding sequence is added to the phoneme
path at one of three points, selected by ``fusion_stage``:

* 0: before the duration adaptor, so durations see both streams;
* 1: after length regulation, durations come from phonemes only;
* 2: after the mel decoder, right before the output projection.

Shapes follow a batch-major, time-major convention: token tensors are
``(B, N, d_model)``, frame tensors ``(B, M, d_model)``, masks are boolean
``(B, N)`` / ``(B, M)`` with ``True`` on real positions.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .errors import DataError, ShapeMismatch, TtsError

GROUPS = ("phoneme_encoder", "style_encoder", "duration_adaptor", "mel_decoder", "output_linear")
STYLE_MODES = ("normal", "zero", "none")
_NEG_INF = -1e9


class IdOutOfRange(DataError, IndexError):
    pass


class LengthMismatch(DataError):
    pass


class NegativeDuration(DataError):
    pass


class MissingDurations(TtsError, ValueError):
    pass


class DegenerateExpansion(UserWarning):
    """All durations were zero; the regulated sequence is empty."""


@dataclass
class ModelConfig:
    n_phonemes: int = 61
    n_tones: int = 7
    d_model: int = 128
    n_heads: int = 2
    n_blocks: int = 4
    conv_kernels: tuple[int, int] = (3, 3)
    conv_filter: int = 256
    duration_filter: int = 256
    duration_kernel: int = 3
    n_mels: int = 80
    fusion_stage: int = 0
    dropout_fft: float = 0.5
    dropout_duration: float = 0.1
    max_seq_len: int = 1000

    def __post_init__(self):
        self.conv_kernels = tuple(int(k) for k in self.conv_kernels)
        self.validate()

    def validate(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.fusion_stage not in (0, 1, 2):
            raise ValueError(f"fusion_stage must be 0, 1 or 2, got {self.fusion_stage}")
        if len(self.conv_kernels) != 2 or any(k % 2 == 0 or k < 1 for k in self.conv_kernels):
            raise ValueError(f"conv_kernels must be two odd sizes, got {self.conv_kernels}")
        if self.duration_kernel % 2 == 0:
            raise ValueError("duration_kernel must be odd")
        for name in ("dropout_fft", "dropout_duration"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")
        for name in ("n_phonemes", "n_tones", "d_model", "n_heads", "n_blocks", "conv_filter",
                     "duration_filter", "n_mels", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_kernels"] = list(self.conv_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Batch:
    """Right-padded token (and optionally frame) arrays for a set of utterances."""

    phonemes: np.ndarray  # (B, N) int, 0 = PAD
    tones: np.ndarray  # (B, N) int
    token_mask: np.ndarray  # (B, N) bool
    durations: np.ndarray | None = None  # (B, N) int frame counts
    mels: np.ndarray | None = None  # (B, M, n_mels)
    frame_mask: np.ndarray | None = None  # (B, M) bool
    ids: list = field(default_factory=list)

    @property
    def size(self):
        return self.phonemes.shape[0]


def collate(phonemes, tones, durations=None, mels=None, ids=None) -> Batch:
    """Pad per-utterance sequences into a :class:`Batch`."""
    b = len(phonemes)
    if len(tones) != b:
        raise LengthMismatch("phoneme and tone lists differ in batch size")
    n = max((len(p) for p in phonemes), default=0)
    ph = np.zeros((b, n), dtype=np.int64)
    tn = np.zeros((b, n), dtype=np.int64)
    mask = np.zeros((b, n), dtype=bool)
    for i, (p, t) in enumerate(zip(phonemes, tones)):
        if len(p) != len(t):
            raise LengthMismatch(f"utterance {i}: {len(p)} phonemes vs {len(t)} tones")
        ph[i, :len(p)] = p
        tn[i, :len(t)] = t
        mask[i, :len(p)] = True
    dur = None
    if durations is not None:
        dur = np.zeros((b, n), dtype=np.int64)
        for i, d in enumerate(durations):
            if len(d) != len(phonemes[i]):
                raise LengthMismatch(f"utterance {i}: {len(d)} durations for {len(phonemes[i])} tokens")
            dur[i, :len(d)] = d
    mel_arr = frame_mask = None
    if mels is not None:
        m = max(len(x) for x in mels)
        n_mels = mels[0].shape[1]
        mel_arr = np.zeros((b, m, n_mels), dtype=np.float32)
        frame_mask = np.zeros((b, m), dtype=bool)
        for i, x in enumerate(mels):
            mel_arr[i, :len(x)] = x
            frame_mask[i, :len(x)] = True
    return Batch(ph, tn, mask, dur, mel_arr, frame_mask, list(ids or range(b)))


@dataclass
class ForwardOutput:
    mel: Tensor  # (B, M, n_mels)
    log_durations: Tensor  # (B, N), log(d + 1) domain
    durations: np.ndarray  # (B, N) frame counts used for expansion
    frame_mask: np.ndarray  # (B, M)
    token_mask: np.ndarray  # (B, N)


def positional_encoding(length: int, d_model: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d_model // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model - d_model // 2])
    return pe.astype(dtype)


def _mask3(mask: np.ndarray, dtype) -> np.ndarray:
    return mask[..., None].astype(dtype)


def length_regulate(h, durations, mask: np.ndarray | None = None):
    """Repeat token row ``i`` ``durations[i]`` times.

    Accepts an unbatched ``(N, D)`` input with ``(N,)`` durations, or a
    batched ``(B, N, D)`` one with ``(B, N)`` durations; returns the expanded
    tensor and its frame mask.  Output length is exactly ``sum(durations)``
    (the batch maximum when batched; shorter rows are zero-padded).
    """
    h = ad.as_tensor(h)
    durations = np.asarray(durations)
    single = h.data.ndim == 2
    if single:
        h = ad.reshape(h, (1,) + h.shape)
        durations = durations[None]
    if durations.shape != h.shape[:2]:
        raise LengthMismatch(f"{durations.shape[-1]} durations for {h.shape[1]} rows")
    if not np.issubdtype(durations.dtype, np.integer):
        if np.any(durations != np.round(durations)):
            raise DataError("durations must be whole frame counts")
        durations = durations.astype(np.int64)
    if np.any(durations < 0):
        raise NegativeDuration("durations must be nonnegative")
    if mask is not None:
        durations = np.where(mask, durations, 0)
    totals = durations.sum(axis=1)
    m = int(totals.max()) if totals.size else 0
    if m == 0:
        warnings.warn("all durations are zero; expansion is empty", DegenerateExpansion, stacklevel=2)
    index = np.zeros((h.shape[0], m), dtype=np.int64)
    frame_mask = np.zeros((h.shape[0], m), dtype=bool)
    for b in range(h.shape[0]):
        rows = np.repeat(np.arange(h.shape[1]), durations[b])
        index[b, :len(rows)] = rows
        frame_mask[b, :len(rows)] = True
    out = ad.index_rows(h, index)
    if not frame_mask.all():
        out = ad.mul(out, _mask3(frame_mask, h.dtype))
    if single:
        out = ad.reshape(out, out.shape[1:])
        frame_mask = frame_mask[0]
    return out, frame_mask


def fuse(a, b) -> Tensor:
    """Additive fusion of two equally shaped embedding sequences."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch("fuse", a.shape, b.shape)
    return ad.add(a, b)


def durations_from_log(log_dur: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Inference rule ``max(0, round(exp(p) - 1))``, zero on PAD."""
    d = np.maximum(0, np.round(np.exp(np.asarray(log_dur, dtype=np.float64)) - 1.0)).astype(np.int64)
    return d if mask is None else np.where(mask, d, 0)


class AcousticModel:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params = ParameterSet()
        self._pe = positional_encoding(config.max_seq_len, config.d_model, self.dtype)
        rng = np.random.default_rng(seed)
        c = config
        self._embedding("phoneme_encoder.embedding", c.n_phonemes, rng)
        self._fft_stack("phoneme_encoder", rng)
        self._embedding("style_encoder.embedding", c.n_tones, rng)
        self._fft_stack("style_encoder", rng)
        k, f = c.duration_kernel, c.duration_filter
        self._conv("duration_adaptor.conv1", k, c.d_model, f, rng)
        self._norm("duration_adaptor.norm1", f)
        self._conv("duration_adaptor.conv2", k, f, f, rng)
        self._norm("duration_adaptor.norm2", f)
        self._linear("duration_adaptor.linear", f, 1, rng)
        self._fft_stack("mel_decoder", rng)
        self._linear("output_linear", c.d_model, c.n_mels, rng)

    # ------------------------------------------------------------ init

    def _xavier(self, name, fan_in, fan_out, shape, rng):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        self.params.add(name, rng.uniform(-bound, bound, shape).astype(self.dtype))

    def _zeros(self, name, shape):
        self.params.add(name, np.zeros(shape, dtype=self.dtype))

    def _embedding(self, name, vocab, rng):
        d = self.config.d_model
        table = rng.normal(0.0, d ** -0.5, (vocab, d)).astype(self.dtype)
        table[0] = 0.0
        self.params.add(name, table)

    def _linear(self, name, n_in, n_out, rng, bias=True):
        self._xavier(f"{name}.weight", n_in, n_out, (n_in, n_out), rng)
        if bias:
            self._zeros(f"{name}.bias", (n_out,))

    def _conv(self, name, k, n_in, n_out, rng):
        self._xavier(f"{name}.weight", k * n_in, k * n_out, (k, n_in, n_out), rng)
        self._zeros(f"{name}.bias", (n_out,))

    def _norm(self, name, d):
        self.params.add(f"{name}.gamma", np.ones(d, dtype=self.dtype))
        self.params.add(f"{name}.beta", np.zeros(d, dtype=self.dtype))

    def _fft_stack(self, group, rng):
        c = self.config
        for i in range(c.n_blocks):
            p = f"{group}.block{i}"
            # a key bias only shifts each query's scores by a constant, which
            # softmax cancels, so the key projection has none
            for proj in ("query", "key", "value", "out"):
                self._linear(f"{p}.attn.{proj}", c.d_model, c.d_model, rng, bias=proj != "key")
            self._norm(f"{p}.norm1", c.d_model)
            self._conv(f"{p}.conv1", c.conv_kernels[0], c.d_model, c.conv_filter, rng)
            self._conv(f"{p}.conv2", c.conv_kernels[1], c.conv_filter, c.d_model, rng)
            self._norm(f"{p}.norm2", c.d_model)

    def group_names(self, group: str) -> list[str]:
        return [n for n, _ in self.params.in_group(group)]

    # ---------------------------------------------------------- blocks

    def _p(self, name):
        return self.params[name]

    def _dense(self, x, name):
        y = ad.matmul(x, self._p(f"{name}.weight"))
        bias = f"{name}.bias"
        return ad.add(y, self._p(bias)) if bias in self.params else y

    def attention(self, x: Tensor, mask: np.ndarray, prefix: str):
        """Multi-head self-attention; returns the output and the weight tensor (B, H, T, T)."""
        b, t, d = x.shape
        h = self.config.n_heads
        dh = d // h

        def heads(name, axes):
            y = ad.reshape(self._dense(x, f"{prefix}.attn.{name}"), (b, t, h, dh))
            return ad.transpose(y, axes)

        q = heads("query", (0, 2, 1, 3))  # (B, H, T, dh)
        k = heads("key", (0, 2, 3, 1))  # (B, H, dh, T)
        v = heads("value", (0, 2, 1, 3))
        scores = ad.scalar_mul(ad.matmul(q, k), 1.0 / math.sqrt(dh))
        bias = np.where(mask, 0.0, _NEG_INF).astype(self.dtype)[:, None, None, :]
        weights = ad.softmax(ad.add(scores, bias))
        ctx = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (b, t, d))
        return self._dense(ctx, f"{prefix}.attn.out"), weights

    def fft_block(self, x, mask: np.ndarray, prefix: str, training: bool = False, rng=None,
                  return_attention: bool = False):
        """Self-attention and two-conv feed-forward, each with residual and layer norm.

        PAD positions are zeroed after each sub-layer so they never leak
        into neighbouring frames through the convolutions.
        """
        x = ad.as_tensor(x)
        if x.data.ndim != 3 or x.shape[-1] != self.config.d_model:
            raise ShapeMismatch(f"{prefix} expects (B, T, {self.config.d_model})", x.shape)
        if mask.shape != x.shape[:2]:
            raise ShapeMismatch(f"{prefix} mask", mask.shape, x.shape[:2])
        p = self.config.dropout_fft
        m3 = _mask3(mask, self.dtype)
        attn, weights = self.attention(x, mask, prefix)
        attn = ad.dropout(attn, p, training, rng)
        h = ad.layer_norm(ad.add(x, attn), self._p(f"{prefix}.norm1.gamma"), self._p(f"{prefix}.norm1.beta"))
        h = ad.mul(h, m3)
        ff = ad.relu(ad.conv1d(h, self._p(f"{prefix}.conv1.weight"), self._p(f"{prefix}.conv1.bias")))
        ff = ad.conv1d(ff, self._p(f"{prefix}.conv2.weight"), self._p(f"{prefix}.conv2.bias"))
        ff = ad.dropout(ff, p, training, rng)
        y = ad.layer_norm(ad.add(h, ff), self._p(f"{prefix}.norm2.gamma"), self._p(f"{prefix}.norm2.beta"))
        y = ad.mul(y, m3)
        return (y, weights) if return_attention else y

    def _stack(self, x, mask, group, training, rng):
        for i in range(self.config.n_blocks):
            x = self.fft_block(x, mask, f"{group}.block{i}", training, rng)
        return x

    def _add_positions(self, x: Tensor, mask: np.ndarray) -> Tensor:
        t = x.shape[1]
        if t > self.config.max_seq_len:
            raise ShapeMismatch(f"sequence longer than max_seq_len={self.config.max_seq_len}", x.shape)
        return ad.mul(ad.add(x, self._pe[:t]), _mask3(mask, self.dtype))

    def _encode(self, group, ids, mask, vocab, training, rng):
        ids = np.asarray(ids)
        if ids.ndim != 2 or mask.shape != ids.shape:
            raise ShapeMismatch(f"{group} ids/mask", ids.shape, mask.shape)
        if ids.size and (ids.min() < 0 or ids.max() >= vocab):
            raise IdOutOfRange(f"{group}: id outside [0, {vocab})")
        x = ad.embedding(self._p(f"{group}.embedding"), np.where(mask, ids, 0))
        return self._stack(self._add_positions(x, mask), mask, group, training, rng)

    def encode_phonemes(self, ids, mask, training=False, rng=None) -> Tensor:
        return self._encode("phoneme_encoder", ids, mask, self.config.n_phonemes, training, rng)

    def encode_styles(self, ids, mask, training=False, rng=None) -> Tensor:
        return self._encode("style_encoder", ids, mask, self.config.n_tones, training, rng)

    def predict_durations(self, h, mask, training=False, rng=None) -> Tensor:
        """Per-token log(d + 1) predictions, zero on PAD; shape (B, N)."""
        h = ad.as_tensor(h)
        if h.data.ndim != 3 or h.shape[-1] != self.config.d_model or mask.shape != h.shape[:2]:
            raise ShapeMismatch("predict_durations", h.shape, mask.shape)
        m3 = _mask3(mask, self.dtype)
        p = self.config.dropout_duration
        x = ad.mul(h, m3)
        for i in (1, 2):
            x = ad.relu(ad.conv1d(x, self._p(f"duration_adaptor.conv{i}.weight"),
                                  self._p(f"duration_adaptor.conv{i}.bias")))
            x = ad.layer_norm(x, self._p(f"duration_adaptor.norm{i}.gamma"), self._p(f"duration_adaptor.norm{i}.beta"))
            x = ad.mul(ad.dropout(x, p, training, rng), m3)
        out = self._dense(x, "duration_adaptor.linear")
        out = ad.reshape(out, out.shape[:2])
        return ad.mul(out, mask.astype(self.dtype))

    def decode_mel(self, h, frame_mask, training=False, rng=None, style_frames=None) -> Tensor:
        """Mel decoder stack then the output projection; ``style_frames`` is added before the projection."""
        h = ad.as_tensor(h)
        if h.data.ndim != 3 or h.shape[-1] != self.config.d_model:
            raise ShapeMismatch("decode_mel", h.shape)
        b, m, _ = h.shape
        if m == 0:
            return Tensor(np.zeros((b, 0, self.config.n_mels), dtype=self.dtype))
        x = self._stack(self._add_positions(h, frame_mask), frame_mask, "mel_decoder", training, rng)
        if style_frames is not None:
            x = fuse(x, style_frames)
        y = self._dense(x, "output_linear")
        return ad.mul(y, _mask3(frame_mask, self.dtype))

    # --------------------------------------------------------- forward

    def forward(self, batch: Batch, training: bool = False, rng=None, use_gt_durations: bool | None = None,
                style: str = "normal") -> ForwardOutput:
        """Full pipeline for one batch.

        ``style`` selects the tone path: ``"normal"`` runs the style encoder,
        ``"zero"`` substitutes an all-zero style sequence, ``"none"`` skips
        fusion entirely (the style-free base pipeline).  Ground-truth
        durations are used when training, or whenever ``use_gt_durations``
        is true.
        """
        if style not in STYLE_MODES:
            raise ValueError(f"style must be one of {STYLE_MODES}")
        use_gt = training if use_gt_durations is None else use_gt_durations
        if use_gt and batch.durations is None:
            raise MissingDurations("ground-truth durations are required in training mode")
        mask = batch.token_mask
        stage = self.config.fusion_stage

        h_p = self.encode_phonemes(batch.phonemes, mask, training, rng)
        if style == "normal":
            h_s = self.encode_styles(batch.tones, mask, training, rng)
        elif style == "zero":
            h_s = Tensor(np.zeros(h_p.shape, dtype=self.dtype))
        else:
            h_s = None

        h_tok = fuse(h_p, h_s) if (stage == 0 and h_s is not None) else h_p
        log_dur = self.predict_durations(h_tok, mask, training, rng)
        if use_gt:
            durations = np.where(mask, np.asarray(batch.durations), 0).astype(np.int64)
        else:
            durations = durations_from_log(log_dur.data, mask)

        h_frames, frame_mask = length_regulate(h_tok, durations, mask)
        style_frames = None
        if h_s is not None and stage in (1, 2):
            s_frames, _ = length_regulate(h_s, durations, mask)
            if stage == 1:
                h_frames = fuse(h_frames, s_frames)
            else:
                style_frames = s_frames
        mel = self.decode_mel(h_frames, frame_mask, training, rng, style_frames)
        return ForwardOutput(mel, log_dur, durations, frame_mask, mask)

    def infer(self, phoneme_ids, tone_ids, style: str = "normal") -> tuple[np.ndarray, np.ndarray]:
        """Single-utterance inference: ``(mel frames x n_mels, durations)``."""
        batch = collate([list(phoneme_ids)], [list(tone_ids)])
        with ad.no_grad():
            out = self.forward(batch, training=False, style=style)
        return out.mel.data[0], out.durations[0]


def losses(model: AcousticModel, batch: Batch, out: ForwardOutput):
    """Masked mel MSE and log-duration MSE as scalar tensors."""
    if batch.mels is None or batch.durations is None:
        raise MissingDurations("loss needs target mels and durations")
    if out.mel.shape != batch.mels.shape:
        raise ShapeMismatch("predicted vs target mel", out.mel.shape, batch.mels.shape)
    mel_loss = ad.mse_loss(out.mel, batch.mels.astype(model.dtype), batch.frame_mask[..., None])
    target = np.log(np.asarray(batch.durations, dtype=np.float64) + 1.0).astype(model.dtype)
    dur_loss = ad.mse_loss(out.log_durations, target, batch.token_mask)
    return mel_loss, dur_loss
