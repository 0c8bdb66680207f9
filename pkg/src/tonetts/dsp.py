"""Audio I/O and spectral transforms: STFT/ISTFT, log-mel features, Griffin-Lim."""
from __future__ import annotations

import json
import logging
import os
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, TtsError

log = logging.getLogger(__name__)

DEFAULT_SR = 48000
N_FFT = 1024
HOP = 512
N_MELS = 80
LOG_OFFSET = 1e-5


class UnsupportedFormat(DataError):
    pass


class IoFailure(DataError, OSError):
    pass


class BadFrameParams(TtsError, ValueError):
    pass


class BadBandEdges(TtsError, ValueError):
    pass


class MetadataMismatch(DataError):
    pass


class NegativeMagnitude(TtsError, ValueError):
    pass


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio contains non-finite samples")

    def __len__(self):
        return len(self.samples)


@dataclass
class ComplexSpectrogram:
    """``frames x (n_fft // 2 + 1)`` complex STFT plus framing metadata."""

    values: np.ndarray
    n_fft: int
    hop: int
    sample_rate: int
    length: int  # signal length in samples, for exact-length inversion
    pad_mode: str = "reflect"


@dataclass
class MelSpectrogram:
    """``frames x n_mels`` natural-log mel power."""

    values: np.ndarray
    sample_rate: int = DEFAULT_SR
    n_fft: int = N_FFT
    hop: int = HOP
    n_mels: int = N_MELS
    log_offset: float = LOG_OFFSET
    extra: dict = field(default_factory=dict, repr=False)

    @property
    def n_frames(self):
        return self.values.shape[0]

    def metadata(self) -> dict:
        return {
            "n_frames": int(self.n_frames),
            "n_mels": int(self.n_mels),
            "sr": int(self.sample_rate),
            "n_fft": int(self.n_fft),
            "hop": int(self.hop),
            "log_offset": float(self.log_offset),
        }


# ---------------------------------------------------------------- wav I/O

def load_wav(path) -> AudioBuffer:
    """Read 16-bit PCM WAV; stereo is averaged to mono with a warning."""
    try:
        with wave.open(str(path), "rb") as w:
            width, channels, sr = w.getsampwidth(), w.getnchannels(), w.getframerate()
            raw = w.readframes(w.getnframes())
    except wave.Error as exc:
        raise UnsupportedFormat(f"{path}: {exc}") from exc
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    if width != 2:
        raise UnsupportedFormat(f"{path}: {8 * width}-bit samples, only 16-bit PCM is supported")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels > 1:
        log.warning("%s: %d channels averaged to mono", path, channels)
        pcm = pcm.reshape(-1, channels).mean(axis=1)
    return AudioBuffer(pcm, sr)


def save_wav(path, audio: AudioBuffer) -> None:
    """Write 16-bit mono PCM (round to nearest, clip) via a temp file and rename."""
    pcm = np.clip(np.rint(audio.samples * 32768.0), -32768, 32767).astype("<i2")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with wave.open(str(tmp), "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(2)
            w.setframerate(int(audio.sample_rate))
            w.writeframes(pcm.tobytes())
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc


# ------------------------------------------------------------------- STFT

def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def _check_frames(n_fft, hop):
    if n_fft < 2 or n_fft & (n_fft - 1):
        raise BadFrameParams(f"n_fft must be a power of two, got {n_fft}")
    if not 0 < hop <= n_fft:
        raise BadFrameParams(f"hop must be in (0, n_fft], got {hop}")


def stft(audio: AudioBuffer, n_fft: int = N_FFT, hop: int = HOP, pad_mode: str = "reflect") -> ComplexSpectrogram:
    """Hann-windowed, centered STFT; ``1 + len // hop`` frames."""
    _check_frames(n_fft, hop)
    x = np.asarray(audio.samples, dtype=np.float64)
    pad = n_fft // 2
    if pad_mode == "reflect" and len(x) <= pad:
        # reflect needs more samples than the pad width
        pad_mode = "constant"
    xp = np.pad(x, pad, mode=pad_mode)
    n_frames = 1 + len(x) // hop
    need = (n_frames - 1) * hop + n_fft
    if len(xp) < need:
        xp = np.pad(xp, (0, need - len(xp)))
    frames = np.lib.stride_tricks.sliding_window_view(xp, n_fft)[::hop][:n_frames]
    spec = np.fft.rfft(frames * hann(n_fft), axis=1)
    return ComplexSpectrogram(spec, n_fft, hop, audio.sample_rate, len(x), pad_mode)


def istft(spec: ComplexSpectrogram, length: int | None = None) -> AudioBuffer:
    """Weighted overlap-add inverse with window-square normalization.

    This is the least-squares signal estimate for the given frames, so for
    zero-padded framing it is the exact projection used by Griffin-Lim.
    """
    n_fft, hop = spec.n_fft, spec.hop
    _check_frames(n_fft, hop)
    if spec.values.shape[1] != n_fft // 2 + 1:
        raise BadFrameParams(f"expected {n_fft // 2 + 1} bins, got {spec.values.shape[1]}")
    length = spec.length if length is None else length
    n_frames = spec.values.shape[0]
    win = hann(n_fft)
    frames = np.fft.irfft(spec.values, n=n_fft, axis=1) * win
    total = (n_frames - 1) * hop + n_fft
    y = np.zeros(total)
    norm = np.zeros(total)
    w2 = win * win
    for i in range(n_frames):
        y[i * hop:i * hop + n_fft] += frames[i]
        norm[i * hop:i * hop + n_fft] += w2
    nz = norm > 1e-10
    y[nz] /= norm[nz]
    y[~nz] = 0.0
    pad = n_fft // 2
    out = y[pad:pad + length]
    if len(out) < length:
        out = np.pad(out, (0, length - len(out)))
    return AudioBuffer(out, spec.sample_rate)


# -------------------------------------------------------------------- mel

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sr: int, n_fft: int, n_mels: int = N_MELS, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filterbank of shape ``(n_mels, n_fft // 2 + 1)``."""
    fmax = sr / 2 if fmax is None else fmax
    if not 0 <= fmin < fmax <= sr / 2:
        raise BadBandEdges(f"need 0 <= fmin < fmax <= sr/2, got fmin={fmin}, fmax={fmax}, sr={sr}")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = ~fb.any(axis=1)
    if empty.any():
        # filter narrower than one FFT bin: give it its nearest bin
        for m in np.flatnonzero(empty):
            fb[m, int(np.argmin(np.abs(freqs - edges[m + 1])))] = 1.0
    return fb


_FB_CACHE: dict[tuple, np.ndarray] = {}


def _filterbank_for(sr, n_fft, n_mels):
    key = (sr, n_fft, n_mels)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(sr, n_fft, n_mels)
    return _FB_CACHE[key]


def wav_to_logmel(audio: AudioBuffer, n_fft: int = N_FFT, hop: int = HOP, n_mels: int = N_MELS) -> MelSpectrogram:
    power = np.abs(stft(audio, n_fft, hop).values) ** 2
    fb = _filterbank_for(audio.sample_rate, n_fft, n_mels)
    values = np.log(power @ fb.T + LOG_OFFSET)
    return MelSpectrogram(values, audio.sample_rate, n_fft, hop, n_mels, LOG_OFFSET)


def mel_to_linear(mel: MelSpectrogram, n_iter: int = 50) -> np.ndarray:
    """Nonnegative magnitude spectrogram ``frames x bins`` whose mel projection fits ``mel``.

    The mel power is recovered from the log, then a nonnegative least-squares
    fit ``fb @ P ~= M`` is refined with multiplicative updates; the magnitude
    is ``sqrt(P)``.
    """
    if mel.values.ndim != 2 or mel.values.shape[1] != mel.n_mels:
        raise MetadataMismatch(f"mel matrix {mel.values.shape} does not match n_mels={mel.n_mels}")
    if mel.log_offset <= 0:
        raise MetadataMismatch("log_offset must be positive")
    try:
        fb = _filterbank_for(mel.sample_rate, mel.n_fft, mel.n_mels)
    except (BadBandEdges, BadFrameParams) as exc:
        raise MetadataMismatch(str(exc)) from exc
    target = np.maximum(np.exp(np.asarray(mel.values, dtype=np.float64)) - mel.log_offset, 0.0)
    # target rows are frames; solve fb @ p = t per frame, all frames at once
    gram = fb.T @ fb
    numer = target @ fb
    col = fb.sum(axis=0)
    weight = np.where(col > 0, col, 1.0)
    # start from the filter-weighted back-projection normalized per bin
    band_energy = target / np.maximum(fb.sum(axis=1), 1e-12)
    p = (band_energy @ fb) / weight
    for _ in range(n_iter):
        p *= numer / np.maximum(p @ gram, 1e-30)
    p = np.where(numer > 0, p, 0.0)
    return np.sqrt(np.maximum(p, 0.0))


# ----------------------------------------------------------- Griffin-Lim

def spectral_distance(audio: AudioBuffer, mag: np.ndarray, n_fft: int, hop: int, pad_mode="constant") -> float:
    return float(np.linalg.norm(np.abs(stft(audio, n_fft, hop, pad_mode).values) - mag))


def griffin_lim(mag: np.ndarray, n_iter: int = 60, seed: int = 0, *, n_fft: int = N_FFT, hop: int = HOP,
                sample_rate: int = DEFAULT_SR, length: int | None = None, momentum: float = 0.9,
                history: list | None = None) -> AudioBuffer:
    """Phase retrieval by alternating projections from a seeded random phase.

    Each step projects onto consistent spectrograms (ISTFT then STFT) and
    then back onto the target magnitude.  ``momentum > 0`` extrapolates
    along the last update (accelerated Griffin-Lim); a step whose spectral
    distance ``|| |stft(x)| - mag ||`` would grow is replaced by the plain
    projection from the last accepted estimate, so the distance sequence
    never increases.  ``momentum=0`` is the classic iteration.

    Framing uses zero center padding so that :func:`istft` is the exact
    least-squares inverse, which is what makes the projection step
    non-expansive.  If ``history`` is a list, the distance of the initial
    estimate and of every accepted iterate are appended to it.
    """
    mag = np.asarray(mag, dtype=np.float64)
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    if np.any(mag < 0):
        raise NegativeMagnitude("magnitude spectrogram has negative entries")
    if mag.ndim != 2 or mag.shape[1] != n_fft // 2 + 1:
        raise BadFrameParams(f"expected {n_fft // 2 + 1} bins, got shape {mag.shape}")
    if length is None:
        length = (mag.shape[0] - 1) * hop

    def consistent(spec_values):
        audio = istft(ComplexSpectrogram(spec_values, n_fft, hop, sample_rate, length, "constant"))
        rebuilt = stft(audio, n_fft, hop, "constant").values
        return audio, rebuilt, float(np.linalg.norm(np.abs(rebuilt) - mag))

    rng = np.random.default_rng(seed)
    audio, rebuilt, dist = consistent(mag * np.exp(2j * np.pi * rng.random(mag.shape)))
    if history is not None:
        history.append(dist)
    accepted = mag * np.exp(1j * np.angle(rebuilt))
    target = accepted
    for _ in range(n_iter):
        cand_audio, cand, cand_dist = consistent(target)
        if cand_dist > dist:
            cand_audio, cand, cand_dist = consistent(accepted)
            step = mag * np.exp(1j * np.angle(cand))
            target = step
        else:
            step = mag * np.exp(1j * np.angle(cand))
            target = step + momentum * (step - accepted) if momentum else step
        accepted, audio, dist = step, cand_audio, cand_dist
        if history is not None:
            history.append(dist)
    return audio


def mel_to_audio(mel: MelSpectrogram, n_iter: int = 60, seed: int = 0) -> AudioBuffer:
    mag = mel_to_linear(mel)
    return griffin_lim(mag, n_iter, seed, n_fft=mel.n_fft, hop=mel.hop, sample_rate=mel.sample_rate)


# --------------------------------------------------------------- mel files

def save_mel(path, mel: MelSpectrogram) -> None:
    """Raw little-endian float32 ``frames x n_mels`` plus a ``.json`` sidecar."""
    path = Path(path)
    blob = np.ascontiguousarray(mel.values, dtype="<f4").tobytes()
    meta = json.dumps(mel.metadata(), sort_keys=True, indent=1) + "\n"
    _atomic_write(path, blob)
    _atomic_write(sidecar_path(path), meta.encode("utf-8"))


def load_mel(path) -> MelSpectrogram:
    path = Path(path)
    try:
        meta = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
        blob = path.read_bytes()
    except (OSError, ValueError) as exc:
        raise IoFailure(f"{path}: {exc}") from exc
    n_frames, n_mels = int(meta["n_frames"]), int(meta["n_mels"])
    values = np.frombuffer(blob, dtype="<f4")
    if values.size != n_frames * n_mels:
        raise MetadataMismatch(f"{path}: {values.size} floats, sidecar says {n_frames}x{n_mels}")
    return MelSpectrogram(values.reshape(n_frames, n_mels).astype(np.float32), int(meta["sr"]),
                          int(meta["n_fft"]), int(meta["hop"]), n_mels, float(meta["log_offset"]))


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
