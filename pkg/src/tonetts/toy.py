"""Synthetic pinyin corpus with exact frame alignments, for smoke tests and demos.

Initials are rendered as filtered-noise bursts, finals as harmonic tones
whose pitch follows the Mandarin tone contour, over a constant noise floor.
Each token occupies a whole number of STFT frames, so the manifest durations
are exact.  All noise is periodic in the hop length, which gives every frame
of a stationary segment the same spectrum and keeps the targets learnable.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.signal.windows import tukey

from . import dsp
from .pinyin import FINALS, INITIALS, g2p

# start/end pitch multipliers of the tone contours
_CONTOURS = {1: (1.25, 1.25), 2: (0.95, 1.3), 3: (0.9, 0.75), 4: (1.35, 0.8), 5: (1.0, 0.95)}

NOISE_FLOOR = 0.03

TOY_SENTENCES = {
    "toy001": "ni3 hao3",
    "toy002": "chong1 chong2",
    "toy003": "wo3 ai4 ni3 men5",
}


def _token_frames(tokens, rng):
    return [int(rng.integers(2, 4)) if t == 0 else int(rng.integers(5, 9)) for t in tokens.tones]


def frozen_noise(n: int, hop: int, seed: int, smooth: int = 1) -> np.ndarray:
    """White noise repeating every ``hop`` samples, optionally box-filtered (circularly)."""
    period = np.random.default_rng(seed).standard_normal(hop)
    if smooth > 1:
        period = np.real(np.fft.ifft(np.fft.fft(period) * np.fft.fft(np.ones(smooth) / smooth, hop)))
    return np.tile(period, n // hop + 1)[:n]


def render(sentence: str, seed: int = 0, sample_rate: int = dsp.DEFAULT_SR, hop: int = dsp.HOP,
           durations=None):
    """Return ``(audio, durations)``; ``sum(durations)`` equals the STFT frame count."""
    tokens = g2p(sentence)
    rng = np.random.default_rng(seed)
    durations = list(durations) if durations is not None else _token_frames(tokens, rng)
    n_frames = sum(durations)
    samples = np.zeros(max(n_frames - 1, 0) * hop)
    start = 0
    for phone, tone, d in zip(tokens.phonemes, tokens.tones, durations):
        lo, hi = start * hop, min((start + d) * hop, len(samples))
        start += d
        n = hi - lo
        if n <= 0:
            continue
        t = np.arange(n) / sample_rate
        env = tukey(n, 0.2)
        if tone == 0:
            # consonant burst, colour fixed by the initial's identity
            k = INITIALS.index(phone) + 1
            samples[lo:hi] += 0.15 * env * frozen_noise(n, hop, k, smooth=k)
        else:
            base = 140.0 + 6.0 * FINALS.index(phone)
            a, b = _CONTOURS[tone]
            f0 = base * np.linspace(a, b, n)
            phase = 2 * np.pi * np.cumsum(f0) / sample_rate
            partials = sum(np.sin(h * phase) / h for h in range(1, 6))
            samples[lo:hi] += 0.2 * env * partials
    samples += NOISE_FLOOR * frozen_noise(len(samples), hop, 999)
    return dsp.AudioBuffer(np.clip(samples, -1, 1), sample_rate), durations


def write_corpus(outdir, sentences: dict[str, str] | None = None, seed: int = 0,
                 sample_rate: int = dsp.DEFAULT_SR, with_durations: bool = True) -> Path:
    """Write WAVs and a manifest TSV; returns the manifest path."""
    outdir = Path(outdir)
    (outdir / "wavs").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (utt, text) in enumerate(sorted((sentences or TOY_SENTENCES).items())):
        audio, durations = render(text, seed + i, sample_rate)
        dsp.save_wav(outdir / "wavs" / f"{utt}.wav", audio)
        row = [utt, text, f"wavs/{utt}.wav"]
        if with_durations:
            row.append(",".join(map(str, durations)))
        rows.append("\t".join(row))
    manifest = outdir / "manifest.tsv"
    manifest.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return manifest
