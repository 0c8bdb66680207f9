"""Objective scoring: syllable/phoneme/tone WER, mel cepstral distortion, PESQ ingestion
and percentile-binned 1-5 ratings.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.fft import dct

from .dsp import MelSpectrogram
from .errors import DataError
from .pinyin import g2p, syllable_tokens

MCD_SCALE = 10.0 / math.log(10.0)
N_CEPSTRA = 13
PESQ_RANGE = (-0.5, 4.5)
LOWER_IS_BETTER = {"wer": True, "mcd": True, "pesq": False}
RATED_METRICS = ("wer", "mcd", "pesq")
METRIC_COLUMNS = ("WER", "WER-P", "WER-T", "MCD", "PESQ")
RATING_COLUMNS = ("WER", "MCD", "PESQ", "Overall")


class EmptyInput(DataError):
    pass


class MalformedLine(DataError):
    def __init__(self, path, lineno, reason):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.lineno = lineno


class EmptyPool(DataError):
    pass


class ScoringError(DataError):
    """G2P failed on one side of a reference/hypothesis pair."""

    def __init__(self, side: str, cause: Exception):
        super().__init__(f"{side}: {cause}")
        self.side = side


# ------------------------------------------------------------------- WER

def edit_distance(ref: Sequence, hyp: Sequence) -> tuple[int, int, int]:
    """Minimal ``(substitutions, deletions, insertions)`` turning ``ref`` into ``hyp``.

    Among equally short alignments the backtrace prefers match/substitution,
    then deletion, then insertion.
    """
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        r = ref[i - 1]
        for j in range(1, m + 1):
            sub = d[i - 1, j - 1] + (r != hyp[j - 1])
            d[i, j] = min(sub, d[i - 1, j] + 1, d[i, j - 1] + 1)
    s = dl = ins = 0
    i, j = n, m
    while i or j:
        if i and j and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i and d[i, j] == d[i - 1, j] + 1:
            dl += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(s), dl, ins


def wer(ref: Sequence, hyp: Sequence) -> float:
    """``(S + D + I) / len(ref)``; an empty reference scores ``len(hyp)``."""
    s, d, i = edit_distance(ref, hyp)
    if not ref:
        return float(len(hyp))
    return (s + d + i) / len(ref)


def _streams(sentence: str, side: str):
    try:
        tokens = g2p(sentence)
        return syllable_tokens(sentence), list(tokens.phonemes), list(tokens.tones)
    except DataError as exc:
        raise ScoringError(side, exc) from exc


def wer_levels(ref_sentence: str, hyp_sentence: str) -> tuple[float, float, float]:
    """``(wer, wer_p, wer_t)`` over syllables, phonemes and tones."""
    ref = _streams(ref_sentence, "reference")
    hyp = _streams(hyp_sentence, "hypothesis")
    return tuple(wer(r, h) for r, h in zip(ref, hyp))


# ------------------------------------------------------------------- MCD

def mel_to_cepstra(mel, n_coeffs: int = N_CEPSTRA) -> np.ndarray:
    """Orthonormal DCT-II across mel bands, keeping coefficients 1..n_coeffs."""
    values = mel.values if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    values = np.asarray(values, dtype=np.float64)
    return dct(values, type=2, norm="ortho", axis=1)[:, 1:n_coeffs + 1]


def dtw_path(a: np.ndarray, b: np.ndarray) -> list[tuple[int, int]]:
    """Symmetric DTW with Euclidean local cost and steps (1,0), (0,1), (1,1).

    Ties in accumulated cost go to the shorter path, then to the diagonal,
    so swapping the arguments yields the transposed path.
    """
    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
    n, m = cost.shape
    acc = np.full((n, m), np.inf)
    length = np.zeros((n, m), dtype=np.int64)
    acc[0, 0], length[0, 0] = cost[0, 0], 1
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            best = None
            for pi, pj in ((i - 1, j - 1), (i - 1, j), (i, j - 1)):
                if pi < 0 or pj < 0:
                    continue
                key = (acc[pi, pj], length[pi, pj])
                if best is None or key < best[0]:
                    best = (key, pi, pj)
            (c, l), _, _ = best
            acc[i, j] = c + cost[i, j]
            length[i, j] = l + 1
    path = [(n - 1, m - 1)]
    i, j = n - 1, m - 1
    while (i, j) != (0, 0):
        best = None
        for pi, pj in ((i - 1, j - 1), (i - 1, j), (i, j - 1)):
            if pi < 0 or pj < 0:
                continue
            ok = np.isclose(acc[pi, pj] + cost[i, j], acc[i, j], rtol=0, atol=1e-12 * max(1.0, acc[i, j])) \
                and length[pi, pj] + 1 == length[i, j]
            if ok:
                best = (pi, pj)
                break
        i, j = best
        path.append((i, j))
    return path[::-1]


def mcd(a, b, use_dtw: bool = True) -> float:
    """Mel cepstral distortion in dB between two log-mel spectrograms.

    With ``use_dtw=False`` frames are paired by index after truncating to
    the shorter input.
    """
    ca, cb = mel_to_cepstra(a), mel_to_cepstra(b)
    if len(ca) == 0 or len(cb) == 0:
        raise EmptyInput("mcd needs two nonempty spectrograms")
    if use_dtw:
        idx = np.array(dtw_path(ca, cb))
        ca, cb = ca[idx[:, 0]], cb[idx[:, 1]]
    else:
        n = min(len(ca), len(cb))
        ca, cb = ca[:n], cb[:n]
    frame_dist = np.sqrt(2.0 * ((ca - cb) ** 2).sum(axis=1))
    return float(MCD_SCALE * frame_dist.mean())


# ------------------------------------------------------------------ PESQ

def ingest_pesq(path) -> dict[str, float]:
    """Read ``utt_id<TAB>score`` lines from an external PESQ tool."""
    scores = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 2 or not parts[0]:
            raise MalformedLine(path, lineno, "expected utt_id<TAB>score")
        try:
            score = float(parts[1])
        except ValueError:
            raise MalformedLine(path, lineno, f"score {parts[1]!r} is not a number") from None
        if not (PESQ_RANGE[0] <= score <= PESQ_RANGE[1]):
            raise MalformedLine(path, lineno, f"score {score} outside PESQ range {PESQ_RANGE}")
        if parts[0] in scores:
            raise MalformedLine(path, lineno, f"duplicate utt_id {parts[0]!r}")
        scores[parts[0]] = score
    return scores


# --------------------------------------------------------------- ratings

@dataclass
class MetricReport:
    utt_id: str
    system_id: str
    wer: float
    wer_p: float
    wer_t: float
    mcd: float
    pesq: float | None = None

    def __post_init__(self):
        for name in ("wer", "wer_p", "wer_t", "mcd"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise DataError(f"{self.utt_id}: {name}={v} must be finite and >= 0")
        if self.pesq is not None and not (PESQ_RANGE[0] <= self.pesq <= PESQ_RANGE[1]):
            raise DataError(f"{self.utt_id}: pesq={self.pesq} outside {PESQ_RANGE}")

    def value(self, metric: str):
        return getattr(self, metric)


@dataclass
class MosRating:
    utt_id: str
    system_id: str
    ratings: dict[str, int] = field(default_factory=dict)

    @property
    def overall(self) -> float:
        return float(np.mean(list(self.ratings.values())))


def nearest_rank(values: Sequence[float], pct: float) -> float:
    """Value at 1-based index ``ceil(pct * n / 100)`` of the ascending sort."""
    ordered = sorted(values)
    idx = max(1, math.ceil(pct * len(ordered) / 100))
    return ordered[idx - 1]


def thresholds(values: Sequence[float], lower_is_better: bool = True) -> tuple[float, float, float, float]:
    """Cut points for ratings 5, 4, 3 and 2, best first.

    Higher-is-better metrics are binned as the mirror image of the
    lower-is-better rule, so both orientations give equally sized bins.
    """
    if lower_is_better:
        return tuple(nearest_rank(values, p) for p in (20, 40, 60, 80))
    negated = [-v for v in values]
    return tuple(-nearest_rank(negated, p) for p in (20, 40, 60, 80))


def rate_value(value: float, cuts: Sequence[float], lower_is_better: bool) -> int:
    for rating, cut in zip((5, 4, 3, 2), cuts):
        if (value <= cut) if lower_is_better else (value >= cut):
            return rating
    return 1


def llm_mos(pool: Sequence[MetricReport],
            rater: Callable[[str, MetricReport, tuple], int] | None = None) -> list[MosRating]:
    """Percentile-binned 1-5 ratings per metric plus their mean, over a pooled set of systems.

    ``rater(metric, report, cuts)`` may replace the built-in binning, e.g.
    with scores from an external judge; it must return an integer 1-5.
    """
    if not pool:
        raise EmptyPool("cannot rate an empty pool")
    cuts = {}
    for metric in RATED_METRICS:
        present = [r.value(metric) for r in pool if r.value(metric) is not None]
        if present:
            cuts[metric] = thresholds(present, LOWER_IS_BETTER[metric])
    out = []
    for report in pool:
        rating = MosRating(report.utt_id, report.system_id)
        for metric, c in cuts.items():
            v = report.value(metric)
            if v is None:
                continue
            r = rater(metric, report, c) if rater else rate_value(v, c, LOWER_IS_BETTER[metric])
            if r not in (1, 2, 3, 4, 5):
                raise ValueError(f"rating {r!r} for {metric} is not in 1..5")
            rating.ratings[metric] = int(r)
        out.append(rating)
    return out


# --------------------------------------------------------------- reports

def _fmt(v, digits):
    return "" if v is None else f"{v:.{digits}f}"


def _mean_std(values, digits):
    values = [v for v in values if v is not None]
    if not values:
        return ""
    return f"{np.mean(values):.{digits}f} ± {np.std(values):.{digits}f}"


def _systems(items):
    return list(dict.fromkeys(x.system_id for x in items))


def format_metric_report(reports: Sequence[MetricReport]) -> str:
    """Per-utterance rows, then per-system mean ± std."""
    lines = ["# per-utterance", "\t".join(("utt_id", "system") + METRIC_COLUMNS)]
    for r in reports:
        vals = (r.wer, r.wer_p, r.wer_t, r.mcd, r.pesq)
        lines.append("\t".join([r.utt_id, r.system_id] + [_fmt(v, 4) for v in vals]))
    lines += ["", "# per-system (mean ± std)", "\t".join(("system",) + METRIC_COLUMNS)]
    for sys_id in _systems(reports):
        rows = [r for r in reports if r.system_id == sys_id]
        cols = [[getattr(r, k) for r in rows] for k in ("wer", "wer_p", "wer_t", "mcd", "pesq")]
        lines.append("\t".join([sys_id] + [_mean_std(c, 3) for c in cols]))
    return "\n".join(lines) + "\n"


def parse_metric_report(text: str, source: str = "<report>") -> list[MetricReport]:
    """Read back the per-utterance section written by :func:`format_metric_report`."""
    reports, in_rows = [], False
    for lineno, line in enumerate(text.splitlines(), 1):
        if line.startswith("# per-utterance"):
            in_rows = True
            continue
        if line.startswith("#") or not line.strip():
            in_rows = False if line.startswith("#") else in_rows
            continue
        if not in_rows or line.startswith("utt_id\t"):
            continue
        parts = line.split("\t")
        if len(parts) != 7:
            raise MalformedLine(source, lineno, "expected 7 tab-separated fields")
        try:
            nums = [float(p) if p else None for p in parts[2:]]
        except ValueError:
            raise MalformedLine(source, lineno, "non-numeric metric") from None
        if any(v is None for v in nums[:4]):
            raise MalformedLine(source, lineno, "WER and MCD columns are required")
        reports.append(MetricReport(parts[0], parts[1], *nums))
    return reports


def format_rating_report(ratings: Sequence[MosRating]) -> str:
    """Per-utterance ratings, then per-system mean ± std."""
    keys = ("wer", "mcd", "pesq")
    lines = ["# per-utterance", "\t".join(("utt_id", "system") + RATING_COLUMNS)]
    for r in ratings:
        vals = [r.ratings.get(k) for k in keys]
        lines.append("\t".join([r.utt_id, r.system_id] + ["" if v is None else str(v) for v in vals]
                               + [f"{r.overall:.2f}"]))
    lines += ["", "# per-system (mean ± std)", "\t".join(("system",) + RATING_COLUMNS)]
    for sys_id in _systems(ratings):
        rows = [r for r in ratings if r.system_id == sys_id]
        cols = [[r.ratings.get(k) for r in rows] for k in keys] + [[r.overall for r in rows]]
        lines.append("\t".join([sys_id] + [_mean_std(c, 2) for c in cols]))
    return "\n".join(lines) + "\n"


def read_transcripts(path) -> dict[str, str]:
    """``utt_id<TAB>pinyin sentence`` lines."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0]:
            raise MalformedLine(path, lineno, "expected utt_id<TAB>sentence")
        if parts[0] in out:
            raise MalformedLine(path, lineno, f"duplicate utt_id {parts[0]!r}")
        out[parts[0]] = parts[1]
    return out
