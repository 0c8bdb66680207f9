"""Pinyin front end: syllable parsing, G2P into phoneme/tone streams, vocabularies.

A syllable such as ``hao3`` is split into an initial (``h``), a final
(``ao``) and a lexical tone (3).  The G2P step emits one token per initial
and one per final; initials carry the placeholder tone 0 so both streams
stay position-aligned::

    >>> g2p("ni3 hao3")
    AcousticTokens(phonemes=('n', 'i', 'h', 'ao'), tones=(0, 3, 0, 3))

Finals are stored in canonical form: ``v`` for u-umlaut, ``iu``/``ui``/``un``
for the contracted spellings, ``ii``/``iii`` for the apical vowels after
z/c/s and zh/ch/sh/r.  Zero-initial spellings (``yi``, ``wu``, ``yue``...) map
onto the bare finals.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

INITIALS = (
    "b", "p", "m", "f", "d", "t", "n", "l", "g", "k", "h",
    "j", "q", "x", "zh", "ch", "sh", "r", "z", "c", "s",
)

FINALS = (
    "a", "o", "e", "io", "er", "ai", "ei", "ao", "ou",
    "an", "en", "ang", "eng", "ong",
    "i", "ia", "ie", "iao", "iu", "ian", "in", "iang", "ing", "iong",
    "u", "ua", "uo", "uai", "ui", "uan", "un", "uang", "ueng",
    "v", "ve", "van", "vn",
    "ii", "iii",
)

PLACEHOLDER_TONE = 0
NEUTRAL_TONE = 5
TONES = (0, 1, 2, 3, 4, 5)
PAD = "PAD"

# bare final -> zero-initial spelling
_ZERO_SPELLING = {
    "i": "yi", "ia": "ya", "ie": "ye", "iao": "yao", "iu": "you", "ian": "yan",
    "in": "yin", "iang": "yang", "ing": "ying", "iong": "yong", "io": "yo",
    "u": "wu", "ua": "wa", "uo": "wo", "uai": "wai", "ui": "wei", "uan": "wan",
    "un": "wen", "uang": "wang", "ueng": "weng",
    "v": "yu", "ve": "yue", "van": "yuan", "vn": "yun",
}
_ZERO_PARSE = {spelled: final for final, spelled in _ZERO_SPELLING.items()}
_BARE_ZERO_FINALS = frozenset(
    {"a", "o", "e", "er", "ai", "ei", "ao", "ou", "an", "en", "ang", "eng"}
)
# longest match first: zh/ch/sh before z/c/s
_INITIALS_BY_LENGTH = sorted(INITIALS, key=len, reverse=True)
_FINAL_SET = frozenset(FINALS)

_TOKEN_RE = re.compile(r"^([a-z]+)([0-9]?)$")
_STRIP_RE = re.compile(r"[^a-z0-9]")


class UnknownSyllable(DataError):
    pass


class BadToneDigit(DataError):
    pass


class UnknownSymbol(DataError, KeyError):
    def __init__(self, symbol):
        super().__init__(symbol)
        self.symbol = symbol

    def __str__(self):
        return f"unknown symbol {self.symbol!r}"


class G2PError(DataError):
    """A syllable failed to parse; ``position`` is its index in the sentence."""

    def __init__(self, position: int, token: str, cause: DataError):
        super().__init__(f"token {position} ({token!r}): {cause}")
        self.position = position
        self.token = token
        self.cause = cause


@dataclass(frozen=True)
class Syllable:
    initial: str | None
    final: str
    tone: int

    def spell(self) -> str:
        """Inverse of :func:`parse_syllable` on normalized input."""
        final = self.final
        if self.initial is None:
            letters = _ZERO_SPELLING.get(final, final)
        else:
            if final in ("ii", "iii"):
                final = "i"
            elif self.initial in ("j", "q", "x") and final.startswith("v"):
                final = "u" + final[1:]
            letters = self.initial + final
        return f"{letters}{self.tone}"


@dataclass(frozen=True)
class AcousticTokens:
    """Position-aligned phoneme symbols and tone values for one utterance."""

    phonemes: tuple[str, ...]
    tones: tuple[int, ...]

    def __post_init__(self):
        if len(self.phonemes) != len(self.tones):
            raise ValueError(
                f"phoneme/tone streams differ in length: {len(self.phonemes)} != {len(self.tones)}"
            )

    def __len__(self):
        return len(self.phonemes)


def normalize_syllable(text: str) -> str:
    """Lowercase, map u-umlaut to ``v``, drop punctuation and erhua, default the tone.

    A missing tone digit or the digit 0 both mean the neutral tone (5).
    Returns an empty string when nothing but punctuation was given.
    """
    s = text.strip().lower().replace("ü", "v").replace("u:", "v")
    s = _STRIP_RE.sub("", s)
    if not s:
        return ""
    m = _TOKEN_RE.match(s)
    if m is None:
        raise UnknownSyllable(f"not a pinyin syllable: {text!r}")
    letters, digit = m.groups()
    if digit and digit not in "012345":
        raise BadToneDigit(f"tone digit {digit!r} outside 0-5 in {text!r}")
    tone = int(digit) if digit else NEUTRAL_TONE
    if tone == 0:
        tone = NEUTRAL_TONE
    if letters.endswith("r") and letters != "er" and len(letters) > 1:
        letters = letters[:-1]
    return f"{letters}{tone}"


def parse_syllable(text: str) -> Syllable:
    norm = normalize_syllable(text)
    if not norm:
        raise UnknownSyllable(f"empty syllable: {text!r}")
    letters, tone = norm[:-1], int(norm[-1])

    if letters in _ZERO_PARSE:
        return Syllable(None, _ZERO_PARSE[letters], tone)
    if letters in _BARE_ZERO_FINALS:
        return Syllable(None, letters, tone)

    for initial in _INITIALS_BY_LENGTH:
        if letters.startswith(initial):
            break
    else:
        raise UnknownSyllable(f"no initial or zero-initial form matches {text!r}")

    final = letters[len(initial):]
    if initial in ("j", "q", "x"):
        if final.startswith("u"):
            final = "v" + final[1:]
        elif not final.startswith("i"):
            raise UnknownSyllable(f"{initial!r} cannot precede {final!r} in {text!r}")
    elif final == "i" and initial in ("z", "c", "s"):
        final = "ii"
    elif final == "i" and initial in ("zh", "ch", "sh", "r"):
        final = "iii"
    # literal spellings of canonical-only finals ("zii", "jv") do not round-trip
    literal = letters[len(initial):]
    if final not in _FINAL_SET or literal in ("ii", "iii") or (initial in "jqx" and literal.startswith("v")):
        raise UnknownSyllable(f"unknown final {final!r} in {text!r}")
    return Syllable(initial, final, tone)


def syllable_tokens(sentence: str) -> list[str]:
    """Normalized syllables of a whitespace-separated sentence, punctuation dropped."""
    out = []
    for position, raw in enumerate(sentence.split()):
        try:
            norm = normalize_syllable(raw)
        except DataError as exc:
            raise G2PError(position, raw, exc) from exc
        if norm:
            out.append(norm)
    return out


def g2p(sentence: str) -> AcousticTokens:
    phonemes: list[str] = []
    tones: list[int] = []
    for position, raw in enumerate(sentence.split()):
        try:
            if not normalize_syllable(raw):
                continue
            syl = parse_syllable(raw)
        except DataError as exc:
            raise G2PError(position, raw, exc) from exc
        if syl.initial is not None:
            phonemes.append(syl.initial)
            tones.append(PLACEHOLDER_TONE)
        phonemes.append(syl.final)
        tones.append(syl.tone)
    return AcousticTokens(tuple(phonemes), tuple(tones))


class SymbolTable:
    """Bijective symbol <-> id map with ``PAD`` reserved at id 0."""

    def __init__(self, symbols: Iterable[str]):
        symbols = [str(s) for s in symbols]
        if PAD in symbols:
            raise ValueError("PAD is reserved and added automatically")
        self.symbols: tuple[str, ...] = (PAD, *symbols)
        self._ids = {s: i for i, s in enumerate(self.symbols)}
        if len(self._ids) != len(self.symbols):
            raise ValueError("duplicate symbols in table")

    def __len__(self):
        return len(self.symbols)

    def __contains__(self, symbol):
        return str(symbol) in self._ids

    def __eq__(self, other):
        return isinstance(other, SymbolTable) and self.symbols == other.symbols

    def __repr__(self):
        return f"SymbolTable({len(self)} symbols)"

    def encode(self, tokens: Sequence) -> list[int]:
        ids = []
        for tok in tokens:
            try:
                idx = self._ids[str(tok)]
            except KeyError:
                raise UnknownSymbol(str(tok)) from None
            if idx == 0:
                raise UnknownSymbol(PAD)
            ids.append(idx)
        return ids

    def decode(self, ids: Sequence[int]) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if not 0 < i < len(self.symbols):
                raise UnknownSymbol(f"id {i}")
            out.append(self.symbols[i])
        return out

    def to_list(self) -> list[str]:
        return list(self.symbols[1:])

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.symbols) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SymbolTable":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != PAD:
            raise DataError(f"{path}: vocabulary must start with a PAD line")
        return cls(lines[1:])


def phoneme_table() -> SymbolTable:
    return SymbolTable(INITIALS + FINALS)


def tone_table() -> SymbolTable:
    return SymbolTable(str(t) for t in TONES)


def encode_tokens(tokens: AcousticTokens, phones: SymbolTable, tones: SymbolTable):
    """ID arrays ``(phoneme_ids, tone_ids)`` as int64 vectors."""
    return (
        np.asarray(phones.encode(tokens.phonemes), dtype=np.int64),
        np.asarray(tones.encode(tokens.tones), dtype=np.int64),
    )
