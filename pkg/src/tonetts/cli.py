"""Command-line pipeline: prepare features, train, fine-tune, synthesize, score and rate.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp, evaluation
from . import trainer as tr
from .errors import DataError, NumericError, TtsError
from .model import ModelConfig
from .pinyin import SymbolTable, encode_tokens, g2p, phoneme_table, tone_table

log = logging.getLogger("tonetts")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SPLITS = ("train", "test")


class ConfigError(TtsError, ValueError):
    """Bad configuration file or flag combination (exit code 2)."""


class ParseError(DataError):
    def __init__(self, utt_id: str, reason: str):
        super().__init__(f"{utt_id}: {reason}")
        self.utt_id = utt_id


class MissingWav(DataError):
    pass


class JoinFailure(DataError):
    def __init__(self, missing: dict[str, list[str]]):
        parts = [f"{src}: {', '.join(ids)}" for src, ids in missing.items() if ids]
        super().__init__("ids missing from " + "; ".join(parts))
        self.missing = missing


# ---------------------------------------------------------------- config

@dataclass
class DspConfig:
    n_fft: int = dsp.N_FFT
    hop: int = dsp.HOP
    n_mels: int = dsp.N_MELS
    griffin_lim_iters: int = 60
    nnls_iters: int = 50

    def validate(self):
        if self.n_fft < 2 or self.hop < 1 or self.hop > self.n_fft:
            raise ConfigError(f"need 1 <= hop <= n_fft, got n_fft={self.n_fft} hop={self.hop}")
        if self.n_mels < 1 or self.griffin_lim_iters < 0 or self.nnls_iters < 0:
            raise ConfigError("n_mels must be >= 1 and iteration counts >= 0")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: tr.TrainConfig = field(default_factory=tr.TrainConfig)
    dsp: DspConfig = field(default_factory=DspConfig)
    seed: int = 0


def _section(cls, values, name):
    if not isinstance(values, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    known = set(cls.__dataclass_fields__)
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        obj = cls(**values)
        obj.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc
    return obj


def load_config(args: argparse.Namespace) -> RunConfig:
    """Config file values, then command-line overrides, fully validated."""
    raw = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    unknown = set(raw) - {"model", "train", "dsp", "seed"}
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    train = dict(raw.get("train", {}))
    seed = raw.get("seed", train.get("seed", 0))
    overrides = {"seed": getattr(args, "seed", None), "fusion_stage": getattr(args, "fusion_stage", None),
                 "mode": getattr(args, "mode", None), "steps": getattr(args, "steps", None),
                 "batch_size": getattr(args, "batch_size", None),
                 "warmup_steps": getattr(args, "warmup_steps", None)}
    for key, value in overrides.items():
        if value is not None:
            train[key] = value
    if getattr(args, "seed", None) is not None:
        seed = args.seed
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    train["seed"] = seed
    model = dict(raw.get("model", {}))
    if "fusion_stage" in train:
        model["fusion_stage"] = train["fusion_stage"]
    return RunConfig(_section(ModelConfig, model, "model"), _section(tr.TrainConfig, train, "train"),
                     _section(DspConfig, raw.get("dsp", {}), "dsp"), seed)


# ---------------------------------------------------------------- prepare

@dataclass
class ManifestRow:
    utt_id: str
    text: str
    wav: Path
    durations: list[int] | None
    split: str


def read_manifest(path) -> list[ManifestRow]:
    """``utt_id<TAB>pinyin<TAB>wav[<TAB>durations][<TAB>split]``; wav paths are relative to the manifest."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    rows, seen = [], set()
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        utt = parts[0] or f"line {lineno}"
        if len(parts) < 3 or len(parts) > 5:
            raise ParseError(utt, f"line {lineno}: expected 3-5 tab-separated fields")
        durations, split = None, "train"
        extra = parts[3:]
        if len(extra) == 1 and extra[0] in SPLITS:
            split = extra[0]
        elif extra:
            if len(extra) == 2:
                split = extra[1]
                if split not in SPLITS:
                    raise ParseError(utt, f"split must be one of {SPLITS}, got {split!r}")
            if extra[0]:
                try:
                    durations = [int(x) for x in extra[0].split(",")]
                except ValueError:
                    raise ParseError(utt, f"bad durations {extra[0]!r}") from None
                if any(d < 0 for d in durations):
                    raise ParseError(utt, "durations must be non-negative")
        if utt in seen:
            raise ParseError(utt, "duplicate utt_id")
        seen.add(utt)
        rows.append(ManifestRow(utt, parts[1], path.parent / parts[2], durations, split))
    if not rows:
        raise DataError(f"manifest {path} has no rows")
    return rows


def uniform_durations(n_tokens: int, n_frames: int) -> list[int]:
    """Split frames evenly; the remainder goes to the earliest tokens."""
    base, rem = divmod(n_frames, n_tokens)
    return [base + (i < rem) for i in range(n_tokens)]


def _prepare_one(row: ManifestRow, cfg: DspConfig):
    try:
        tokens = g2p(row.text)
    except DataError as exc:
        raise ParseError(row.utt_id, str(exc)) from exc
    if not row.wav.exists():
        raise MissingWav(f"{row.utt_id}: {row.wav} does not exist")
    mel = dsp.wav_to_logmel(dsp.load_wav(row.wav), cfg.n_fft, cfg.hop, cfg.n_mels)
    n = len(tokens.phonemes)
    if row.durations is None:
        durations = uniform_durations(n, mel.n_frames)
    else:
        durations = row.durations
        if len(durations) != n:
            raise ParseError(row.utt_id, f"{len(durations)} durations for {n} tokens")
        if sum(durations) != mel.n_frames:
            raise ParseError(row.utt_id, f"durations sum to {sum(durations)}, audio has {mel.n_frames} frames")
    return tokens, mel, durations


def _write_text(path: Path, text: str):
    dsp._atomic_write(path, text.encode("utf-8"))


def cmd_prepare(args, cfg: RunConfig) -> int:
    rows = read_manifest(args.manifest)
    out = Path(args.out)
    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        results = list(pool.map(lambda r: _prepare_one(r, cfg.dsp), rows))
    for sub in ("mels", "tokens", "durations"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    phones, tones = phoneme_table(), tone_table()
    phones.save(out / "phonemes.vocab")
    tones.save(out / "tones.vocab")
    index = []
    for row, (tokens, mel, durations) in zip(rows, results):
        dsp.save_mel(out / "mels" / f"{row.utt_id}.mel", mel)
        _write_text(out / "tokens" / f"{row.utt_id}.json", json.dumps(
            {"utt_id": row.utt_id, "text": row.text, "phonemes": list(tokens.phonemes),
             "tones": list(tokens.tones)}, sort_keys=True) + "\n")
        _write_text(out / "durations" / f"{row.utt_id}.txt", ",".join(map(str, durations)) + "\n")
        index.append(f"{row.utt_id}\t{row.split}\t{row.text}")
    _write_text(out / "utts.tsv", "\n".join(index) + "\n")
    summary = {
        "utterances": len(rows),
        "splits": {s: sum(r.split == s for r in rows) for s in SPLITS},
        "total_frames": int(sum(m.n_frames for _, m, _ in results)),
        "total_tokens": int(sum(len(t.phonemes) for t, _, _ in results)),
        "sample_rates": sorted({int(m.sample_rate) for _, m, _ in results}),
        "n_fft": cfg.dsp.n_fft, "hop": cfg.dsp.hop, "n_mels": cfg.dsp.n_mels,
        "manifest_durations": sum(r.durations is not None for r in rows),
    }
    _write_text(out / "summary.json", json.dumps(summary, sort_keys=True, indent=1) + "\n")
    log.info("prepared %d utterances, %d frames", summary["utterances"], summary["total_frames"])
    return EXIT_OK


# ------------------------------------------------------------------ train

def load_store(store, split: str | None = "train"):
    """Utterances from a prepared feature store, plus its vocabularies and summary."""
    store = Path(store)
    try:
        phones = SymbolTable.load(store / "phonemes.vocab")
        tones = SymbolTable.load(store / "tones.vocab")
        summary = json.loads((store / "summary.json").read_text(encoding="utf-8"))
        index = (store / "utts.tsv").read_text(encoding="utf-8").splitlines()
    except (OSError, ValueError) as exc:
        raise DataError(f"{store} is not a prepared feature store: {exc}") from exc
    utts = []
    for line in index:
        utt_id, utt_split, _ = line.split("\t", 2)
        if split is not None and utt_split != split:
            continue
        tok = json.loads((store / "tokens" / f"{utt_id}.json").read_text(encoding="utf-8"))
        text = (store / "durations" / f"{utt_id}.txt").read_text(encoding="utf-8").strip()
        durations = np.array([int(x) for x in text.split(",")], dtype=np.int64)
        mel = dsp.load_mel(store / "mels" / f"{utt_id}.mel")
        p = np.asarray(phones.encode(tok["phonemes"]), dtype=np.int64)
        t = np.asarray(tones.encode([str(x) for x in tok["tones"]]), dtype=np.int64)
        utts.append(tr.Utterance(utt_id, p, t, durations, mel.values))
    if not utts:
        raise tr.DatasetEmpty(f"{store}: no {split} utterances")
    return utts, phones, tones, summary


def _dsp_extra(summary, cfg: RunConfig):
    rates = summary.get("sample_rates") or [dsp.DEFAULT_SR]
    if len(rates) != 1:
        raise DataError(f"feature store mixes sample rates {rates}")
    return {"sample_rate": rates[0], "n_fft": summary.get("n_fft", cfg.dsp.n_fft),
            "hop": summary.get("hop", cfg.dsp.hop)}


def _write_loss_log(path: Path, results):
    lines = [f"{r.step}\t{r.mel_loss:.6f}\t{r.duration_loss:.6f}\t{r.lr:.6e}" for r in results]
    _write_text(path, "\n".join(lines) + "\n")


def cmd_train(args, cfg: RunConfig) -> int:
    utts, phones, tones, summary = load_store(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    ckpt = tr.train(utts, cfg.train, cfg.model, out, results.append, phones, tones,
                    extra=_dsp_extra(summary, cfg))
    _write_loss_log(out / "loss.tsv", results)
    log.info("trained %d steps, final mel loss %.4f", ckpt.step, results[-1].mel_loss)
    return EXIT_OK


def cmd_finetune(args, cfg: RunConfig) -> int:
    base = tr.Checkpoint.load(args.base)
    utts, phones, tones, summary = load_store(args.data)
    if phones.to_list() != base.phonemes or tones.to_list() != base.tones:
        raise DataError("feature store vocabulary differs from the base checkpoint")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    tr.lora_adapt(base, utts, cfg.train, out, results.append, extra=_dsp_extra(summary, cfg))
    _write_loss_log(out / "loss.tsv", results)
    return EXIT_OK


# ------------------------------------------------------------------ synth

def read_sentences(args) -> list[tuple[str, str]]:
    if args.text:
        return [(f"utt{i:03d}", s) for i, s in enumerate(args.text, 1)]
    return list(evaluation.read_transcripts(args.transcript).items())


def synthesize(model, ckpt: tr.Checkpoint, utt_id: str, sentence: str, cfg: RunConfig, out: Path):
    phones, tones = SymbolTable(ckpt.phonemes), SymbolTable(ckpt.tones)
    try:
        tokens = g2p(sentence)
        p, t = encode_tokens(tokens, phones, tones)
    except DataError as exc:
        raise DataError(f"{utt_id} ({sentence!r}): {exc}") from exc
    values, durations = model.infer(p, t, style=ckpt.extra.get("style", "normal"))
    if len(values) == 0:
        raise NumericError(f"{utt_id} ({sentence!r}): predicted durations are all zero")
    if not np.all(np.isfinite(values)):
        raise NumericError(f"{utt_id} ({sentence!r}): non-finite mel output")
    sr = int(ckpt.extra.get("sample_rate", dsp.DEFAULT_SR))
    n_fft, hop = int(ckpt.extra.get("n_fft", cfg.dsp.n_fft)), int(ckpt.extra.get("hop", cfg.dsp.hop))
    mel = dsp.MelSpectrogram(values.astype(np.float32), sr, n_fft, hop, values.shape[1])
    dsp.save_mel(out / f"{utt_id}.mel", mel)
    _write_text(out / f"{utt_id}.tokens.json", json.dumps(
        {"utt_id": utt_id, "text": sentence, "phonemes": list(tokens.phonemes), "tones": list(tokens.tones),
         "phoneme_ids": p.tolist(), "tone_ids": t.tolist(), "durations": [int(d) for d in durations]},
        sort_keys=True) + "\n")
    mag = dsp.mel_to_linear(mel, cfg.dsp.nnls_iters)
    audio = dsp.griffin_lim(mag, cfg.dsp.griffin_lim_iters, tr.sub_seed(cfg.seed, "griffin_lim"),
                            n_fft=n_fft, hop=hop, sample_rate=sr, length=(len(values) - 1) * hop)
    peak = float(np.max(np.abs(audio.samples))) if len(audio) else 0.0
    if peak > 1.0:
        audio = dsp.AudioBuffer(audio.samples / peak, sr)
    dsp.save_wav(out / f"{utt_id}.wav", audio)
    return utt_id


def cmd_synth(args, cfg: RunConfig) -> int:
    sentences = read_sentences(args)
    ckpt = tr.Checkpoint.load(args.checkpoint)
    model = ckpt.build_model()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        done = list(pool.map(lambda s: synthesize(model, ckpt, s[0], s[1], cfg, out), sentences))
    log.info("synthesized %d sentences", len(done))
    return EXIT_OK


# ------------------------------------------------------------ eval / rate

def _score_one(utt_id, system, refs, hyps, synth_dir, ref_dir, pesq, use_dtw):
    try:
        w, wp, wt = evaluation.wer_levels(refs[utt_id], hyps[utt_id])
    except evaluation.ScoringError as exc:
        raise DataError(f"{utt_id}: {exc}") from exc
    d = evaluation.mcd(dsp.load_mel(synth_dir / f"{utt_id}.mel"), dsp.load_mel(ref_dir / f"{utt_id}.mel"),
                       use_dtw=use_dtw)
    return evaluation.MetricReport(utt_id, system, w, wp, wt, d, pesq.get(utt_id) if pesq else None)


def cmd_eval(args, cfg: RunConfig) -> int:
    refs = evaluation.read_transcripts(args.ref_text)
    hyps = evaluation.read_transcripts(args.hyp_text)
    pesq = evaluation.ingest_pesq(args.pesq) if args.pesq else None
    synth_dir, ref_dir = Path(args.synth_mels), Path(args.ref_mels)
    ids = list(refs)
    missing = {
        "hypotheses": [i for i in ids if i not in hyps],
        "synthesized mels": [i for i in ids if not (synth_dir / f"{i}.mel").exists()],
        "reference mels": [i for i in ids if not (ref_dir / f"{i}.mel").exists()],
        "pesq": [i for i in ids if pesq is not None and i not in pesq],
    }
    if any(missing.values()):
        raise JoinFailure(missing)
    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        reports = list(pool.map(
            lambda i: _score_one(i, args.system, refs, hyps, synth_dir, ref_dir, pesq, not args.no_dtw), ids))
    _write_text(Path(args.out), evaluation.format_metric_report(reports))
    return EXIT_OK


def cmd_rate(args, cfg: RunConfig) -> int:
    pool = []
    for path in args.reports:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read report {path}: {exc}") from exc
        pool.extend(evaluation.parse_metric_report(text, str(path)))
    ratings = evaluation.llm_mos(pool)
    _write_text(Path(args.out), evaluation.format_rating_report(ratings))
    return EXIT_OK


# ------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config with optional model/train/dsp/seed sections")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--data", required=True, help="feature store written by prepare")
    training.add_argument("--out", required=True, help="checkpoint directory")
    training.add_argument("--fusion-stage", type=int, choices=(0, 1, 2))
    training.add_argument("--steps", type=int)
    training.add_argument("--batch-size", type=int)
    training.add_argument("--warmup-steps", type=int)

    parser = argparse.ArgumentParser(prog="tonetts", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="extract log-mels, tokens and durations")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common, training], help="train from scratch")
    p.add_argument("--mode", choices=("joint", "lora"), help="lora trains the style-free base")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", parents=[common, training], help="adapt the tone path on a frozen base")
    p.add_argument("--base", required=True, help="base checkpoint")
    p.set_defaults(func=cmd_finetune, mode="lora")

    p = sub.add_parser("synth", parents=[common], help="text to mel and wav")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--text", action="append", help="pinyin sentence (repeatable)")
    src.add_argument("--transcript", help="utt_id<TAB>sentence file")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", parents=[common], help="per-utterance WER/MCD/PESQ report")
    p.add_argument("--ref-text", required=True)
    p.add_argument("--hyp-text", required=True)
    p.add_argument("--synth-mels", required=True)
    p.add_argument("--ref-mels", required=True)
    p.add_argument("--pesq")
    p.add_argument("--system", default="system")
    p.add_argument("--no-dtw", action="store_true", help="pair frames by index instead of DTW")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rate", parents=[common], help="pooled 1-5 ratings from eval reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        print(f"tonetts: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"tonetts: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"tonetts: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"tonetts: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
