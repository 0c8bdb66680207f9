from collections import defaultdict

import numpy as np
import pytest

from tonetts import dsp, pinyin, toy
from tonetts import trainer as tr

# criterion number -> outcomes of its tests, and its title
_ACCEPTANCE = defaultdict(list)
_TITLES = {}
_MARKERS = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("acceptance")
        if m is not None:
            _MARKERS[item.nodeid] = (m.args[0], m.args[1])


def pytest_runtest_logreport(report):
    # count the call phase, or a failed/errored setup that prevented it
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = _MARKERS.get(report.nodeid)
    if marker is not None:
        number, title = marker
        _TITLES[number] = title
        _ACCEPTANCE[number].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        outcomes = _ACCEPTANCE[number]
        status = "PASS" if outcomes and all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {status}  {_TITLES[number]}")


def toy_utterances(sentences=None, seed=0):
    phones, tones = pinyin.phoneme_table(), pinyin.tone_table()
    out = []
    for i, (utt, text) in enumerate(sorted((sentences or toy.TOY_SENTENCES).items())):
        audio, durations = toy.render(text, seed + i)
        mel = dsp.wav_to_logmel(audio).values.astype(np.float32)
        p, t = pinyin.encode_tokens(pinyin.g2p(text), phones, tones)
        out.append(tr.Utterance(utt, p, t, np.asarray(durations), mel))
    return out


@pytest.fixture(scope="session")
def toy_utts():
    return toy_utterances()


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return toy.write_corpus(root)


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory, toy_corpus):
    """Prepared toy store plus a briefly trained joint checkpoint, built through the CLI."""
    from tonetts.cli import main

    root = tmp_path_factory.mktemp("run")
    store, ckdir = root / "feats", root / "ckpt"
    assert main(["prepare", str(toy_corpus), "--out", str(store)]) == 0
    assert main(["train", "--data", str(store), "--out", str(ckdir), "--steps", "400", "--seed", "0"]) == 0
    return {"root": root, "store": store, "checkpoint": ckdir / "final.sspc", "corpus": toy_corpus}
