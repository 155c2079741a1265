"""Same sentence, three context conditions: its real neighbours, random
unrelated sentences, and no neighbours at all."""
from __future__ import annotations

from itertools import combinations
from pathlib import Path

import numpy as np

from ..context_window import ContextWindow
from ..data import Corpus, DataError
from ..synthesis import Prediction, Synthesizer

MODES = ("original", "irrelevant", "none")
N_IRRELEVANT = 4
DISTINCT_TOL = 1e-4


def case_window(corpus: Corpus, uid: str, mode: str, half_width: int = 2, seed: int = 0) -> ContextWindow:
    if uid not in corpus:
        raise DataError(f"unknown utterance {uid!r}")
    if mode == "original":
        return corpus.window(uid, half_width)
    centre = corpus[uid].sentence
    if mode == "none":
        return ContextWindow(centre, (), (), half_width)
    if mode == "irrelevant":
        others = [u.sentence for u in corpus if u.utterance_id != uid]
        if len(others) < N_IRRELEVANT:
            raise DataError(f"need {N_IRRELEVANT} other sentences for the irrelevant condition")
        rng = np.random.default_rng(seed)
        picked = [others[i] for i in rng.choice(len(others), N_IRRELEVANT, replace=False)]
        half = N_IRRELEVANT // 2
        return ContextWindow(centre, tuple(picked[:half]), tuple(picked[half:]), half_width)
    raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")


def max_abs_difference(a: np.ndarray, b: np.ndarray) -> float:
    """Max |a - b| over the frames both mels share (0.0 if either is empty)."""
    n = min(len(a), len(b))
    return float(np.abs(a[:n] - b[:n]).max()) if n else 0.0


def run_case_study(synth: Synthesizer, uid: str, seed: int = 0) -> tuple[dict[str, Prediction], dict]:
    preds, windows = {}, {}
    for mode in MODES:
        window = case_window(synth.corpus, uid, mode, synth.half_width, seed)
        windows[mode] = [s.sentence_id for s in window.sentences]
        preds[mode] = synth(uid, window)
    pairs = {}
    for a, b in combinations(MODES, 2):
        ma, mb = preds[a].mel, preds[b].mel
        diff = max_abs_difference(ma, mb)
        pairs[f"{a}|{b}"] = {"max_abs_diff": diff, "frames": [len(ma), len(mb)],
                             "same_length": len(ma) == len(mb),
                             "distinct": len(ma) != len(mb) or diff > DISTINCT_TOL}
    summary = {"utterance_id": uid, "seed": seed, "windows": windows, "pairs": pairs,
               "pairwise_distinct": all(p["distinct"] for p in pairs.values())}
    return preds, summary


def pitch_contours(preds: dict[str, Prediction]) -> dict[str, list[float]]:
    return {mode: p.f0.tolist() for mode, p in preds.items()}


def write_plots(preds: dict[str, Prediction], out_dir, title: str = "") -> list[Path]:
    from .plots import case_study_figure

    path = Path(out_dir) / "case_study.png"
    case_study_figure({m: p.mel for m, p in preds.items()}, {m: p.f0 for m, p in preds.items()},
                      path, title)
    return [path]
