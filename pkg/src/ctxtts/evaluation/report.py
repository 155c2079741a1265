"""Score a directory of predictions against a manifest's ground truth."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..data import Corpus, DataError
from ..tensorio import load_tensors
from .metrics import evaluate_utterance

PRED_INDEX = "index.json"
METRICS = ("f0_rmse", "energy_rmse", "duration_mse", "duration_mse_raw", "mcd")


def read_prediction_index(pred_dir) -> dict[str, str]:
    path = Path(pred_dir) / PRED_INDEX
    if not path.exists():
        raise FileNotFoundError(f"{path} not found")
    return json.loads(path.read_text())["utterances"]


def evaluate_directory(pred_dir, corpus: Corpus, mcd_order: int = 13) -> dict:
    pred_dir = Path(pred_dir)
    index = read_prediction_index(pred_dir)
    unknown = sorted(set(index) - {u.utterance_id for u in corpus})
    if unknown:
        raise DataError(f"predictions for utterances not in the manifest: {unknown[:5]}")
    per_utt = {}
    for uid in sorted(index):
        pred = load_tensors(pred_dir / index[uid])
        gt = corpus.features(uid)
        rep = evaluate_utterance(pred["mel"], gt.mel, pred["f0"], gt.f0, pred["energy"], gt.energy,
                                 pred["duration"], gt.duration, mcd_order)
        per_utt[uid] = dict(rep.as_dict(), prediction=index[uid],
                            pred_frames=int(len(pred["mel"])), gt_frames=int(len(gt.mel)))
    means = {m: float(np.mean([r[m] for r in per_utt.values()])) if per_utt else float("nan")
             for m in METRICS}
    return {"utterances": per_utt, "means": means, "count": len(per_utt), "mcd_order": mcd_order,
            "pred_dir": str(pred_dir.resolve()), "manifest": str(corpus.manifest_path.resolve())}
