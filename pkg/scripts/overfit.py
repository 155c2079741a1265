"""Stage-1 sanity run: fit the teacher to a single utterance and report mel MAE.

    python3 scripts/overfit.py --out runs/overfit [--steps 3000] [--utterance doc000:0]
"""
import argparse
import json
import logging
import time
from pathlib import Path

from ctxtts.data import Corpus
from ctxtts.evaluation.toy_corpus import ToyCorpusConfig, generate_toy_corpus
from ctxtts.training import TrainingStageConfig, reconstruction_mae, stage1_joint_teacher


def overfit(out, steps=3000, utterance=None, seed=0, corpus_seed=0):
    out = Path(out)
    manifest = generate_toy_corpus(out / "data", ToyCorpusConfig(seed=corpus_seed))
    corpus = Corpus.load(manifest)
    uid = utterance or corpus.split("train")[0].utterance_id
    cfg = TrainingStageConfig.from_dict({"stage": 1, "steps": steps, "batch_size": 1, "log_every": 250})
    t0 = time.time()
    result = stage1_joint_teacher(corpus, cfg, out / "run", seed=seed, utterances=[uid])
    mae = reconstruction_mae(corpus, out / "run", uid)
    return {"utterance": uid, "steps": steps, "mel_mae": mae, "seconds": time.time() - t0,
            "final_train_mel_loss": float(result.losses.series("mel")[-1])}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--utterance")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    print(json.dumps(overfit(args.out, args.steps, args.utterance, args.seed), indent=2))


if __name__ == "__main__":
    main()
