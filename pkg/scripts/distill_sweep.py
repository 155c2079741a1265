"""Stage-2 distillation efficacy over several seeds on a trained teacher.

Reads the style targets of an existing run (stage 1 + extract-targets) and
retrains the students once per seed; prints final/initial MSE ratios.

    python3 scripts/distill_sweep.py --run runs/toy/run --data runs/toy/data/manifest.jsonl
"""
import argparse
import json
import statistics
from pathlib import Path

from ctxtts.checkpoints import RunLayout, load_targets
from ctxtts.data import Corpus, make_provider
from ctxtts.training import TrainingStageConfig, stage2_distill


def sweep(run, manifest, out, seeds=(0, 1, 2), plain=False, steps=None) -> dict:
    corpus = Corpus.load(manifest)
    targets = load_targets(RunLayout(run).targets)
    provider = make_provider(corpus, "precomputed")
    overrides = {"stage": 2, "train_plain_baseline": plain}
    if steps is not None:
        overrides["steps"] = steps
    cfg = TrainingStageConfig.from_dict(overrides)
    per_seed = {}
    for seed in seeds:
        # the sweep writes its own students; the teacher checkpoints are only read
        res = stage2_distill(corpus, targets, cfg, Path(out) / f"seed{seed}", provider, seed=seed)
        per_seed[seed] = res.report["hierarchical"]
    ratios = [r["ratio"] for r in per_seed.values()]
    result = {"per_seed": per_seed, "ratios": ratios, "median_ratio": statistics.median(ratios)}
    Path(out).mkdir(parents=True, exist_ok=True)
    (Path(out) / "distill_sweep.json").write_text(json.dumps(result, indent=2) + "\n")
    return result


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--run", required=True)
    ap.add_argument("--data", required=True)
    ap.add_argument("--out", default=None)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--plain", action="store_true", help="also train the plain baseline per seed")
    args = ap.parse_args()
    out = args.out or str(Path(args.run).parent / "distill_sweep")
    res = sweep(args.run, args.data, out, args.seeds, args.plain)
    print(json.dumps({"ratios": res["ratios"], "median_ratio": res["median_ratio"]}, indent=2))


if __name__ == "__main__":
    main()
