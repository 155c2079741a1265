"""End-to-end toy run through the CLI: prepare, stages 1-3, synthesize,
evaluate, case study and plots. Every step is a separate ``python -m ctxtts``
process; exit codes and wall-clock times land in ``<out>/pipeline_summary.json``.

    python3 scripts/pipeline.py --out runs/toy [--seed 0] [--stage1-steps N ...]
"""
import argparse
import json
import subprocess
import sys
import time
from pathlib import Path

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def steps(out: Path, seed: int, overrides: dict, utterance: str | None):
    data, run = out / "data", out / "run"
    manifest = data / "manifest.jsonl"
    s = ["--seed", str(seed)]

    def train(n):
        extra = ["--steps", str(overrides[n])] if overrides.get(n) is not None else []
        return ["train", "--stage", str(n), "--config", str(CONFIGS / f"stage{n}.json"),
                "--data", str(manifest), "--out", str(run), *s, *extra]

    yield "prepare", ["prepare", "--out", str(data), *s]
    yield "stage1", train(1)
    yield "extract-targets", ["extract-targets", "--data", str(manifest), "--out", str(run)]
    yield "stage2", train(2)
    yield "stage3", train(3)
    yield "synthesize", ["synthesize", "--ckpt", str(run), "--data", str(manifest),
                         "--out", str(out / "pred"), *s]
    yield "evaluate", ["evaluate", "--pred", str(out / "pred"), "--gt", str(manifest),
                       "--out", str(out / "report.json")]
    if utterance is None:
        utterance = sorted(json.loads((out / "report.json").read_text())["utterances"])[0]
    yield "case-study", ["case-study", "--ckpt", str(run), "--data", str(manifest),
                         "--utterance", utterance, "--out", str(out / "case_study"), *s]
    yield "plot", ["plot", "--report", str(out / "report.json"), "--out", str(out / "plots")]


def run_pipeline(out, seed=0, overrides=None, utterance=None, log_level="WARNING") -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"seed": seed, "steps": [], "ok": True}
    t_start = time.time()
    for name, argv in steps(out, seed, overrides or {}, utterance):
        t0 = time.time()
        proc = subprocess.run([sys.executable, "-m", "ctxtts", "--log-level", log_level, *argv],
                              capture_output=True, text=True)
        summary["steps"].append({"name": name, "argv": argv, "exit_code": proc.returncode,
                                 "seconds": round(time.time() - t0, 2)})
        print(f"{name:16s} exit={proc.returncode} {time.time() - t0:7.1f}s", flush=True)
        if proc.returncode != 0:
            summary["ok"] = False
            summary["stderr"] = proc.stderr[-4000:]
            break
    summary["total_seconds"] = round(time.time() - t_start, 2)
    (out / "pipeline_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--utterance")
    for n in (1, 2, 3):
        ap.add_argument(f"--stage{n}-steps", type=int)
    args = ap.parse_args()
    overrides = {n: getattr(args, f"stage{n}_steps") for n in (1, 2, 3)}
    summary = run_pipeline(args.out, args.seed, overrides, args.utterance)
    if not summary["ok"]:
        print(summary.get("stderr", ""), file=sys.stderr)
    sys.exit(0 if summary["ok"] else 1)


if __name__ == "__main__":
    main()
