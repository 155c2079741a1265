"""Command-line entry point: ``ctxtts <subcommand> ...``.

Exit codes: 0 success, 2 invalid input, 3 missing prerequisite, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .acoustic_model import DegenerateOutputError
from .checkpoints import MissingPrerequisite, RunLayout, load_targets, versions
from .context_window import (CompletenessError, PhraseEmbeddingSequence, load_precomputed_embeddings,
                             phrase_vector, write_phrase_embeddings)
from .data import EMBEDDINGS_FILE, Corpus, DataError, make_provider, validate_corpus
from .tensorio import FormatError, atomic_write_json, config_hash, file_sha256, save_tensors, sidecar_path

log = logging.getLogger("ctxtts")

EXIT_OK, EXIT_INVALID, EXIT_MISSING, EXIT_NUMERICAL = 0, 2, 3, 4


class ValidationFailed(DataError):
    def __init__(self, errors: list[str]):
        super().__init__(f"{len(errors)} validation error(s):\n" + "\n".join(f"  - {e}" for e in errors))
        self.errors = errors


def _provenance(seed, config, **extra) -> dict:
    import torch

    return {"seed": seed, "config_hash": config_hash(config), "config": config,
            "versions": dict(versions(), torch=torch.__version__, numpy=np.__version__), **extra}


def stamp(path, seed, config, **extra) -> None:
    """Sidecar for an artifact that is not a tensor container."""
    atomic_write_json(sidecar_path(path), _provenance(seed, config, sha256=file_sha256(path), **extra))


def _load_corpus(path) -> Corpus:
    path = Path(path)
    if not path.exists():
        raise MissingPrerequisite(f"manifest {path}", f"ctxtts prepare --out {path.parent}")
    return Corpus.load(path)


def _provider(corpus: Corpus, args):
    if args.provider == "stub":
        return make_provider(corpus, "stub", seed=args.embedding_seed)
    path = Path(args.embeddings) if args.embeddings else corpus.root / EMBEDDINGS_FILE
    if not path.exists():
        raise MissingPrerequisite(
            f"phrase embeddings {path}",
            f"ctxtts extract-embeddings --data {corpus.manifest_path} --provider stub --out {path}")
    return make_provider(corpus, "precomputed", path)


# -- subcommands ----------------------------------------------------------------------

def cmd_prepare(args) -> int:
    from .evaluation.toy_corpus import ToyCorpusConfig, generate_toy_corpus

    if args.manifest:
        corpus = _load_corpus(args.manifest)
        emb = args.embeddings or (corpus.root / EMBEDDINGS_FILE)
        errors = validate_corpus(corpus, emb if Path(emb).exists() else None)
        if not Path(emb).exists():
            errors.append(f"phrase embeddings: {emb} does not exist "
                          f"(run: ctxtts extract-embeddings --data {args.manifest} --provider stub)")
        if errors:
            raise ValidationFailed(errors)
        print(f"{args.manifest}: {len(corpus)} utterances, valid")
        return EXIT_OK
    if not args.out:
        raise DataError("prepare needs --out (generate toy corpus) or --manifest (validate)")
    cfg = ToyCorpusConfig(seed=args.seed, n_documents=args.n_documents,
                          sentences_per_doc=args.sentences_per_doc,
                          test_documents=args.test_documents, vocab_words=args.vocab_words,
                          embedding_seed=args.embedding_seed)
    manifest = generate_toy_corpus(args.out, cfg)
    errors = validate_corpus(Corpus.load(manifest), Path(args.out) / EMBEDDINGS_FILE)
    if errors:
        raise ValidationFailed(errors)
    stamp(manifest, args.seed, asdict(cfg), kind="toy_corpus_manifest")
    print(manifest)
    return EXIT_OK


def cmd_extract_embeddings(args) -> int:
    corpus = _load_corpus(args.data)
    sentences = corpus.sentences()
    out = Path(args.out) if args.out else corpus.root / EMBEDDINGS_FILE
    if args.provider == "stub":
        records = [PhraseEmbeddingSequence(
            s.sentence_id, np.stack([phrase_vector(p, args.embedding_seed) for p in s.phrases]))
            for s in sentences]
        meta = {"provider": "stub", "seed": args.embedding_seed}
    else:
        if not args.embeddings:
            raise DataError("--provider precomputed needs --embeddings <file>")
        table = load_precomputed_embeddings(args.embeddings, sentences)
        records = [PhraseEmbeddingSequence(s.sentence_id, table[s.sentence_id]) for s in sentences]
        meta = {"provider": "precomputed", "source": str(args.embeddings),
                "source_sha256": file_sha256(args.embeddings)}
    write_phrase_embeddings(out, records, dict(meta, **_provenance(args.embedding_seed, meta)))
    print(f"{out}: {len(records)} sentences")
    return EXIT_OK


def cmd_extract_targets(args) -> int:
    from .training import extract_targets

    corpus = _load_corpus(args.data)
    layout = RunLayout(args.out)
    ref = layout.require(layout.reference_encoder,
                         f"ctxtts train --stage 1 --data {args.data} --out {args.out}")
    out = extract_targets(corpus, ref, layout.targets)
    print(f"{layout.targets}: {len(out)} style targets")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import (TrainingStageConfig, stage1_joint_teacher, stage2_distill,
                           stage3_finetune)

    cfg = TrainingStageConfig.from_json(args.config) if args.config else TrainingStageConfig.default(args.stage)
    if cfg.stage.number != args.stage:
        raise DataError(f"--stage {args.stage} but config describes stage {cfg.stage.number}")
    if args.steps is not None:
        cfg = TrainingStageConfig.from_dict(dict(cfg.to_dict(), steps=args.steps))
    corpus = _load_corpus(args.data)
    layout = RunLayout(args.out)
    if args.stage == 1:
        result = stage1_joint_teacher(corpus, cfg, args.out, args.seed, args.split)
    elif args.stage == 2:
        stage1_hint = f"ctxtts train --stage 1 --data {args.data} --out {args.out}"
        layout.require(layout.reference_encoder, stage1_hint)
        layout.require(layout.teacher_acoustic, stage1_hint)
        layout.require(layout.targets, f"ctxtts extract-targets --data {args.data} --out {args.out}")
        result = stage2_distill(corpus, load_targets(layout.targets), cfg, args.out,
                                _provider(corpus, args), args.seed, args.split)
    else:
        result = stage3_finetune(corpus, cfg, args.out, _provider(corpus, args), args.seed, args.split)
    stage_dir = layout.stage_dir(args.stage)
    losses = stage_dir / "losses.csv"
    if losses.exists():
        stamp(losses, args.seed, cfg.to_dict(), kind="loss_log")
    for extra in ("ablation_report.json", "freeze_audit.json"):
        if (stage_dir / extra).exists():
            stamp(stage_dir / extra, args.seed, cfg.to_dict(), kind=extra[:-5])
    summary = {"stage": args.stage, "outputs": {k: str(v) for k, v in result.outputs.items()},
               "report": result.report, "freeze_audit_unchanged": result.audit.get("unchanged")}
    print(json.dumps(summary, indent=2, default=str))
    return EXIT_OK


def cmd_synthesize(args) -> int:
    from .synthesis import Synthesizer, griffin_lim, safe_name, write_wav

    corpus = _load_corpus(args.data)
    if args.style_source == "context":
        RunLayout(args.ckpt).inference_pair(args.data)  # fail on checkpoints before touching embeddings
        synth = Synthesizer(args.ckpt, corpus, _provider(corpus, args))
    else:
        synth = Synthesizer(args.ckpt, corpus, None, "reference")
    uids = args.utterances or [u.utterance_id for u in corpus.split(args.split)]
    missing = [u for u in uids if u not in corpus]
    if missing:
        raise DataError(f"unknown utterances: {missing}")
    out = Path(args.out)
    config = {"style_source": args.style_source, "checkpoints": synth.checkpoints,
              "provider": args.provider, "split": args.split}
    index = {}
    for uid in uids:
        pred = synth(uid)
        name = f"{safe_name(uid)}.bin"
        save_tensors(out / name, pred.tensors(),
                     _provenance(args.seed, config, utterance_id=uid, attention=pred.attention))
        index[uid] = name
        if args.wav:
            wav = out / f"{safe_name(uid)}.wav"
            write_wav(wav, griffin_lim(pred.mel, n_iter=args.griffin_lim_iters, seed=args.seed))
            stamp(wav, args.seed, config, utterance_id=uid, vocoder="griffin-lim")
    atomic_write_json(out / "index.json", {"utterances": index, **_provenance(args.seed, config)})
    print(f"{out}: {len(index)} utterances")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluation.report import evaluate_directory, read_prediction_index

    corpus = _load_corpus(args.gt)
    pred_dir = Path(args.pred)
    if not (pred_dir / "index.json").exists():
        raise MissingPrerequisite(f"predictions in {pred_dir}",
                                  f"ctxtts synthesize --ckpt <run> --data {args.gt} --out {pred_dir}")
    read_prediction_index(pred_dir)
    seed = json.loads((pred_dir / "index.json").read_text()).get("seed")
    report = evaluate_directory(pred_dir, corpus, args.mcd_order)
    report.update(_provenance(seed, {"mcd_order": args.mcd_order, "pred": str(pred_dir)}))
    atomic_write_json(args.out, report)
    print(json.dumps(report["means"], indent=2))
    return EXIT_OK


def cmd_case_study(args) -> int:
    from .evaluation.case_study import pitch_contours, run_case_study, write_plots
    from .synthesis import Synthesizer

    corpus = _load_corpus(args.data)
    if args.utterance not in corpus:
        raise DataError(f"unknown utterance {args.utterance!r}")
    RunLayout(args.ckpt).inference_pair(args.data)
    synth = Synthesizer(args.ckpt, corpus, _provider(corpus, args))
    preds, summary = run_case_study(synth, args.utterance, args.seed)
    out = Path(args.out)
    config = {"utterance": args.utterance, "checkpoints": synth.checkpoints}
    for mode, pred in preds.items():
        save_tensors(out / f"{mode}.bin", pred.tensors(),
                     _provenance(args.seed, config, mode=mode, window=summary["windows"][mode]))
    atomic_write_json(out / "pitch_contours.json", {"contours_hz": pitch_contours(preds),
                                                    **_provenance(args.seed, config)})
    atomic_write_json(out / "attention.json", {"attention": {m: p.attention for m, p in preds.items()},
                                               **_provenance(args.seed, config)})
    for png in write_plots(preds, out, title=args.utterance):
        stamp(png, args.seed, config, kind="case_study_plot")
    atomic_write_json(out / "summary.json", dict(summary, **_provenance(args.seed, config)))
    print(json.dumps({k: v["max_abs_diff"] for k, v in summary["pairs"].items()}, indent=2))
    return EXIT_OK


def cmd_plot(args) -> int:
    from .data import Corpus as _Corpus
    from .evaluation.plots import comparison_figure, metric_summary_figure
    from .synthesis import safe_name
    from .tensorio import load_tensors

    report_path = Path(args.report)
    if not report_path.exists():
        raise MissingPrerequisite(f"report {report_path}",
                                  f"ctxtts evaluate --pred <dir> --gt <manifest> --out {report_path}")
    report = json.loads(report_path.read_text())
    corpus = _Corpus.load(report["manifest"])
    out = Path(args.out)
    config = {"report": str(report_path), "report_sha256": file_sha256(report_path)}
    seed = report.get("seed")
    written = [metric_summary_figure(report["utterances"], out / "metrics.png")]
    for uid in sorted(report["utterances"])[: args.max_utterances]:
        pred = load_tensors(Path(report["pred_dir"]) / report["utterances"][uid]["prediction"])
        gt = corpus.features(uid)
        written.append(comparison_figure(pred["mel"], gt.mel, pred["f0"], gt.f0,
                                         out / f"{safe_name(uid)}.png", title=uid))
    for png in written:
        stamp(png, seed, config, kind="plot")
    print(f"{out}: {len(written)} images")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------

def _add_provider(p) -> None:
    p.add_argument("--provider", choices=("precomputed", "stub"), default="precomputed",
                   help="phrase-embedding source (default: precomputed file next to the manifest)")
    p.add_argument("--embeddings", help="precomputed phrase-embedding file")
    p.add_argument("--embedding-seed", type=int, default=0, help="seed of the stub provider")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctxtts", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="generate the toy corpus or validate a manifest")
    p.add_argument("--out", help="directory for a generated toy corpus")
    p.add_argument("--manifest", help="validate this manifest instead of generating")
    p.add_argument("--embeddings", help="phrase-embedding file to check coverage against")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-documents", type=int, default=12)
    p.add_argument("--sentences-per-doc", type=int, default=8)
    p.add_argument("--test-documents", type=int, default=2)
    p.add_argument("--vocab-words", type=int, default=48)
    p.add_argument("--embedding-seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("extract-embeddings", help="write per-sentence phrase embeddings")
    p.add_argument("--data", required=True, help="manifest.jsonl")
    p.add_argument("--out", help="output file (default: phrase_embeddings.bin next to the manifest)")
    _add_provider(p)
    p.set_defaults(func=cmd_extract_embeddings)

    p = sub.add_parser("extract-targets", help="teacher style embeddings for every utterance")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="run directory holding the stage-1 checkpoint")
    p.set_defaults(func=cmd_extract_targets)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--config", help="stage config JSON (default: built-in defaults)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, help="override the configured step count")
    p.add_argument("--split", default="train")
    _add_provider(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", help="mel, F0, energy and durations from text and context")
    p.add_argument("--ckpt", required=True, help="run directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--utterances", nargs="+")
    p.add_argument("--style-source", choices=("context", "reference"), default="context")
    p.add_argument("--wav", action="store_true", help="also write Griffin-Lim audio (demo quality)")
    p.add_argument("--griffin-lim-iters", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    _add_provider(p)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", help="objective metrics against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True, help="ground-truth manifest")
    p.add_argument("--out", required=True, help="report.json")
    p.add_argument("--mcd-order", type=int, default=13)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("case-study", help="one utterance under original/irrelevant/no context")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--utterance", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_provider(p)
    p.set_defaults(func=cmd_case_study)

    p = sub.add_parser("plot", help="mel and pitch comparison images from a report")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-utterances", type=int, default=8)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    from .training import FreezeViolation, NumericalFailure

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MissingPrerequisite as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalFailure, DegenerateOutputError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (DataError, FormatError, CompletenessError, FreezeViolation, ValueError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
