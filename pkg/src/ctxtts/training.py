"""Three-stage knowledge-distillation schedule.

1. reference encoder + acoustic model trained jointly on TTS losses;
2. the frozen teacher's embeddings become regression targets for the context
   encoder (distillation), nothing else trains;
3. context encoder + acoustic model fine-tuned together at a lower rate, with
   the style now predicted from text.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pad_sequence

from .acoustic_model import AcousticConfig, AcousticModel, VarianceTargets, model_losses
from .checkpoints import (MissingPrerequisite, RunLayout, load_acoustic, load_context_encoder,
                          load_reference_encoder, load_targets, save_acoustic, versions,
                          save_context_encoder, save_reference_encoder, save_targets, seed_everything)
from .context_encoder import (ContextEncoderConfig, HierarchicalContextEncoder,
                              PlainContextEncoder, window_tensors)
from .data import Corpus, DataError, EmbeddingProvider, WindowCache, encode_phonemes
from .reference_encoder import ReferenceEncoder
from .tensorio import (atomic_write_bytes, atomic_write_json, config_hash, file_sha256, load_sidecar,
                       state_hash)

log = logging.getLogger(__name__)

TTS_LOSSES = frozenset({"mel", "duration", "pitch", "energy"})
MODULES = frozenset({"reference_encoder", "context_encoder", "acoustic_model"})


class NumericalFailure(RuntimeError):
    pass


class FreezeViolation(RuntimeError):
    pass


class Stage(str, Enum):
    JOINT_TEACHER = "JOINT_TEACHER"
    DISTILL_STUDENT = "DISTILL_STUDENT"
    JOINT_FINETUNE = "JOINT_FINETUNE"

    @property
    def number(self) -> int:
        return list(Stage).index(self) + 1

    @classmethod
    def from_number(cls, n: int) -> "Stage":
        return list(cls)[n - 1]


@dataclass(frozen=True)
class LRSchedule:
    """Linear warm-up to ``peak_lr * scale`` at ``warmup_steps``, then inverse-sqrt decay."""
    peak_lr: float = 1e-3
    warmup_steps: int = 4000
    scale: float = 1.0

    def __call__(self, step: int) -> float:
        step = max(step, 1)
        peak = self.peak_lr * self.scale
        if step <= self.warmup_steps:
            return peak * step / self.warmup_steps
        return peak * math.sqrt(self.warmup_steps / step)


_STAGE_SETS = {
    Stage.JOINT_TEACHER: ({"reference_encoder", "acoustic_model"}, set(TTS_LOSSES)),
    Stage.DISTILL_STUDENT: ({"context_encoder"}, {"distillation"}),
    Stage.JOINT_FINETUNE: ({"context_encoder", "acoustic_model"}, set(TTS_LOSSES)),
}


@dataclass(frozen=True)
class TrainingStageConfig:
    stage: Stage
    trainable: frozenset[str]
    frozen: frozenset[str]
    losses: frozenset[str]
    steps: int
    learning_rate_schedule: LRSchedule
    batch_size: int
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-9
    grad_clip: float = 1.0
    distill_loss: str = "mse"
    train_plain_baseline: bool = True
    half_width: int = 2
    log_every: int = 50

    def __post_init__(self):
        if self.trainable & self.frozen:
            raise ValueError(f"modules both trainable and frozen: {sorted(self.trainable & self.frozen)}")
        unknown = (self.trainable | self.frozen) - MODULES
        if unknown:
            raise ValueError(f"unknown modules {sorted(unknown)}")
        want_train, want_losses = _STAGE_SETS[self.stage]
        if set(self.trainable) != want_train:
            raise ValueError(f"{self.stage.value} must train exactly {sorted(want_train)}")
        if set(self.losses) != want_losses:
            raise ValueError(f"{self.stage.value} uses losses {sorted(want_losses)}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.distill_loss not in ("mse", "l1"):
            raise ValueError("distill_loss must be 'mse' or 'l1'")

    @classmethod
    def default(cls, stage: Stage | int) -> "TrainingStageConfig":
        stage = Stage.from_number(stage) if isinstance(stage, int) else Stage(stage)
        trainable, losses = _STAGE_SETS[stage]
        if stage is Stage.JOINT_TEACHER:
            steps, batch, sched = 2000, 4, LRSchedule()
        elif stage is Stage.DISTILL_STUDENT:
            steps, batch, sched = 500, 16, LRSchedule()
        else:
            steps, batch, sched = 500, 4, LRSchedule(warmup_steps=1000, scale=0.1)
        return cls(stage, frozenset(trainable), frozenset(MODULES - trainable), frozenset(losses),
                   steps, sched, batch)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage"] = self.stage.value
        for k in ("trainable", "frozen", "losses"):
            d[k] = sorted(d[k])
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingStageConfig":
        d = dict(d)
        stage = d.pop("stage")
        stage = Stage.from_number(stage) if isinstance(stage, int) else Stage(str(stage).upper())
        base = cls.default(stage)
        sched = d.pop("learning_rate_schedule", None)
        if sched is not None:
            d["learning_rate_schedule"] = replace(base.learning_rate_schedule, **sched)
        for k in ("trainable", "frozen", "losses"):
            if k in d:
                d[k] = frozenset(d[k])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config fields {sorted(unknown)}")
        return replace(base, **d)

    @classmethod
    def from_json(cls, path) -> "TrainingStageConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def make_optimizer(params, cfg: TrainingStageConfig):
    opt = torch.optim.Adam(params, lr=1.0, betas=cfg.betas, eps=cfg.eps, fused=True)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda i: cfg.learning_rate_schedule(i + 1))
    return opt, sched


# -- loss log -------------------------------------------------------------------

class LossLog:
    def __init__(self):
        self.rows: list[tuple[int, str, float]] = []

    def add(self, step: int, losses: dict[str, float]) -> None:
        self.rows.extend((step, k, float(v)) for k, v in losses.items())

    def series(self, name: str) -> np.ndarray:
        return np.array([v for _, k, v in self.rows if k == name])

    def write(self, path) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss-name", "value"])
        w.writerows((s, k, repr(v)) for s, k, v in self.rows)
        atomic_write_bytes(path, buf.getvalue().encode())


# -- batching ---------------------------------------------------------------------

@dataclass
class AcousticBatch:
    uids: list[str]
    phonemes: torch.Tensor
    phoneme_lengths: torch.Tensor
    mel: torch.Tensor
    mel_lengths: torch.Tensor
    targets: VarianceTargets


def acoustic_batch(corpus: Corpus, uids: Sequence[str], vocab: list[str]) -> AcousticBatch:
    ids, mels, dur, pitch, energy = [], [], [], [], []
    for uid in uids:
        f = corpus.features(uid)
        ids.append(torch.tensor(encode_phonemes(corpus[uid].phonemes, vocab)))
        mels.append(torch.from_numpy(f.mel.copy()))
        dur.append(torch.from_numpy(f.duration.copy()).long())
        pitch.append(torch.from_numpy(f.pitch.copy()))
        energy.append(torch.from_numpy(f.phoneme_energy.copy()))
    return AcousticBatch(
        list(uids), pad_sequence(ids, batch_first=True),
        torch.tensor([len(x) for x in ids]),
        pad_sequence(mels, batch_first=True), torch.tensor([len(m) for m in mels]),
        VarianceTargets(pad_sequence(dur, batch_first=True), pad_sequence(pitch, batch_first=True),
                        pad_sequence(energy, batch_first=True)),
    )


class BatchSampler:
    """Epoch-wise shuffled batches; deterministic for a given generator."""

    def __init__(self, items: Sequence[str], batch_size: int, rng: np.random.Generator):
        if not items:
            raise DataError("no training utterances")
        self.items, self.batch_size, self.rng = list(items), batch_size, rng
        self._queue: list[str] = []

    def __call__(self) -> list[str]:
        out = []
        while len(out) < min(self.batch_size, len(self.items)):
            if not self._queue:
                self._queue = [self.items[i] for i in self.rng.permutation(len(self.items))]
            out.append(self._queue.pop())
        return out


def corpus_stats(corpus: Corpus, uids: Sequence[str]) -> tuple[tuple[float, float], tuple[float, float]]:
    pitch = np.concatenate([corpus.features(u).pitch for u in uids])
    energy = np.concatenate([corpus.features(u).phoneme_energy for u in uids])
    return (float(pitch.mean()), float(pitch.std() or 1.0)), (float(energy.mean()), float(energy.std() or 1.0))


@dataclass
class StageResult:
    stage: Stage
    outputs: dict[str, Path]
    losses: LossLog
    audit: dict = field(default_factory=dict)
    report: dict = field(default_factory=dict)


def _check_finite(losses: dict[str, torch.Tensor], step: int, uids, out_dir: Path) -> None:
    if all(torch.isfinite(v).all() for v in losses.values()):
        return
    dump = out_dir / "nan_dump.json"
    atomic_write_json(dump, {"step": step, "utterances": list(uids),
                             "losses": {k: float(v.detach()) for k, v in losses.items()}})
    raise NumericalFailure(f"non-finite loss at step {step}; offending batch written to {dump}")


def _step(params, opt, sched, loss: torch.Tensor, clip: float) -> None:
    opt.zero_grad(set_to_none=True)
    loss.backward()
    if clip > 0:
        nn.utils.clip_grad_norm_(params, clip)
    opt.step()
    sched.step()


def _provenance(cfg: TrainingStageConfig, seed: int, corpus: Corpus) -> dict:
    return {"seed": seed, "config_hash": config_hash(cfg.to_dict()), "stage": cfg.stage.value,
            "manifest": str(corpus.manifest_path), "config": cfg.to_dict()}


def _freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


class FreezeAudit:
    """Hashes frozen checkpoint files (and in-memory state) before and after a stage."""

    def __init__(self, files: dict[str, Path], modules: dict[str, nn.Module] | None = None):
        self.files = {k: Path(v) for k, v in files.items() if Path(v).exists()}
        self.modules = modules or {}
        self.before = self._snapshot()

    def _snapshot(self) -> dict[str, str]:
        snap = {f"file:{k}": file_sha256(p) for k, p in self.files.items()}
        snap.update({f"state:{k}": state_hash(m) for k, m in self.modules.items()})
        return snap

    def finish(self) -> dict:
        after = self._snapshot()
        changed = sorted(k for k in self.before if self.before[k] != after.get(k))
        result = {"before": self.before, "after": after, "unchanged": not changed}
        if changed:
            raise FreezeViolation(f"frozen components changed: {changed}")
        return result


# -- stage 1 -------------------------------------------------------------------------

def stage1_joint_teacher(corpus: Corpus, cfg: TrainingStageConfig, out_dir, seed: int = 0,
                         split: str = "train", utterances: Sequence[str] | None = None,
                         callback: Callable[[int, dict], None] | None = None) -> StageResult:
    if cfg.stage is not Stage.JOINT_TEACHER:
        raise ValueError("stage 1 needs a JOINT_TEACHER config")
    layout = RunLayout(out_dir)
    stage_dir = layout.stage_dir(1)
    uids = list(utterances) if utterances is not None else [u.utterance_id for u in corpus.split(split)]
    rng = seed_everything(seed)
    vocab = corpus.vocab
    pitch_stats, energy_stats = corpus_stats(corpus, uids)
    ref = ReferenceEncoder()
    acoustic = AcousticModel(AcousticConfig(len(vocab), pitch_stats=pitch_stats, energy_stats=energy_stats))
    params = list(ref.parameters()) + list(acoustic.parameters())
    opt, sched = make_optimizer(params, cfg)
    sampler = BatchSampler(uids, cfg.batch_size, rng)
    history = LossLog()
    ref.train()
    acoustic.train()
    for step in range(1, cfg.steps + 1):
        batch = acoustic_batch(corpus, sampler(), vocab)
        style = ref(batch.mel, batch.mel_lengths)
        out = acoustic(batch.phonemes, batch.phoneme_lengths, style, batch.targets)
        bundle = model_losses(acoustic, out, batch.mel, batch.targets)
        parts = dict(bundle._asdict(), total=bundle.total)
        _check_finite(parts, step, batch.uids, stage_dir)
        _step(params, opt, sched, bundle.total, cfg.grad_clip)
        history.add(step, {k: float(v.detach()) for k, v in parts.items()})
        if callback:
            callback(step, parts)
        if step % cfg.log_every == 0:
            log.info("stage1 step %d total %.4f mel %.4f", step,
                     float(bundle.total.detach()), float(bundle.mel.detach()))

    prov = _provenance(cfg, seed, corpus)
    save_reference_encoder(layout.reference_encoder, ref.eval(), **prov)
    save_acoustic(layout.teacher_acoustic, acoustic.eval(), vocab, **prov)
    history.write(stage_dir / "losses.csv")
    return StageResult(Stage.JOINT_TEACHER,
                       {"reference_encoder": layout.reference_encoder,
                        "acoustic_model": layout.teacher_acoustic}, history)


# -- targets --------------------------------------------------------------------------

@torch.no_grad()
def extract_targets(corpus: Corpus, reference_encoder: ReferenceEncoder | str | Path,
                    out_path=None, uids: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    """Teacher embedding per utterance, one at a time with running batch-norm statistics."""
    teacher = (load_reference_encoder(reference_encoder)
               if isinstance(reference_encoder, (str, Path)) else reference_encoder)
    teacher = _freeze(teacher)
    out = {}
    for uid in (uids if uids is not None else [u.utterance_id for u in corpus]):
        mel = corpus.features(uid).mel
        if mel.size == 0:
            raise DataError(f"{uid}: empty mel")
        out[uid] = teacher(torch.from_numpy(mel.copy())).numpy()
    if out_path is not None:
        prov = {"source": "in-memory", "seed": None, "config_hash": None,
                "versions": versions(reference_encoder=teacher.config.fingerprint())}
        if isinstance(reference_encoder, (str, Path)):
            side = load_sidecar(reference_encoder)
            prov.update(source=str(reference_encoder), source_sha256=file_sha256(reference_encoder),
                        seed=side.get("seed"), config_hash=side.get("config_hash"),
                        versions=side.get("versions", prov["versions"]))
        save_targets(out_path, out, **prov)
    return out


# -- stage 2 ----------------------------------------------------------------------------

def distillation_loss(pred: torch.Tensor, target: torch.Tensor, kind: str = "mse") -> torch.Tensor:
    diff = pred - target
    return diff.pow(2).mean() if kind == "mse" else diff.abs().mean()


@torch.no_grad()
def distillation_error(student, windows: WindowCache, targets: dict[str, np.ndarray],
                       uids: Sequence[str], kind: str = "mse", chunk: int = 32) -> float:
    was = student.training
    student.eval()
    total, count = 0.0, 0
    for i in range(0, len(uids), chunk):
        part = uids[i:i + chunk]
        pred = student([window_tensors(windows(u)) for u in part])
        tgt = torch.from_numpy(np.stack([targets[u] for u in part]))
        total += float(distillation_loss(pred, tgt, kind)) * len(part)
        count += len(part)
    student.train(was)
    return total / count


def _train_student(student, corpus, windows, targets, uids, cfg, rng, label, stage_dir, history,
                   callback=None):
    params = [p for p in student.parameters() if p.requires_grad]
    opt, sched = make_optimizer(params, cfg)
    sampler = BatchSampler(uids, cfg.batch_size, rng)
    initial = distillation_error(student, windows, targets, uids, cfg.distill_loss)
    student.train()
    for step in range(1, cfg.steps + 1):
        batch = sampler()
        pred = student([window_tensors(windows(u)) for u in batch])
        tgt = torch.from_numpy(np.stack([targets[u] for u in batch]))
        loss = distillation_loss(pred, tgt, cfg.distill_loss)
        _check_finite({label: loss}, step, batch, stage_dir)
        _step(params, opt, sched, loss, cfg.grad_clip)
        history.add(step, {label: float(loss.detach())})
        if callback:
            callback(step, {label: loss})
        if step % cfg.log_every == 0:
            log.info("stage2 %s step %d loss %.5f", label, step, float(loss.detach()))
    final = distillation_error(student, windows, targets, uids, cfg.distill_loss)
    tail = history.series(label)[-max(1, cfg.steps // 10):]
    return {"initial_loss": initial, "final_loss": final,
            "converged_train_loss": float(tail.mean()) if len(tail) else initial,
            "ratio": final / initial if initial > 0 else float("nan")}


def stage2_distill(corpus: Corpus, targets: dict[str, np.ndarray] | None, cfg: TrainingStageConfig,
                   out_dir, provider: EmbeddingProvider, seed: int = 0, split: str = "train",
                   callback=None) -> StageResult:
    if cfg.stage is not Stage.DISTILL_STUDENT:
        raise ValueError("stage 2 needs a DISTILL_STUDENT config")
    layout = RunLayout(out_dir)
    stage_dir = layout.stage_dir(2)
    if targets is None:
        layout.require(layout.targets, f"ctxtts extract-targets --data {corpus.manifest_path} --out {layout.root}")
        targets = load_targets(layout.targets)
    uids = [u.utterance_id for u in corpus.split(split)]
    missing = [u for u in uids if u not in targets]
    if missing:
        raise DataError(f"no distillation target for {len(missing)} utterances, e.g. {missing[:3]}")
    frozen_files = {"reference_encoder": layout.reference_encoder, "acoustic_model": layout.teacher_acoustic}
    loaded = {k: (load_reference_encoder(p) if k == "reference_encoder" else load_acoustic(p)[0])
              for k, p in frozen_files.items() if p.exists()}
    audit = FreezeAudit(frozen_files, {k: _freeze(m) for k, m in loaded.items()})

    windows = WindowCache(corpus, provider, cfg.half_width)
    history = LossLog()
    enc_cfg = ContextEncoderConfig(half_width=cfg.half_width)
    rng = seed_everything(seed)
    student = HierarchicalContextEncoder(enc_cfg)
    report = {"hierarchical": _train_student(student, corpus, windows, targets, uids, cfg, rng,
                                             "distillation", stage_dir, history, callback)}
    prov = _provenance(cfg, seed, corpus)
    save_context_encoder(layout.student, student.eval(), **prov)
    outputs = {"context_encoder": layout.student}
    if cfg.train_plain_baseline:
        rng = seed_everything(seed)
        plain = PlainContextEncoder(enc_cfg)
        report["plain"] = _train_student(plain, corpus, windows, targets, uids, cfg, rng,
                                         "distillation_plain", stage_dir, history)
        save_context_encoder(layout.plain_student, plain.eval(), **prov)
        outputs["plain_encoder"] = layout.plain_student
    report.update(seed=seed, steps=cfg.steps, utterances=len(uids), loss=cfg.distill_loss)
    atomic_write_json(layout.ablation_report, report)
    outputs["ablation_report"] = layout.ablation_report
    history.write(stage_dir / "losses.csv")
    audit_result = audit.finish()
    atomic_write_json(stage_dir / "freeze_audit.json", audit_result)
    return StageResult(Stage.DISTILL_STUDENT, outputs, history, audit_result, report)


# -- stage 3 -----------------------------------------------------------------------------

def stage3_finetune(corpus: Corpus, cfg: TrainingStageConfig, out_dir, provider: EmbeddingProvider,
                    seed: int = 0, split: str = "train", callback=None) -> StageResult:
    if cfg.stage is not Stage.JOINT_FINETUNE:
        raise ValueError("stage 3 needs a JOINT_FINETUNE config")
    layout = RunLayout(out_dir)
    stage_dir = layout.stage_dir(3)
    layout.require(layout.teacher_acoustic, f"ctxtts train --stage 1 --data {corpus.manifest_path} --out {layout.root}")
    layout.require(layout.student, f"ctxtts train --stage 2 --data {corpus.manifest_path} --out {layout.root}")
    audit = FreezeAudit({"reference_encoder": layout.reference_encoder})

    rng = seed_everything(seed)
    acoustic, vocab = load_acoustic(layout.teacher_acoustic)
    student = load_context_encoder(layout.student)
    windows = WindowCache(corpus, provider, student.config.half_width)
    uids = [u.utterance_id for u in corpus.split(split)]
    params = list(student.parameters()) + list(acoustic.parameters())
    opt, sched = make_optimizer(params, cfg)
    sampler = BatchSampler(uids, cfg.batch_size, rng)
    history = LossLog()
    student.train()
    acoustic.train()
    for step in range(1, cfg.steps + 1):
        batch = acoustic_batch(corpus, sampler(), vocab)
        style = student([window_tensors(windows(u)) for u in batch.uids])
        out = acoustic(batch.phonemes, batch.phoneme_lengths, style, batch.targets)
        bundle = model_losses(acoustic, out, batch.mel, batch.targets)
        parts = dict(bundle._asdict(), total=bundle.total)
        _check_finite(parts, step, batch.uids, stage_dir)
        _step(params, opt, sched, bundle.total, cfg.grad_clip)
        history.add(step, {k: float(v.detach()) for k, v in parts.items()})
        if callback:
            callback(step, parts)
        if step % cfg.log_every == 0:
            log.info("stage3 step %d total %.4f", step, float(bundle.total.detach()))

    prov = _provenance(cfg, seed, corpus)
    save_context_encoder(layout.finetuned_student, student.eval(), **prov)
    save_acoustic(layout.finetuned_acoustic, acoustic.eval(), vocab, **prov)
    history.write(stage_dir / "losses.csv")
    audit_result = audit.finish()
    atomic_write_json(stage_dir / "freeze_audit.json", audit_result)
    return StageResult(Stage.JOINT_FINETUNE,
                       {"context_encoder": layout.finetuned_student,
                        "acoustic_model": layout.finetuned_acoustic}, history, audit_result)


# -- diagnostics -------------------------------------------------------------------------

@torch.no_grad()
def reconstruction_mae(corpus: Corpus, run_dir, uid: str) -> float:
    """Eval-mode mel MAE of the stage-1 teacher on one utterance, with ground-truth
    durations, pitch and energy fed to the variance adaptor."""
    layout = RunLayout(run_dir)
    ref = load_reference_encoder(layout.reference_encoder)
    acoustic, vocab = load_acoustic(layout.teacher_acoustic)
    batch = acoustic_batch(corpus, [uid], vocab)
    style = ref(batch.mel, batch.mel_lengths)
    out = acoustic(batch.phonemes, batch.phoneme_lengths, style, batch.targets)
    return float((out.mel[0, : batch.mel.size(1)] - batch.mel[0]).abs().mean())
