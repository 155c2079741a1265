"""Run-directory layout and module (de)serialisation with provenance sidecars."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .acoustic_model import AcousticConfig, AcousticModel
from .context_encoder import ContextEncoderConfig, HierarchicalContextEncoder, PlainContextEncoder
from .reference_encoder import ReferenceEncoder, ReferenceEncoderConfig
from .tensorio import load_module_state, load_sidecar, load_tensors, save_module, save_tensors


class MissingPrerequisite(FileNotFoundError):
    def __init__(self, what: str, hint: str):
        super().__init__(f"{what} not found; produce it with: {hint}")
        self.hint = hint


def _fp_hash(fp: dict) -> str:
    return hashlib.sha256(json.dumps(fp, sort_keys=True).encode()).hexdigest()[:12]


def versions(**fingerprints: dict) -> dict:
    out = {"ctxtts": __version__}
    out.update({k: _fp_hash(v) for k, v in fingerprints.items()})
    return out


@dataclass(frozen=True)
class RunLayout:
    root: Path

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))

    def stage_dir(self, stage: int) -> Path:
        return self.root / f"stage{stage}"

    @property
    def reference_encoder(self) -> Path:
        return self.stage_dir(1) / "reference_encoder.bin"

    @property
    def teacher_acoustic(self) -> Path:
        return self.stage_dir(1) / "acoustic_model.bin"

    @property
    def targets(self) -> Path:
        return self.root / "targets" / "style_targets.bin"

    @property
    def student(self) -> Path:
        return self.stage_dir(2) / "context_encoder.bin"

    @property
    def plain_student(self) -> Path:
        return self.stage_dir(2) / "plain_encoder.bin"

    @property
    def ablation_report(self) -> Path:
        return self.stage_dir(2) / "ablation_report.json"

    @property
    def finetuned_student(self) -> Path:
        return self.stage_dir(3) / "context_encoder.bin"

    @property
    def finetuned_acoustic(self) -> Path:
        return self.stage_dir(3) / "acoustic_model.bin"

    def require(self, path: Path, hint: str) -> Path:
        if not path.exists():
            raise MissingPrerequisite(str(path), hint)
        return path

    def inference_pair(self, manifest="<manifest>") -> tuple[Path, Path]:
        """Best available (context encoder, acoustic model) for text-only synthesis."""
        if self.finetuned_student.exists() and self.finetuned_acoustic.exists():
            return self.finetuned_student, self.finetuned_acoustic
        self.require(self.teacher_acoustic, f"ctxtts train --stage 1 --data {manifest} --out {self.root}")
        return (self.require(self.student, f"ctxtts train --stage 2 --data {manifest} --out {self.root}"),
                self.teacher_acoustic)


def save_reference_encoder(path, model: ReferenceEncoder, **provenance) -> None:
    fp = model.config.fingerprint()
    save_module(path, model, {"module": "reference_encoder", "architecture": fp,
                              "versions": versions(reference_encoder=fp), **provenance})


def load_reference_encoder(path) -> ReferenceEncoder:
    side = load_sidecar(path)
    arch = {k: v for k, v in side["architecture"].items() if k in ReferenceEncoderConfig.__dataclass_fields__}
    arch["channels"] = tuple(arch["channels"])
    model = ReferenceEncoder(ReferenceEncoderConfig(**arch))
    load_module_state(path, model)
    return model.eval()


def save_acoustic(path, model: AcousticModel, vocab: list[str], **provenance) -> None:
    fp = model.config.fingerprint()
    save_module(path, model, {"module": "acoustic_model", "architecture": fp, "vocab": vocab,
                              "versions": versions(acoustic_model=fp), **provenance})


def load_acoustic(path) -> tuple[AcousticModel, list[str]]:
    side = load_sidecar(path)
    arch = {k: v for k, v in side["architecture"].items() if k in AcousticConfig.__dataclass_fields__}
    for key in ("conv_kernels", "pitch_stats", "energy_stats"):
        arch[key] = tuple(arch[key])
    model = AcousticModel(AcousticConfig(**arch))
    load_module_state(path, model)
    return model.eval(), side["vocab"]


def save_context_encoder(path, model, **provenance) -> None:
    kind = "plain" if isinstance(model, PlainContextEncoder) else "hierarchical"
    fp = dict(model.config.fingerprint(), kind=kind)
    save_module(path, model, {"module": "context_encoder", "architecture": fp,
                              "half_width": model.config.half_width,
                              "max_sentences": model.config.max_sentences,
                              "versions": versions(context_encoder=fp), **provenance})


def load_context_encoder(path):
    side = load_sidecar(path)
    arch = dict(side["architecture"])
    kind = arch.pop("kind", "hierarchical")
    cfg = ContextEncoderConfig(**arch)
    model = PlainContextEncoder(cfg) if kind == "plain" else HierarchicalContextEncoder(cfg)
    load_module_state(path, model)
    return model.eval()


def save_targets(path, targets: dict[str, np.ndarray], **provenance) -> None:
    ordered = {k: np.asarray(targets[k], dtype=np.float32) for k in sorted(targets)}
    save_tensors(path, ordered, {"kind": "style_targets", "count": len(ordered), **provenance})


def load_targets(path) -> dict[str, np.ndarray]:
    return load_tensors(path)


def seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    return np.random.default_rng(seed)
