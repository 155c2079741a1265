"""Objective metrics: F0/energy RMSE along a DTW path, duration MSE, MCD."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.fft import dct

from .dtw import dtw, validate_path

MCD_CONST = 10.0 / math.log(10.0) * math.sqrt(2.0)


@dataclass
class MetricReport:
    f0_rmse: float
    energy_rmse: float
    duration_mse: float
    mcd: float
    duration_mse_raw: float = 0.0
    flags: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def _aligned(pred, gt, path):
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    try:
        validate_path(path, len(pred), len(gt))
    except ValueError as exc:
        raise ValueError(f"path does not fit sequences of length {len(pred)} and {len(gt)}: {exc}") from None
    idx = np.asarray(path, dtype=np.int64)
    return pred[idx[:, 0]], gt[idx[:, 1]]


def f0_rmse(pred_f0, gt_f0, path, flags: list[str] | None = None) -> float:
    """RMSE over aligned pairs where both frames are voiced (F0 > 0)."""
    p, g = _aligned(pred_f0, gt_f0, path)
    voiced = (p > 0) & (g > 0)
    if not voiced.any():
        if flags is not None:
            flags.append("no_voiced_pairs")
        return 0.0
    return float(np.sqrt(np.mean((p[voiced] - g[voiced]) ** 2)))


def energy_rmse(pred, gt, path) -> float:
    p, g = _aligned(pred, gt, path)
    return float(np.sqrt(np.mean((p - g) ** 2)))


def duration_mse(pred_dur, gt_dur, log_domain: bool = True) -> float:
    p = np.asarray(pred_dur, dtype=np.float64)
    g = np.asarray(gt_dur, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"phoneme count mismatch: {p.shape} vs {g.shape}")
    if log_domain:
        p, g = np.log1p(p), np.log1p(g)
    return float(np.mean((p - g) ** 2))


def mel_cepstrum(mel, order: int = 13) -> np.ndarray:
    """Orthonormal DCT-II of each log-mel frame, keeping c1..c_order."""
    mel = np.asarray(mel, dtype=np.float64)
    return dct(mel, type=2, norm="ortho", axis=-1)[..., 1:order + 1]


def mcd(pred_mel, gt_mel, order: int = 13) -> float:
    """Mean cepstral distortion in dB along the DTW-optimal cepstral alignment."""
    pred_mel, gt_mel = np.asarray(pred_mel), np.asarray(gt_mel)
    if pred_mel.ndim != 2 or gt_mel.ndim != 2 or pred_mel.shape[1] != gt_mel.shape[1]:
        raise ValueError(f"mel shape mismatch: {pred_mel.shape} vs {gt_mel.shape}")
    if len(pred_mel) == 0 or len(gt_mel) == 0:
        raise ValueError("empty mel-spectrogram")
    cp, cg = mel_cepstrum(pred_mel, order), mel_cepstrum(gt_mel, order)
    path, _ = dtw(cp, cg)
    idx = np.asarray(path)
    dist = np.linalg.norm(cp[idx[:, 0]] - cg[idx[:, 1]], axis=1)
    return float(MCD_CONST * dist.mean())


def evaluate_utterance(pred_mel, gt_mel, pred_f0, gt_f0, pred_energy, gt_energy,
                       pred_dur, gt_dur, mcd_order: int = 13) -> MetricReport:
    """Frame-level F0 and energy are aligned along the mel DTW path (prediction -> ground truth)."""
    path, _ = dtw(pred_mel, gt_mel)
    flags: list[str] = []
    return MetricReport(
        f0_rmse=f0_rmse(pred_f0, gt_f0, path, flags),
        energy_rmse=energy_rmse(pred_energy, gt_energy, path),
        duration_mse=duration_mse(pred_dur, gt_dur),
        mcd=mcd(pred_mel, gt_mel, mcd_order),
        duration_mse_raw=duration_mse(pred_dur, gt_dur, log_domain=False),
        flags=flags,
    )
