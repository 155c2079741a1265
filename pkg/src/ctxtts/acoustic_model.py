"""Non-autoregressive phoneme-to-mel model with an additive utterance style.

The style vector is broadcast over phonemes and added to the encoder output;
duration, pitch and energy are predicted per phoneme, and only then are the
phoneme-level features expanded to frames.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .context_encoder import sinusoid_table
from .reference_encoder import N_MELS, STYLE_DIM

PAD_ID = 0


class DegenerateOutputError(ValueError):
    pass


@dataclass(frozen=True)
class AcousticConfig:
    vocab_size: int
    hidden: int = 256
    encoder_layers: int = 4
    decoder_layers: int = 4
    heads: int = 2
    conv_filter: int = 1024
    conv_kernels: tuple[int, int] = (3, 1)
    dropout: float = 0.1
    predictor_filter: int = 256
    predictor_kernel: int = 3
    predictor_dropout: float = 0.5
    n_mels: int = N_MELS
    max_positions: int = 2000
    # corpus statistics used to normalise pitch (Hz) and energy before regression
    pitch_stats: tuple[float, float] = (0.0, 1.0)
    energy_stats: tuple[float, float] = (0.0, 1.0)

    def fingerprint(self) -> dict:
        d = asdict(self)
        d["variance_order"] = "duration|pitch->+emb|energy->+emb (cumulative)"
        return d


class VarianceTargets(NamedTuple):
    """Phoneme-level duration (frames), pitch (Hz) and energy."""
    duration: torch.Tensor
    pitch: torch.Tensor
    energy: torch.Tensor


class AcousticOutput(NamedTuple):
    mel: torch.Tensor            # [B, T, 80]
    mel_lengths: torch.Tensor    # [B]
    log_duration: torch.Tensor   # [B, M] log(1 + d)
    pitch: torch.Tensor          # [B, M] normalised
    energy: torch.Tensor         # [B, M] normalised
    duration: torch.Tensor       # [B, M] integer frames actually used for expansion
    phoneme_mask: torch.Tensor   # [B, M]


def length_regulate(features: torch.Tensor, durations) -> torch.Tensor:
    """Repeat row m of ``features`` [M x D] ``durations[m]`` times."""
    durations = torch.as_tensor(durations, dtype=torch.long)
    if durations.dim() != 1 or durations.size(0) != features.size(0):
        raise ValueError("durations must be one integer per feature row")
    if (durations < 0).any():
        raise ValueError("durations must be non-negative")
    if int(durations.sum()) == 0:
        raise DegenerateOutputError("total duration is zero")
    return torch.repeat_interleave(features, durations, dim=0)


def batch_length_regulate(x: torch.Tensor, durations: torch.Tensor, mask: torch.Tensor):
    durations = durations.masked_fill(~mask, 0)
    rows = [length_regulate(x[b], durations[b]) for b in range(x.size(0))]
    lengths = torch.tensor([r.size(0) for r in rows])
    return nn.utils.rnn.pad_sequence(rows, batch_first=True), lengths


def round_durations(log_duration: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Inverse of log(1 + d), rounded half-up, floored at 0; every item keeps >= 1 frame."""
    # the 1e-4 slack keeps exact halves from rounding down through float32 error
    d = torch.floor(torch.exp(log_duration.detach()) - 0.5 + 1e-4).clamp(min=0).long()
    d = d.masked_fill(~mask, 0)
    for b in torch.nonzero(d.sum(dim=1) == 0).flatten().tolist():
        scores = log_duration[b].detach().masked_fill(~mask[b], float("-inf"))
        d[b, int(scores.argmax())] = 1
    return d


class FFTBlock(nn.Module):
    def __init__(self, hidden: int, heads: int, conv_filter: int, kernels, dropout: float):
        super().__init__()
        self.attn = nn.MultiheadAttention(hidden, heads, dropout=dropout, batch_first=True)
        self.norm1 = nn.LayerNorm(hidden)
        self.conv1 = nn.Conv1d(hidden, conv_filter, kernels[0], padding=kernels[0] // 2)
        self.conv2 = nn.Conv1d(conv_filter, hidden, kernels[1], padding=kernels[1] // 2)
        self.norm2 = nn.LayerNorm(hidden)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        keep = mask.unsqueeze(-1).to(x.dtype)
        a, _ = self.attn(x, x, x, key_padding_mask=~mask, need_weights=False)
        x = self.norm1(x + self.dropout(a)) * keep
        y = self.conv2(torch.relu(self.conv1(x.transpose(1, 2)))).transpose(1, 2)
        return self.norm2(x + self.dropout(y)) * keep


class VariancePredictor(nn.Module):
    def __init__(self, hidden: int, filt: int, kernel: int, dropout: float):
        super().__init__()
        self.conv1 = nn.Conv1d(hidden, filt, kernel, padding=kernel // 2)
        self.norm1 = nn.LayerNorm(filt)
        self.conv2 = nn.Conv1d(filt, filt, kernel, padding=kernel // 2)
        self.norm2 = nn.LayerNorm(filt)
        self.dropout = nn.Dropout(dropout)
        self.out = nn.Linear(filt, 1)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        keep = mask.unsqueeze(-1).to(x.dtype)
        h = self.dropout(self.norm1(torch.relu(self.conv1(x.transpose(1, 2)).transpose(1, 2))))
        h = self.dropout(self.norm2(torch.relu(self.conv2((h * keep).transpose(1, 2)).transpose(1, 2))))
        return self.out(h * keep).squeeze(-1).masked_fill(~mask, 0.0)


class AcousticModel(nn.Module):
    def __init__(self, config: AcousticConfig):
        super().__init__()
        self.config = config
        c = config
        self.embedding = nn.Embedding(c.vocab_size, c.hidden, padding_idx=PAD_ID)
        self.register_buffer("positional", sinusoid_table(c.max_positions, c.hidden).float())
        block = lambda: FFTBlock(c.hidden, c.heads, c.conv_filter, c.conv_kernels, c.dropout)
        self.encoder = nn.ModuleList(block() for _ in range(c.encoder_layers))
        predictor = lambda: VariancePredictor(c.hidden, c.predictor_filter, c.predictor_kernel,
                                              c.predictor_dropout)
        self.duration_predictor = predictor()
        self.pitch_predictor = predictor()
        self.energy_predictor = predictor()
        self.pitch_embedding = nn.Conv1d(1, c.hidden, 3, padding=1)
        self.energy_embedding = nn.Conv1d(1, c.hidden, 3, padding=1)
        self.decoder = nn.ModuleList(block() for _ in range(c.decoder_layers))
        self.mel_proj = nn.Linear(c.hidden, c.n_mels)
        self.register_buffer("pitch_stats", torch.tensor(c.pitch_stats, dtype=torch.float32))
        self.register_buffer("energy_stats", torch.tensor(c.energy_stats, dtype=torch.float32))

    # normalisation helpers (Hz <-> model domain)
    def normalize_pitch(self, hz):
        return (hz - self.pitch_stats[0]) / self.pitch_stats[1]

    def denormalize_pitch(self, z):
        return z * self.pitch_stats[1] + self.pitch_stats[0]

    def normalize_energy(self, e):
        return (e - self.energy_stats[0]) / self.energy_stats[1]

    def denormalize_energy(self, z):
        return z * self.energy_stats[1] + self.energy_stats[0]

    def _positions(self, x):
        if x.size(1) > self.positional.size(0):
            raise ValueError(f"sequence of {x.size(1)} exceeds {self.positional.size(0)} positions")
        return self.positional[: x.size(1)].to(x.dtype)

    def encode(self, phonemes: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = self.embedding(phonemes)
        x = x + self._positions(x)
        for blk in self.encoder:
            x = blk(x, mask)
        return x

    def variance_adaptor(self, x, style, mask, targets: VarianceTargets | None = None,
                         duration_override: torch.Tensor | None = None):
        """Style injection, cumulative variance prediction, then frame expansion."""
        if style.size(-1) != self.config.hidden:
            raise ValueError(f"style must be {self.config.hidden}-dim, got {style.size(-1)}")
        keep = mask.unsqueeze(-1).to(x.dtype)
        x = (x + style.unsqueeze(1)) * keep
        log_d = self.duration_predictor(x, mask)

        pitch = self.pitch_predictor(x, mask)
        pitch_in = self.normalize_pitch(targets.pitch).masked_fill(~mask, 0) if targets is not None else pitch
        x = x + self.pitch_embedding(pitch_in.unsqueeze(1).to(x.dtype)).transpose(1, 2) * keep

        energy = self.energy_predictor(x, mask)
        energy_in = self.normalize_energy(targets.energy).masked_fill(~mask, 0) if targets is not None else energy
        x = x + self.energy_embedding(energy_in.unsqueeze(1).to(x.dtype)).transpose(1, 2) * keep

        if duration_override is not None:
            durations = duration_override.long()
        elif targets is not None:
            durations = targets.duration.long()
        else:
            durations = round_durations(log_d, mask)
        frames, mel_lengths = batch_length_regulate(x, durations, mask)
        return frames, mel_lengths, log_d, pitch, energy, durations.masked_fill(~mask, 0)

    def decode(self, frames: torch.Tensor, frame_mask: torch.Tensor) -> torch.Tensor:
        x = frames + self._positions(frames)
        for blk in self.decoder:
            x = blk(x, frame_mask)
        return self.mel_proj(x) * frame_mask.unsqueeze(-1).to(x.dtype)

    def forward(self, phonemes: torch.Tensor, phoneme_lengths: torch.Tensor, style: torch.Tensor,
                targets: VarianceTargets | None = None,
                duration_override: torch.Tensor | None = None) -> AcousticOutput:
        mask = torch.arange(phonemes.size(1))[None, :] < phoneme_lengths[:, None]
        enc = self.encode(phonemes, mask)
        frames, mel_lengths, log_d, pitch, energy, durations = self.variance_adaptor(
            enc, style, mask, targets, duration_override)
        frame_mask = torch.arange(frames.size(1))[None, :] < mel_lengths[:, None]
        mel = self.decode(frames, frame_mask)
        return AcousticOutput(mel, mel_lengths, log_d, pitch, energy, durations, mask)


class LossBundle(NamedTuple):
    mel: torch.Tensor
    duration: torch.Tensor
    pitch: torch.Tensor
    energy: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.mel + self.duration + self.pitch + self.energy

    def as_dict(self) -> dict[str, float]:
        d = {k: float(v) for k, v in self._asdict().items()}
        d["total"] = float(self.total)
        return d


def compute_losses(pred_mel, gt_mel, pred_log_duration, pred_pitch, pred_energy,
                   gt_duration, gt_pitch, gt_energy,
                   frame_mask=None, phoneme_mask=None) -> LossBundle:
    """Mel MAE, duration MSE in log(1+d), pitch/energy MSE; all masked means.

    Pitch and energy must already be in the same domain on both sides.
    """
    if pred_mel.shape != gt_mel.shape:
        raise ValueError(f"mel shape mismatch: {tuple(pred_mel.shape)} vs {tuple(gt_mel.shape)}")
    if frame_mask is None:
        frame_mask = torch.ones(gt_mel.shape[:-1], dtype=torch.bool)
    if phoneme_mask is None:
        phoneme_mask = torch.ones(gt_duration.shape, dtype=torch.bool)
    fm = frame_mask.unsqueeze(-1).expand_as(gt_mel)
    mel = (pred_mel - gt_mel).abs()[fm].mean()
    log_gt = torch.log1p(gt_duration.to(pred_log_duration.dtype))
    duration = ((pred_log_duration - log_gt) ** 2)[phoneme_mask].mean()
    pitch = ((pred_pitch - gt_pitch) ** 2)[phoneme_mask].mean()
    energy = ((pred_energy - gt_energy) ** 2)[phoneme_mask].mean()
    return LossBundle(mel, duration, pitch, energy)


def model_losses(model: AcousticModel, out: AcousticOutput, gt_mel: torch.Tensor,
                 targets: VarianceTargets) -> LossBundle:
    if out.mel.shape != gt_mel.shape:
        raise ValueError(f"frame mismatch: predicted {tuple(out.mel.shape)} vs target {tuple(gt_mel.shape)}")
    frame_mask = torch.arange(gt_mel.size(1))[None, :] < out.mel_lengths[:, None]
    return compute_losses(
        out.mel, gt_mel, out.log_duration, out.pitch, out.energy,
        targets.duration, model.normalize_pitch(targets.pitch), model.normalize_energy(targets.energy),
        frame_mask, out.phoneme_mask,
    )


@torch.no_grad()
def synthesize(model: AcousticModel, phoneme_ids: Sequence[int], style,
               teacher: VarianceTargets | None = None,
               duration_override=None) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Single-utterance inference. Returns (mel [T x 80], phoneme-level predictions in Hz/frames)."""
    dtype = next(model.parameters()).dtype
    style = torch.as_tensor(style, dtype=dtype)
    if style.dim() != 1 or style.size(0) != STYLE_DIM:
        raise ValueError(f"style must be a {STYLE_DIM}-dim vector, got shape {tuple(style.shape)}")
    ids = torch.as_tensor(list(phoneme_ids), dtype=torch.long)
    if ids.numel() == 0:
        raise ValueError("empty phoneme sequence")
    if teacher is not None:
        teacher = VarianceTargets(*(torch.as_tensor(np.asarray(t))[None].to(dtype) for t in teacher))
        teacher = teacher._replace(duration=teacher.duration.long())
    override = None if duration_override is None else torch.as_tensor(duration_override)[None]
    was_training = model.training
    model.eval()
    try:
        out = model(ids[None], torch.tensor([ids.numel()]), style[None], teacher, override)
    finally:
        model.train(was_training)
    predicted = {
        "duration": out.duration[0].numpy().astype(np.int64),
        "pitch": model.denormalize_pitch(out.pitch[0]).numpy(),
        "energy": model.denormalize_energy(out.energy[0]).numpy(),
        "log_duration": out.log_duration[0].numpy(),
    }
    return out.mel[0, : out.mel_lengths[0]].numpy(), predicted
