"""Speech-side style extractor: mel-spectrogram -> 256-dim style embedding."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence

N_MELS = 80
STYLE_DIM = 256
SAMPLE_RATE = 24000
HOP_LENGTH = 240
FRAME_SIZE = 1200


@dataclass(frozen=True)
class ReferenceEncoderConfig:
    n_mels: int = N_MELS
    channels: tuple[int, ...] = (32, 32, 64, 64, 128, 128)
    kernel_size: int = 3
    gru_units: int = 128
    style_dim: int = STYLE_DIM

    def fingerprint(self) -> dict:
        d = asdict(self)
        # the GRU sees one flattened (channel x reduced-frequency) vector per reduced time step
        d.update(block="conv-relu-bn", gru_input="time-major, channel-major flatten")
        return d

    @property
    def min_frames(self) -> int:
        return 2 ** len(self.channels)


def _reduce(lengths: torch.Tensor) -> torch.Tensor:
    # k=3, stride=2, pad=1 gives ceil(n / 2)
    return (lengths + 1) // 2


class ReferenceEncoder(nn.Module):
    """Six stride-2 conv layers (ReLU then batch norm), a GRU and a Tanh projection."""

    def __init__(self, config: ReferenceEncoderConfig = ReferenceEncoderConfig()):
        super().__init__()
        self.config = config
        chans = (1,) + tuple(config.channels)
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], config.kernel_size, stride=2,
                      padding=config.kernel_size // 2)
            for i in range(len(config.channels))
        )
        self.norms = nn.ModuleList(nn.BatchNorm2d(c) for c in config.channels)
        freq = config.n_mels
        for _ in config.channels:
            freq = (freq + 1) // 2
        self.reduced_freq = freq
        self.gru = nn.GRU(config.channels[-1] * freq, config.gru_units, batch_first=True)
        self.proj = nn.Linear(config.gru_units, config.style_dim)

    def forward(self, mels: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        """mels: [B, T, 80] (or [T, 80]); lengths: valid frames per item. Returns [B, 256]."""
        squeeze = mels.dim() == 2
        if squeeze:
            mels = mels.unsqueeze(0)
        if mels.size(-1) != self.config.n_mels:
            raise ValueError(f"expected {self.config.n_mels} mel channels, got {mels.size(-1)}")
        batch, frames = mels.shape[:2]
        if lengths is None:
            lengths = torch.full((batch,), frames, dtype=torch.long)
        lengths = lengths.to(torch.long).cpu()
        if frames < self.config.min_frames:
            mels = nn.functional.pad(mels, (0, 0, 0, self.config.min_frames - frames))
            frames = self.config.min_frames
        # items shorter than the minimum are treated as zero-padded to it
        lengths = lengths.clamp(min=self.config.min_frames)

        x = mels.unsqueeze(1)  # [B, 1, T, F]
        for conv, norm in zip(self.convs, self.norms):
            x = norm(torch.relu(conv(x)))
            lengths = _reduce(lengths)
            mask = torch.arange(x.size(2)) < lengths[:, None]
            x = x * mask[:, None, :, None].to(x.dtype)

        b, c, t, f = x.shape
        x = x.permute(0, 2, 1, 3).reshape(b, t, c * f)
        packed = pack_padded_sequence(x, lengths, batch_first=True, enforce_sorted=False)
        _, h_last = self.gru(packed)
        style = torch.tanh(self.proj(h_last[-1]))
        return style[0] if squeeze else style
