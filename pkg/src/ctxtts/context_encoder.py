"""Text-side style predictor.

Two attention networks are stacked: phrase embeddings of one sentence are pooled
into a sentence embedding, then sentence embeddings of the whole window are
pooled (with sinusoidal sentence positions) into the style embedding. A plain
single-GRU encoder over all phrases is provided as the ablation baseline.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence, pad_sequence

from .context_window import PHRASE_DIM, ContextWindow

HIDDEN = 256
MAX_SENTENCES = 16


@dataclass(frozen=True)
class ContextEncoderConfig:
    phrase_dim: int = PHRASE_DIM
    hidden: int = HIDDEN
    max_sentences: int = MAX_SENTENCES
    query_init: float = 0.1
    half_width: int = 2

    def fingerprint(self) -> dict:
        return asdict(self)


def sinusoid_table(n_positions: int, dim: int) -> torch.Tensor:
    """Row p: column 2i = sin(p / 10000^(2i/dim)), column 2i+1 = cos(same angle)."""
    pos = torch.arange(n_positions, dtype=torch.float64)[:, None]
    two_i = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, two_i / dim)
    table = torch.zeros(n_positions, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle)
    return table


def lengths_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    return torch.arange(max_len)[None, :] < lengths[:, None]


class AttentionPool(nn.Module):
    """Scaled dot-product attention with a single learnable query."""

    def __init__(self, dim: int = HIDDEN, query_init: float = 0.1):
        super().__init__()
        self.dim = dim
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.query = nn.Parameter(torch.empty(dim).uniform_(-query_init, query_init))

    def logits(self, h: torch.Tensor) -> torch.Tensor:
        return self.w_k(h) @ self.query / math.sqrt(self.dim)

    def forward(self, h: torch.Tensor, mask: torch.Tensor | None = None):
        """h: [B, N, D]; mask: [B, N] True where valid. Returns ([B, D], weights [B, N])."""
        if h.size(1) == 0:
            raise ValueError("attention over an empty sequence")
        scores = self.logits(h)
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        scores = scores - scores.max(dim=-1, keepdim=True).values.detach()
        expd = torch.exp(scores)
        weights = expd / expd.sum(dim=-1, keepdim=True)
        return torch.einsum("bn,bnd->bd", weights, self.w_v(h)), weights


def _init_gru(gru: nn.GRU) -> None:
    for name, p in gru.named_parameters():
        if name.startswith("weight_hh"):
            for chunk in p.data.chunk(3, dim=0):
                nn.init.orthogonal_(chunk)
        elif name.startswith("weight_ih"):
            bound = 1.0 / math.sqrt(p.size(1))
            nn.init.uniform_(p, -bound, bound)
        else:
            nn.init.zeros_(p)


def _run_bigru(gru: nn.GRU, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
    out, _ = gru(packed)
    out, _ = pad_packed_sequence(out, batch_first=True, total_length=x.size(1))
    return out


class InterPhraseEncoder(nn.Module):
    def __init__(self, config: ContextEncoderConfig = ContextEncoderConfig()):
        super().__init__()
        self.bigru = nn.GRU(config.phrase_dim, config.hidden // 2, batch_first=True,
                            bidirectional=True)
        _init_gru(self.bigru)
        self.attention = AttentionPool(config.hidden, config.query_init)

    def forward(self, phrases: torch.Tensor, lengths: torch.Tensor):
        """phrases: [S, Nmax, 768] padded; lengths: [S]. Returns ([S, 256], weights [S, Nmax])."""
        if (lengths < 1).any():
            raise ValueError("every sentence needs at least one phrase")
        h = _run_bigru(self.bigru, phrases, lengths)
        return self.attention(h, lengths_mask(lengths, phrases.size(1)))


class InterSentenceEncoder(nn.Module):
    def __init__(self, config: ContextEncoderConfig = ContextEncoderConfig()):
        super().__init__()
        self.max_sentences = config.max_sentences
        self.bigru = nn.GRU(config.hidden, config.hidden // 2, batch_first=True,
                            bidirectional=True)
        _init_gru(self.bigru)
        self.register_buffer("positional", sinusoid_table(config.max_sentences, config.hidden).float())
        self.attention = AttentionPool(config.hidden, config.query_init)

    def forward(self, sentences: torch.Tensor, lengths: torch.Tensor):
        """sentences: [B, Smax, 256] padded; lengths: [B]. Returns ([B, 256], weights [B, Smax])."""
        if sentences.size(1) > self.max_sentences or (lengths > self.max_sentences).any():
            raise ValueError(f"at most {self.max_sentences} sentences fit the positional table")
        if (lengths < 1).any():
            raise ValueError("every window needs at least one sentence")
        h = _run_bigru(self.bigru, sentences, lengths)
        h = h + self.positional[: h.size(1)].to(h.dtype)
        return self.attention(h, lengths_mask(lengths, sentences.size(1)))


class HierarchicalContextEncoder(nn.Module):
    def __init__(self, config: ContextEncoderConfig = ContextEncoderConfig()):
        super().__init__()
        self.config = config
        self.phrase_level = InterPhraseEncoder(config)
        self.sentence_level = InterSentenceEncoder(config)

    def forward(self, windows: Sequence[Sequence[torch.Tensor]], return_weights: bool = False):
        """windows: per window, the [N_i x 768] phrase matrices of its sentences in order."""
        flat = [m for w in windows for m in w]
        if not flat:
            raise ValueError("no sentences to encode")
        phrase_lengths = torch.tensor([m.size(0) for m in flat])
        padded = pad_sequence(list(flat), batch_first=True)
        sent_emb, phrase_w = self.phrase_level(padded, phrase_lengths)

        window_lengths = torch.tensor([len(w) for w in windows])
        groups = torch.split(sent_emb, window_lengths.tolist())
        style, sent_w = self.sentence_level(pad_sequence(list(groups), batch_first=True), window_lengths)
        if return_weights:
            per_sentence = [phrase_w[i, : phrase_lengths[i]] for i in range(len(flat))]
            return style, {"phrase": per_sentence, "sentence": sent_w}
        return style


class PlainContextEncoder(nn.Module):
    """Single GRU over every phrase of the window; the final state is the style."""

    def __init__(self, config: ContextEncoderConfig = ContextEncoderConfig()):
        super().__init__()
        self.config = config
        self.gru = nn.GRU(config.phrase_dim, config.hidden, batch_first=True)
        _init_gru(self.gru)

    def forward(self, windows: Sequence[Sequence[torch.Tensor]], return_weights: bool = False):
        seqs = [torch.cat(list(w), dim=0) for w in windows]
        if not seqs or any(s.size(0) == 0 for s in seqs):
            raise ValueError("plain encoder needs at least one phrase per window")
        lengths = torch.tensor([s.size(0) for s in seqs])
        packed = pack_padded_sequence(pad_sequence(seqs, batch_first=True), lengths,
                                      batch_first=True, enforce_sorted=False)
        _, h_last = self.gru(packed)
        style = h_last[-1]
        return (style, {}) if return_weights else style


def window_tensors(window: ContextWindow, dtype=torch.float32) -> list[torch.Tensor]:
    return [torch.from_numpy(np.asarray(m)).to(dtype) for m in window.matrices()]


def inter_phrase_encode(phrases, encoder: InterPhraseEncoder):
    """One sentence: [N x 768] -> (256-dim sentence embedding, N attention weights)."""
    phrases = torch.as_tensor(phrases, dtype=next(encoder.parameters()).dtype)
    if phrases.dim() != 2 or phrases.size(0) == 0:
        raise ValueError("need a non-empty [N x 768] phrase matrix")
    out, w = encoder(phrases[None], torch.tensor([phrases.size(0)]))
    return out[0], w[0]


def inter_sentence_encode(sentence_embs, encoder: InterSentenceEncoder):
    """Ordered [S x 256] sentence embeddings -> (style embedding, S attention weights)."""
    x = torch.as_tensor(sentence_embs, dtype=next(encoder.parameters()).dtype)
    if x.dim() != 2 or x.size(0) == 0:
        raise ValueError("need a non-empty [S x 256] sentence matrix")
    out, w = encoder(x[None], torch.tensor([x.size(0)]))
    return out[0], w[0]


def predict_style(window: ContextWindow, encoder: HierarchicalContextEncoder) -> torch.Tensor:
    dtype = next(encoder.parameters()).dtype
    return encoder([window_tensors(window, dtype)])[0]


def plain_encode(window: ContextWindow, encoder: PlainContextEncoder) -> torch.Tensor:
    dtype = next(encoder.parameters()).dtype
    return encoder([window_tensors(window, dtype)])[0]
