"""Context windows of +/-L sentences and their phrase embeddings.

Embeddings come from a pluggable provider: either a deterministic hash-based
stub (tests, toy training) or a file of vectors precomputed offline by a
pretrained phrase-level language model.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .tensorio import FormatError, atomic_write_bytes, atomic_write_json

PHRASE_DIM = 768
DEFAULT_HALF_WIDTH = 2

_U32 = struct.Struct("<I")


class CompletenessError(KeyError):
    pass


@dataclass(frozen=True)
class Sentence:
    document_id: str
    index_in_document: int
    text: str
    phrase_spans: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if self.index_in_document < 0:
            raise ValueError("index_in_document must be non-negative")
        if self.text and not self.phrase_spans:
            raise ValueError(f"sentence {self.sentence_id} has no phrases")
        for start, end in self.phrase_spans:
            if not 0 <= start < end <= len(self.text):
                raise ValueError(f"bad phrase span ({start}, {end}) in {self.sentence_id}")

    @property
    def sentence_id(self) -> str:
        return f"{self.document_id}:{self.index_in_document}"

    @property
    def phrase_count(self) -> int:
        return len(self.phrase_spans)

    @property
    def phrases(self) -> list[str]:
        return [self.text[s:e] for s, e in self.phrase_spans]


@dataclass(frozen=True)
class PhraseEmbeddingSequence:
    sentence_id: str
    embeddings: np.ndarray

    def __post_init__(self):
        emb = self.embeddings
        if emb.ndim != 2 or emb.shape[1] != PHRASE_DIM:
            raise FormatError(f"{self.sentence_id}: expected [n x {PHRASE_DIM}], got {emb.shape}")


@dataclass(frozen=True)
class ContextWindow:
    center: Sentence
    past: tuple[Sentence, ...] = ()
    future: tuple[Sentence, ...] = ()
    half_width: int = DEFAULT_HALF_WIDTH
    phrase_embeddings: tuple[PhraseEmbeddingSequence, ...] | None = field(default=None, compare=False)

    @property
    def sentences(self) -> tuple[Sentence, ...]:
        return self.past + (self.center,) + self.future

    @property
    def center_position(self) -> int:
        return len(self.past)

    @property
    def is_embedded(self) -> bool:
        return self.phrase_embeddings is not None

    def matrices(self) -> list[np.ndarray]:
        if self.phrase_embeddings is None:
            raise ValueError("window has no phrase embeddings; call embed_window first")
        return [p.embeddings for p in self.phrase_embeddings]


def build_window(document: Sequence[Sentence], center_index: int,
                 half_width: int = DEFAULT_HALF_WIDTH) -> ContextWindow:
    """Window around ``document[center_index]``, clamped at document edges."""
    if not 0 <= center_index < len(document):
        raise IndexError(f"center_index {center_index} out of range for {len(document)} sentences")
    if half_width < 0:
        raise ValueError("half_width must be >= 0")
    lo = max(0, center_index - half_width)
    hi = min(len(document), center_index + half_width + 1)
    return ContextWindow(
        center=document[center_index],
        past=tuple(document[lo:center_index]),
        future=tuple(document[center_index + 1:hi]),
        half_width=half_width,
    )


class EmbeddingProvider(Protocol):
    def embed(self, sentences: Sequence[Sentence]) -> np.ndarray:
        """Return a [total_phrases x 768] matrix for the sentences, in order."""
        ...


def embed_window(window: ContextWindow, provider: EmbeddingProvider) -> ContextWindow:
    sentences = window.sentences
    counts = [s.phrase_count for s in sentences]
    matrix = np.asarray(provider.embed(sentences))
    if matrix.ndim != 2 or matrix.shape[0] != sum(counts) or matrix.shape[1] != PHRASE_DIM:
        raise FormatError(
            f"provider returned {matrix.shape}, expected ({sum(counts)}, {PHRASE_DIM})")
    bounds = np.cumsum([0] + counts)
    seqs = tuple(
        PhraseEmbeddingSequence(s.sentence_id, matrix[bounds[i]:bounds[i + 1]])
        for i, s in enumerate(sentences)
    )
    return replace(window, phrase_embeddings=seqs)


# -- stub provider ------------------------------------------------------------

def phrase_vector(phrase: str, seed: int = 0) -> np.ndarray:
    """768 floats in [-1, 1) derived from SHAKE-256 of (seed, phrase)."""
    if not phrase:
        raise ValueError("empty phrase string")
    digest = hashlib.shake_256(f"{seed}\x00{phrase}".encode("utf-8")).digest(4 * PHRASE_DIM)
    ints = np.frombuffer(digest, dtype="<u4").astype(np.float64)
    return (ints / 2.0**31 - 1.0).astype(np.float32)


def stub_provider(text: str, segmentation: Sequence[str], seed: int = 0) -> np.ndarray:
    """Embed each phrase of ``segmentation`` independently of ``text``.

    ``text`` is accepted for interface parity with a real language model, which
    would see the whole concatenated window.
    """
    if len(segmentation) == 0:
        raise ValueError("segmentation must contain at least one phrase")
    return np.stack([phrase_vector(p, seed) for p in segmentation])


@dataclass(frozen=True)
class StubProvider:
    seed: int = 0
    separator: str = " "

    def embed(self, sentences: Sequence[Sentence]) -> np.ndarray:
        text = self.separator.join(s.text for s in sentences)
        phrases = [p for s in sentences for p in s.phrases]
        return stub_provider(text, phrases, self.seed)


@dataclass(frozen=True)
class PrecomputedProvider:
    table: Mapping[str, PhraseEmbeddingSequence]

    def embed(self, sentences: Sequence[Sentence]) -> np.ndarray:
        rows = []
        for s in sentences:
            try:
                rows.append(self.table[s.sentence_id].embeddings)
            except KeyError:
                raise CompletenessError(f"no precomputed embeddings for {s.sentence_id}") from None
        return np.concatenate(rows, axis=0)


# -- phrase-embedding file ------------------------------------------------------

def write_phrase_embeddings(path: str | Path, records: Iterable[PhraseEmbeddingSequence],
                            extra_sidecar: Mapping | None = None) -> None:
    """Binary records of (id_len, id, rows, 768, float32 LE data) plus a JSON order sidecar."""
    chunks, order = [], []
    for rec in records:
        raw_id = rec.sentence_id.encode("utf-8")
        arr = np.ascontiguousarray(rec.embeddings, dtype="<f4")
        chunks += [_U32.pack(len(raw_id)), raw_id, _U32.pack(arr.shape[0]),
                   _U32.pack(arr.shape[1]), arr.tobytes()]
        order.append(rec.sentence_id)
    atomic_write_bytes(path, b"".join(chunks))
    sidecar = {"records": order, "dim": PHRASE_DIM}
    sidecar.update(extra_sidecar or {})
    atomic_write_json(Path(str(path) + ".json"), sidecar)


def read_phrase_embeddings(path: str | Path) -> dict[str, PhraseEmbeddingSequence]:
    data = Path(path).read_bytes()
    out: dict[str, PhraseEmbeddingSequence] = {}
    pos = 0
    while pos < len(data):
        try:
            (id_len,) = _U32.unpack_from(data, pos)
            sid = data[pos + 4:pos + 4 + id_len].decode("utf-8")
            pos += 4 + id_len
            rows, dim = _U32.unpack_from(data, pos)[0], _U32.unpack_from(data, pos + 4)[0]
            pos += 8
        except struct.error:
            raise FormatError("truncated phrase-embedding record header") from None
        if dim != PHRASE_DIM:
            raise FormatError(f"{sid}: embedding dim {dim} != {PHRASE_DIM}")
        nbytes = 4 * rows * dim
        if pos + nbytes > len(data):
            raise FormatError(f"{sid}: truncated embedding data")
        arr = np.frombuffer(data, dtype="<f4", count=rows * dim, offset=pos).reshape(rows, dim)
        pos += nbytes
        out[sid] = PhraseEmbeddingSequence(sid, arr.astype(np.float32))
    side = Path(str(path) + ".json")
    if side.exists():
        order = json.loads(side.read_text()).get("records")
        if order is not None and order != list(out):
            raise FormatError("record order does not match the JSON sidecar")
    return out


def load_precomputed_embeddings(path: str | Path,
                                sentences: Iterable[Sentence]) -> dict[str, PhraseEmbeddingSequence]:
    """Load the file and check it covers every manifest sentence with the right phrase count."""
    table = read_phrase_embeddings(path)
    out = {}
    for s in sentences:
        rec = table.get(s.sentence_id)
        if rec is None:
            raise CompletenessError(f"sentence {s.sentence_id} missing from {path}")
        if rec.embeddings.shape[0] != s.phrase_count:
            raise FormatError(
                f"{s.sentence_id}: {rec.embeddings.shape[0]} rows for {s.phrase_count} phrases")
        out[s.sentence_id] = rec
    return out
