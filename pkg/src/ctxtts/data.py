"""Dataset manifest (JSON lines), per-utterance features and corpus access."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .context_window import (DEFAULT_HALF_WIDTH, ContextWindow, EmbeddingProvider,
                             PrecomputedProvider, Sentence, StubProvider, build_window,
                             embed_window, load_precomputed_embeddings)
from .reference_encoder import N_MELS
from .tensorio import load_tensors

PAD_SYMBOL = "<pad>"
FEATURE_KEYS = ("mel", "f0", "energy", "duration", "pitch", "phoneme_energy")
EMBEDDINGS_FILE = "phrase_embeddings.bin"


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Utterance:
    utterance_id: str
    sentence: Sentence
    phonemes: tuple[str, ...]
    features_path: str
    split: str = "train"


@dataclass(frozen=True)
class UtteranceFeatures:
    mel: np.ndarray            # [T, 80]
    f0: np.ndarray             # [T] Hz, 0 = unvoiced
    energy: np.ndarray         # [T]
    duration: np.ndarray       # [M] frames
    pitch: np.ndarray          # [M] Hz, phoneme average
    phoneme_energy: np.ndarray  # [M]

    @classmethod
    def load(cls, path) -> "UtteranceFeatures":
        t = load_tensors(path)
        missing = [k for k in FEATURE_KEYS if k not in t]
        if missing:
            raise DataError(f"{path}: missing tensors {missing}")
        return cls(**{k: t[k] for k in FEATURE_KEYS})

    def as_dict(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in FEATURE_KEYS}


def read_manifest(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from None
    return records


def utterance_from_record(rec: dict) -> Utterance:
    try:
        sentence = Sentence(
            document_id=str(rec["document_id"]),
            index_in_document=int(rec["index_in_document"]),
            text=rec["text"],
            phrase_spans=tuple(tuple(s) for s in rec["phrase_spans"]),
        )
        return Utterance(
            utterance_id=rec.get("utterance_id", sentence.sentence_id),
            sentence=sentence,
            phonemes=tuple(rec["phoneme_sequence"]),
            features_path=rec["audio_feature_paths"]["features"],
            split=rec.get("split", "train"),
        )
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed manifest record {rec.get('utterance_id', '?')}: {exc!r}") from None


class Corpus:
    """In-memory view of a manifest; features are loaded lazily and cached."""

    def __init__(self, manifest_path, utterances: Iterable[Utterance]):
        self.manifest_path = Path(manifest_path)
        self.root = self.manifest_path.parent
        self.utterances = list(utterances)
        self._by_id = {u.utterance_id: u for u in self.utterances}
        if len(self._by_id) != len(self.utterances):
            raise DataError("duplicate utterance ids in manifest")
        docs: dict[str, list[Utterance]] = {}
        for u in self.utterances:
            docs.setdefault(u.sentence.document_id, []).append(u)
        self.documents = {d: sorted(us, key=lambda u: u.sentence.index_in_document)
                          for d, us in docs.items()}
        for d, us in self.documents.items():
            idx = [u.sentence.index_in_document for u in us]
            if len(set(idx)) != len(idx):
                raise DataError(f"document {d} repeats index_in_document")
        self._features: dict[str, UtteranceFeatures] = {}

    @classmethod
    def load(cls, manifest_path) -> "Corpus":
        return cls(manifest_path, [utterance_from_record(r) for r in read_manifest(manifest_path)])

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self) -> Iterator[Utterance]:
        return iter(self.utterances)

    def __contains__(self, uid: object) -> bool:
        return uid in self._by_id

    def __getitem__(self, uid: str) -> Utterance:
        try:
            return self._by_id[uid]
        except KeyError:
            raise DataError(f"unknown utterance {uid!r}") from None

    def split(self, name: str | None) -> list[Utterance]:
        if name in (None, "all"):
            return list(self.utterances)
        return [u for u in self.utterances if u.split == name]

    @cached_property
    def vocab(self) -> list[str]:
        return [PAD_SYMBOL] + sorted({p for u in self.utterances for p in u.phonemes})

    def features(self, uid: str) -> UtteranceFeatures:
        if uid not in self._features:
            path = self.root / self[uid].features_path
            if not path.exists():
                raise DataError(f"{uid}: feature file {path} not found")
            self._features[uid] = UtteranceFeatures.load(path)
        return self._features[uid]

    def sentences(self) -> list[Sentence]:
        return [u.sentence for u in self.utterances]

    def document_sentences(self, uid: str) -> tuple[list[Sentence], int]:
        u = self[uid]
        doc = self.documents[u.sentence.document_id]
        return [x.sentence for x in doc], [x.utterance_id for x in doc].index(uid)

    def window(self, uid: str, half_width: int = DEFAULT_HALF_WIDTH) -> ContextWindow:
        doc, pos = self.document_sentences(uid)
        return build_window(doc, pos, half_width)


def encode_phonemes(phonemes, vocab: list[str]) -> list[int]:
    table = {s: i for i, s in enumerate(vocab)}
    try:
        return [table[p] for p in phonemes]
    except KeyError as exc:
        raise DataError(f"phoneme {exc.args[0]!r} not in vocabulary") from None


def make_provider(corpus: Corpus, kind: str = "precomputed", path=None, seed: int = 0) -> EmbeddingProvider:
    if kind == "stub":
        return StubProvider(seed)
    if kind == "precomputed":
        path = Path(path) if path else corpus.root / EMBEDDINGS_FILE
        if not path.exists():
            raise FileNotFoundError(f"phrase embeddings not found at {path}")
        return PrecomputedProvider(load_precomputed_embeddings(path, corpus.sentences()))
    raise ValueError(f"unknown provider {kind!r}")


class WindowCache:
    """Embedded context windows keyed by (utterance, half-width)."""

    def __init__(self, corpus: Corpus, provider: EmbeddingProvider, half_width: int = DEFAULT_HALF_WIDTH):
        self.corpus, self.provider, self.half_width = corpus, provider, half_width
        self._cache: dict[str, ContextWindow] = {}

    def __call__(self, uid: str) -> ContextWindow:
        if uid not in self._cache:
            self._cache[uid] = embed_window(self.corpus.window(uid, self.half_width), self.provider)
        return self._cache[uid]


def validate_corpus(corpus: Corpus, embeddings_path=None) -> list[str]:
    """Every problem found, one message per line; empty list means valid."""
    errors: list[str] = []
    for u in corpus:
        uid = u.utterance_id
        if not u.phonemes:
            errors.append(f"{uid}: empty phoneme sequence")
        try:
            f = corpus.features(uid)
        except (DataError, OSError, ValueError) as exc:
            errors.append(f"{uid}: {exc}")
            continue
        T, M = f.mel.shape[0], len(u.phonemes)
        if f.mel.ndim != 2 or f.mel.shape[1] != N_MELS:
            errors.append(f"{uid}: mel shape {f.mel.shape}, expected [T x {N_MELS}]")
        if T < 1:
            errors.append(f"{uid}: mel has no frames")
        if f.f0.shape != (T,) or f.energy.shape != (T,):
            errors.append(f"{uid}: frame-level f0/energy length does not match {T} mel frames")
        for key in ("duration", "pitch", "phoneme_energy"):
            if getattr(f, key).shape != (M,):
                errors.append(f"{uid}: {key} has shape {getattr(f, key).shape}, expected ({M},)")
        if (f.duration < 0).any():
            errors.append(f"{uid}: negative duration")
        if int(round(float(f.duration.sum()))) != T:
            errors.append(f"{uid}: duration sum {int(f.duration.sum())} != mel frames {T}")
    if embeddings_path is not None:
        try:
            load_precomputed_embeddings(embeddings_path, corpus.sentences())
        except (KeyError, ValueError, OSError) as exc:
            errors.append(f"phrase embeddings: {exc}")
    return errors
