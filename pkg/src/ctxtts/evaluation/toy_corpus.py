"""Synthetic lecture-like corpus in which each sentence's speaking style is a
linear function of the words in its +/-2 sentence neighbourhood.

Words carry a scalar "affect": the projection of their stub phrase embedding
onto a seeded direction. A sentence's affect is the mean over its words, and
its 3-d latent style (pitch offset, tempo, loudness) mixes the affects of the
sentences around it. Mel-like features are rendered procedurally from the
phonemes, the latent style and small seeded noise.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..context_window import (PHRASE_DIM, PhraseEmbeddingSequence, Sentence, phrase_vector,
                              write_phrase_embeddings)
from ..data import EMBEDDINGS_FILE
from ..reference_encoder import N_MELS
from ..tensorio import atomic_write_bytes, atomic_write_json, config_hash, save_tensors

INITIALS = ("b", "p", "m", "f", "d", "t", "n", "l", "g", "k", "h",
            "j", "q", "x", "zh", "ch", "sh", "r", "z", "c", "s")
FINALS = ("a", "o", "e", "i", "u", "v", "ai", "ei", "ao", "ou", "an", "en", "ang", "eng", "ong")
VOICELESS = frozenset({"p", "f", "t", "k", "h", "q", "x", "ch", "sh", "c", "s"})
BREAK_TAG = "#1"
CONTEXT_OFFSETS = (-2, -1, 0, 1, 2)

MANIFEST_FILE = "manifest.jsonl"
META_FILE = "corpus_meta.json"


@dataclass(frozen=True)
class ToyCorpusConfig:
    seed: int = 0
    n_documents: int = 12
    sentences_per_doc: int = 8
    test_documents: int = 2
    vocab_words: int = 48
    words_per_sentence: tuple[int, int] = (3, 4)
    style_noise: float = 0.1
    embedding_seed: int = 0


def affect_direction(seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 7919])
    u = rng.standard_normal(PHRASE_DIM)
    return u / np.linalg.norm(u)


def word_affect(word: str, direction: np.ndarray, embedding_seed: int = 0) -> float:
    # stub components are U(-1, 1) with variance 1/3; rescale to unit variance
    return float(phrase_vector(word, embedding_seed).astype(np.float64) @ direction * math.sqrt(3.0))


def sentence_affect(words, direction, embedding_seed: int = 0) -> float:
    return float(np.mean([word_affect(w, direction, embedding_seed) for w in words]))


def context_features(affects: list[float], position: int) -> np.ndarray:
    """Affect of the sentences at offsets -2..2 around ``position``; 0 outside the document."""
    out = np.zeros(len(CONTEXT_OFFSETS))
    for k, off in enumerate(CONTEXT_OFFSETS):
        p = position + off
        if 0 <= p < len(affects):
            out[k] = affects[p]
    return out


def _mixing_matrix(seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 104729])
    w = rng.normal(0.0, 1.0, size=(3, len(CONTEXT_OFFSETS)))
    w[:, 2] += 1.0  # the current sentence always matters
    return w


def _smooth_template(rng: np.random.Generator) -> np.ndarray:
    bins = np.arange(N_MELS)
    tpl = np.full(N_MELS, -4.0)
    for _ in range(3):
        centre, width, amp = rng.uniform(5, 75), rng.uniform(3, 10), rng.uniform(1.0, 2.5)
        tpl += amp * np.exp(-0.5 * ((bins - centre) / width) ** 2)
    return tpl


@dataclass
class _Inventory:
    phonemes: list[str]
    templates: dict[str, np.ndarray]
    base_duration: dict[str, float]
    base_energy: dict[str, float]
    tone: dict[str, float]
    words: list[tuple[str, list[str]]]


def _inventory(rng: np.random.Generator, n_words: int) -> _Inventory:
    phonemes = list(INITIALS) + list(FINALS) + [BREAK_TAG]
    templates = {p: _smooth_template(rng) for p in phonemes}
    templates[BREAK_TAG] = np.full(N_MELS, -5.0)
    base_duration = {p: (rng.uniform(2, 3.5) if p in INITIALS else rng.uniform(4, 6)) for p in phonemes}
    base_duration[BREAK_TAG] = 2.0
    base_energy = {p: (rng.uniform(2, 4) if p in INITIALS else rng.uniform(6, 10)) for p in phonemes}
    base_energy[BREAK_TAG] = 0.5
    tone = {p: rng.uniform(-20, 20) for p in FINALS}
    words, seen = [], set()
    while len(words) < n_words:
        syll = [(INITIALS[rng.integers(len(INITIALS))], FINALS[rng.integers(len(FINALS))])
                for _ in range(int(rng.integers(1, 3)))]
        spelled = "".join(i + f for i, f in syll)
        if spelled in seen:
            continue
        seen.add(spelled)
        words.append((spelled, [p for s in syll for p in s]))
    return _Inventory(phonemes, templates, base_duration, base_energy, tone, words)


def _is_voiced(p: str) -> bool:
    return p != BREAK_TAG and p not in VOICELESS


def _render(phonemes, latent, inv: _Inventory, rng: np.random.Generator):
    pitch_offset = 25.0 * latent[0]
    tempo = math.exp(0.2 * latent[1])
    gain = math.exp(0.3 * latent[2])
    durations = np.array([max(1, int(round(inv.base_duration[p] * tempo * rng.uniform(0.9, 1.1))))
                          for p in phonemes], dtype=np.int64)
    total = int(durations.sum())
    bins = np.arange(N_MELS)
    mel = np.empty((total, N_MELS))
    f0 = np.zeros(total)
    energy = np.empty(total)
    t = 0
    for k, (p, d) in enumerate(zip(phonemes, durations)):
        declination = -15.0 * k / max(1, len(phonemes) - 1)
        centre = 140.0 + inv.tone.get(p, 0.0) + pitch_offset + declination
        slope = rng.uniform(-2.0, 2.0)
        for s in range(d):
            e = inv.base_energy[p] * gain * (1.0 + 0.05 * math.sin(math.pi * (s + 0.5) / d))
            frame = inv.templates[p] + 0.8 * math.log(e)
            if _is_voiced(p):
                hz = max(60.0, centre + slope * (s - (d - 1) / 2))
                f0[t] = hz
                b = 8.0 + 24.0 * math.log2(hz / 80.0)
                frame = frame + 1.5 * np.exp(-0.5 * ((bins - b) / 2.5) ** 2) \
                    + 0.8 * np.exp(-0.5 * ((bins - 2 * b) / 3.5) ** 2)
            energy[t] = e
            mel[t] = frame
            t += 1
    mel += rng.normal(0.0, 0.03, size=mel.shape)
    bounds = np.concatenate([[0], np.cumsum(durations)])
    pitch = np.array([f0[a:b][f0[a:b] > 0].mean() if (f0[a:b] > 0).any() else 0.0
                      for a, b in zip(bounds[:-1], bounds[1:])])
    ph_energy = np.array([energy[a:b].mean() for a, b in zip(bounds[:-1], bounds[1:])])
    return {"mel": mel, "f0": f0, "energy": energy, "duration": durations.astype(np.float64),
            "pitch": pitch, "phoneme_energy": ph_energy}


def generate_toy_corpus(out_dir, config: ToyCorpusConfig = ToyCorpusConfig()) -> Path:
    """Write manifest, per-utterance features, stub phrase embeddings and metadata.

    Returns the manifest path. Output is byte-identical for a fixed config.
    """
    if config.n_documents < 1 or config.sentences_per_doc < 1:
        raise ValueError("need at least one document with one sentence")
    if not 0 <= config.test_documents < config.n_documents:
        raise ValueError("test_documents must leave at least one training document")
    lo, hi = config.words_per_sentence
    if not 1 <= lo <= hi:
        raise ValueError("words_per_sentence must be a (min, max) pair with min >= 1")
    out = Path(out_dir)
    rng = np.random.default_rng(config.seed)
    inv = _inventory(rng, config.vocab_words)
    direction = affect_direction(config.seed)
    mixing = _mixing_matrix(config.seed)

    docs = []
    for d in range(config.n_documents):
        doc = []
        for _ in range(config.sentences_per_doc):
            n = int(rng.integers(lo, hi + 1))
            doc.append([inv.words[int(i)] for i in rng.choice(len(inv.words), size=n, replace=False)])
        docs.append(doc)

    # normalise each latent dimension to roughly unit variance
    affects = [[sentence_affect([w for w, _ in s], direction, config.embedding_seed) for s in doc]
               for doc in docs]
    scale = np.sqrt((mixing ** 2).sum(axis=1) * np.var(np.concatenate(affects)))

    records, latents, embeddings = [], {}, []
    n_train_docs = config.n_documents - config.test_documents
    for d, doc in enumerate(docs):
        doc_id = f"doc{d:03d}"
        for i, words in enumerate(doc):
            uid = f"{doc_id}:{i}"
            feats = context_features(affects[d], i)
            latent = mixing @ feats / scale + rng.normal(0.0, config.style_noise, size=3)
            text, spans, phonemes = "", [], []
            for k, (w, ph) in enumerate(words):
                if k:
                    text += " "
                    phonemes.append(BREAK_TAG)
                spans.append([len(text), len(text) + len(w)])
                text += w
                phonemes.extend(ph)
            text += "."
            feat_rel = f"features/{doc_id}_{i:03d}.bin"
            save_tensors(out / feat_rel, _render(phonemes, latent, inv, rng))
            records.append({
                "utterance_id": uid,
                "document_id": doc_id,
                "index_in_document": i,
                "text": text,
                "phrase_spans": spans,
                "phoneme_sequence": phonemes,
                "audio_feature_paths": {"features": feat_rel},
                "split": "train" if d < n_train_docs else "test",
            })
            latents[uid] = latent.tolist()
            sentence = Sentence(doc_id, i, text, tuple(tuple(s) for s in spans))
            embeddings.append(PhraseEmbeddingSequence(
                uid, np.stack([phrase_vector(p, config.embedding_seed) for p in sentence.phrases])))

    manifest = out / MANIFEST_FILE
    atomic_write_bytes(manifest, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records).encode())
    write_phrase_embeddings(out / EMBEDDINGS_FILE, embeddings,
                            {"provider": "stub", "seed": config.embedding_seed})
    atomic_write_json(out / META_FILE, {
        "config": asdict(config),
        "config_hash": config_hash(asdict(config)),
        "affect_direction_seed": config.seed,
        "context_offsets": list(CONTEXT_OFFSETS),
        "latent_names": ["pitch_offset", "tempo", "loudness"],
        "latents": latents,
    })
    return manifest
