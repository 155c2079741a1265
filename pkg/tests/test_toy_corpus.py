import json

import numpy as np
import pytest

from ctxtts.data import Corpus, validate_corpus
from ctxtts.evaluation.toy_corpus import (ToyCorpusConfig, affect_direction, context_features,
                                          generate_toy_corpus, sentence_affect)


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_byte_identical_for_fixed_seed(tmp_path):
    cfg = ToyCorpusConfig(seed=9, n_documents=2, sentences_per_doc=3, test_documents=1)
    generate_toy_corpus(tmp_path / "a", cfg)
    generate_toy_corpus(tmp_path / "b", cfg)
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    generate_toy_corpus(tmp_path / "c", ToyCorpusConfig(seed=10, n_documents=2, sentences_per_doc=3,
                                                        test_documents=1))
    assert tree_bytes(tmp_path / "a") != tree_bytes(tmp_path / "c")


def test_generated_corpus_validates(toy_manifest):
    corpus = Corpus.load(toy_manifest)
    assert validate_corpus(corpus, toy_manifest.parent / "phrase_embeddings.bin") == []
    for u in corpus:
        f = corpus.features(u.utterance_id)
        assert int(f.duration.sum()) == f.mel.shape[0]
        assert f.mel.shape[1] == 80
        assert (f.duration >= 1).all()
    assert {u.split for u in corpus} == {"train", "test"}


def test_context_features_zero_outside_document():
    np.testing.assert_array_equal(context_features([1.0, 2.0], 0), [0, 0, 1, 2, 0])


def test_latent_is_linear_in_context(tmp_path):
    """Least squares from the 5 context affects to each latent dimension recovers R^2 > 0.9."""
    cfg = ToyCorpusConfig(seed=0)
    manifest = generate_toy_corpus(tmp_path, cfg)
    meta = json.loads((tmp_path / "corpus_meta.json").read_text())
    corpus = Corpus.load(manifest)
    direction = affect_direction(meta["affect_direction_seed"])
    X, Y = [], []
    for doc in corpus.documents.values():
        affects = [sentence_affect(u.sentence.text.rstrip(".").split(), direction, cfg.embedding_seed)
                   for u in doc]
        for pos, u in enumerate(doc):
            X.append(np.append(context_features(affects, pos), 1.0))
            Y.append(meta["latents"][u.utterance_id])
    X, Y = np.array(X), np.array(Y)
    coef, *_ = np.linalg.lstsq(X, Y, rcond=None)
    resid = Y - X @ coef
    r2 = 1 - (resid ** 2).sum(0) / ((Y - Y.mean(0)) ** 2).sum(0)
    assert (r2 > 0.9).all(), r2


@pytest.mark.parametrize("kw", [dict(n_documents=0), dict(test_documents=3, n_documents=3),
                                dict(words_per_sentence=(0, 2))])
def test_argument_validation(tmp_path, kw):
    with pytest.raises(ValueError):
        generate_toy_corpus(tmp_path, ToyCorpusConfig(**kw))
