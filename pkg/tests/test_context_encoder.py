import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from ctxtts.context_encoder import (ContextEncoderConfig, HierarchicalContextEncoder,
                                    PlainContextEncoder, inter_phrase_encode, inter_sentence_encode,
                                    plain_encode, predict_style, sinusoid_table)
from ctxtts.context_window import PHRASE_DIM, StubProvider, build_window, embed_window
from test_context_window import make_doc


def np_params(module, prefix):
    return {k[len(prefix):]: v.detach().double().numpy()
            for k, v in module.state_dict().items() if k.startswith(prefix)}


def oracle_phrase(enc, phrases):
    p = np_params(enc.phrase_level, "bigru.")
    h = oracles.bigru(phrases, p)
    att = enc.phrase_level.attention
    return oracles.attention(h, att.w_k.weight.detach().double().numpy(),
                             att.w_v.weight.detach().double().numpy(),
                             att.query.detach().double().numpy())


def oracle_sentence(enc, sents):
    p = np_params(enc.sentence_level, "bigru.")
    h = oracles.bigru(sents, p) + oracles.positional(len(sents), sents.shape[1])
    att = enc.sentence_level.attention
    return oracles.attention(h, att.w_k.weight.detach().double().numpy(),
                             att.w_v.weight.detach().double().numpy(),
                             att.query.detach().double().numpy())


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


@pytest.fixture
def encoder():
    torch.manual_seed(7)
    return HierarchicalContextEncoder().double().eval()


def test_singleton_phrase_weight_is_one(encoder):
    x = np.random.default_rng(0).normal(size=(1, PHRASE_DIM))
    out, w = inter_phrase_encode(x, encoder.phrase_level)
    assert w.tolist() == [1.0]
    h = encoder.phrase_level.bigru(torch.from_numpy(x)[None])[0][0]
    v = encoder.phrase_level.attention.w_v(h)
    torch.testing.assert_close(out, v[0])


def test_equal_keys_give_uniform_weights(encoder):
    with torch.no_grad():
        encoder.phrase_level.attention.w_k.weight.zero_()
    x = np.random.default_rng(1).normal(size=(4, PHRASE_DIM))
    _, w = inter_phrase_encode(x, encoder.phrase_level)
    torch.testing.assert_close(w, torch.full((4,), 0.25, dtype=torch.float64))


def test_phrase_level_matches_oracle(encoder):
    x = np.random.default_rng(2).normal(size=(3, PHRASE_DIM))
    out, w = inter_phrase_encode(x, encoder.phrase_level)
    ref, ref_w = oracle_phrase(encoder, x)
    assert rel_err(out.detach().numpy(), ref) < 1e-6
    assert rel_err(w.detach().numpy(), ref_w) < 1e-6


def test_positional_table_closed_form():
    pe = sinusoid_table(16, 256)
    assert torch.all(pe[0, 0::2] == 0) and torch.all(pe[0, 1::2] == 1)
    np.testing.assert_allclose(pe.numpy(), oracles.positional(16, 256), atol=1e-12)
    assert pe[3, 10].item() == pytest.approx(np.sin(3 / 10000 ** (10 / 256)))


def test_single_sentence_level(encoder):
    s = np.random.default_rng(3).normal(size=(1, 256))
    out, w = inter_sentence_encode(s, encoder.sentence_level)
    assert w.tolist() == [1.0]
    ref, _ = oracle_sentence(encoder, s)
    assert rel_err(out.detach().numpy(), ref) < 1e-6


def test_sentence_level_matches_oracle(encoder):
    s = np.random.default_rng(4).normal(size=(5, 256))
    out, w = inter_sentence_encode(s, encoder.sentence_level)
    ref, ref_w = oracle_sentence(encoder, s)
    assert rel_err(out.detach().numpy(), ref) < 1e-6
    assert rel_err(w.detach().numpy(), ref_w) < 1e-6


def test_sentence_capacity(encoder):
    with pytest.raises(ValueError):
        inter_sentence_encode(np.zeros((17, 256)), encoder.sentence_level)


def test_empty_phrase_input(encoder):
    with pytest.raises(ValueError):
        inter_phrase_encode(np.zeros((0, PHRASE_DIM)), encoder.phrase_level)


def embedded(doc, center, L=2):
    return embed_window(build_window(doc, center, L), StubProvider(seed=11))


def test_predict_style_single_phrase_window(encoder):
    doc = make_doc(1, counts=[1])
    w = embedded(doc, 0)
    style = predict_style(w, encoder).detach().numpy()
    s, _ = oracle_phrase(encoder, w.matrices()[0].astype(np.float64))
    ref, _ = oracle_sentence(encoder, s[None])
    assert rel_err(style, ref) < 1e-6


def test_predict_style_full_window(encoder):
    doc = make_doc(7, counts=[1, 2, 3, 2, 1, 4, 2])
    w = embedded(doc, 3)
    assert len(w.sentences) == 5
    style, weights = encoder([[torch.from_numpy(m).double() for m in w.matrices()]], return_weights=True)
    assert style.shape == (1, 256)
    assert weights["sentence"].shape == (1, 5)
    sents = np.stack([oracle_phrase(encoder, m.astype(np.float64))[0] for m in w.matrices()])
    ref, _ = oracle_sentence(encoder, sents)
    assert rel_err(style[0].detach().numpy(), ref) < 1e-6


def test_future_order_matters(encoder):
    doc = make_doc(5, counts=[2, 2, 2, 3, 1])
    w = embedded(doc, 2)
    mats = [torch.from_numpy(m).double() for m in w.matrices()]
    swapped = mats[:3] + [mats[4], mats[3]]
    a, b = encoder([mats]), encoder([swapped])
    assert (a - b).abs().max() > 1e-6


def test_batched_equals_per_window(encoder):
    doc = make_doc(9, counts=[1, 3, 2, 4, 1, 2, 5, 1, 2])
    windows = [embedded(doc, c) for c in range(9)]
    batch = encoder([[torch.from_numpy(m).double() for m in w.matrices()] for w in windows])
    for i, w in enumerate(windows):
        single = predict_style(w, encoder)
        assert (batch[i] - single).abs().max() < 1e-5


def test_query_scaling_scales_logits(encoder):
    att = encoder.phrase_level.attention
    h = torch.randn(5, 256, dtype=torch.float64)
    base = att.logits(h)
    with torch.no_grad():
        att.query.mul_(2.5)
    torch.testing.assert_close(att.logits(h), 2.5 * base)
    assert base.dtype == torch.float64
    torch.testing.assert_close(base, att.w_k(h) @ (att.query / 2.5) / 16.0)


@given(n=st.integers(1, 8), seed=st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_attention_weights_normalised(n, seed):
    torch.manual_seed(seed)
    enc = HierarchicalContextEncoder()
    x = torch.randn(n, PHRASE_DIM) * 3
    with torch.no_grad():
        _, w = inter_phrase_encode(x, enc.phrase_level)
    assert (w >= 0).all()
    assert abs(float(w.sum()) - 1.0) < 1e-6


def test_plain_encoder_single_phrase_closed_form():
    torch.manual_seed(3)
    enc = PlainContextEncoder().double()
    doc = make_doc(1, counts=[1])
    w = embedded(doc, 0)
    out = plain_encode(w, enc).detach().numpy()
    p = np_params(enc, "gru.")
    x = w.matrices()[0][0].astype(np.float64)
    ref = oracles.gru_cell(x, np.zeros(256), p["weight_ih_l0"], p["weight_hh_l0"], p["bias_ih_l0"], p["bias_hh_l0"])
    np.testing.assert_allclose(out, ref, rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("center", [0, 2, 4])
def test_plain_encoder_shape(center):
    enc = PlainContextEncoder()
    w = embedded(make_doc(5, counts=[1, 2, 3, 2, 2]), center)
    assert plain_encode(w, enc).shape == (256,)


def test_plain_matches_gru_over_concatenation():
    torch.manual_seed(5)
    enc = PlainContextEncoder().double()
    w = embedded(make_doc(4, counts=[2, 1, 3, 1]), 1)
    seq = np.concatenate(w.matrices()).astype(np.float64)
    p = np_params(enc, "gru.")
    _, ref = oracles.gru(seq, p["weight_ih_l0"], p["weight_hh_l0"], p["bias_ih_l0"], p["bias_hh_l0"])
    np.testing.assert_allclose(plain_encode(w, enc).detach().numpy(), ref, rtol=1e-8, atol=1e-10)


def test_query_init_range():
    enc = HierarchicalContextEncoder()
    for q in (enc.phrase_level.attention.query, enc.sentence_level.attention.query):
        assert q.abs().max() <= 0.1 and q.shape == (256,)


def context_gradient_error():
    torch.manual_seed(21)
    enc = HierarchicalContextEncoder(ContextEncoderConfig()).double()
    rng = np.random.default_rng(21)
    mats = [torch.from_numpy(rng.normal(size=(3, PHRASE_DIM))), torch.from_numpy(rng.normal(size=(3, PHRASE_DIM)))]
    target = torch.from_numpy(rng.uniform(-0.5, 0.5, size=256))
    names = {
        "Q_p": enc.phrase_level.attention.query,
        "W_k(phrase)": enc.phrase_level.attention.w_k.weight,
        "W_v(phrase)": enc.phrase_level.attention.w_v.weight,
        "Q_s": enc.sentence_level.attention.query,
        "W_k(sentence)": enc.sentence_level.attention.w_k.weight,
        "W_v(sentence)": enc.sentence_level.attention.w_v.weight,
        "bigru(phrase).w_ih": enc.phrase_level.bigru.weight_ih_l0,
        "bigru(phrase).w_hh_rev": enc.phrase_level.bigru.weight_hh_l0_reverse,
        "bigru(sentence).w_ih": enc.sentence_level.bigru.weight_ih_l0,
        "bigru(sentence).b_hh_rev": enc.sentence_level.bigru.bias_hh_l0_reverse,
    }
    loss = lambda: ((enc([mats])[0] - target) ** 2).mean()
    return oracles.sampled_gradient_error(loss, names, n_samples=8)


def test_context_encoder_gradients():
    worst, per = context_gradient_error()
    assert worst < 1e-3, per
