import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from ctxtts.acoustic_model import (AcousticConfig, AcousticModel, DegenerateOutputError,
                                   VarianceTargets, compute_losses, length_regulate, model_losses,
                                   round_durations, synthesize)


def small_model(**kw):
    torch.manual_seed(kw.pop("seed", 0))
    cfg = dict(vocab_size=12, pitch_stats=(120.0, 40.0), energy_stats=(5.0, 3.0))
    cfg.update(kw)
    return AcousticModel(AcousticConfig(**cfg)).eval()


def test_length_regulate_identity():
    x = torch.arange(6.0).reshape(3, 2)
    assert torch.equal(length_regulate(x, [1, 1, 1]), x)


def test_length_regulate_drop_and_repeat():
    x = torch.tensor([[1.0], [2.0]])
    assert length_regulate(x, [0, 2]).tolist() == [[2.0], [2.0]]


def test_length_regulate_zero_total():
    with pytest.raises(DegenerateOutputError):
        length_regulate(torch.ones(3, 2), [0, 0, 0])


def test_length_regulate_negative():
    with pytest.raises(ValueError):
        length_regulate(torch.ones(2, 2), [1, -1])


@given(st.lists(st.integers(0, 6), min_size=1, max_size=8).filter(lambda d: sum(d) > 0),
       st.integers(1, 4))
@settings(max_examples=50, deadline=None)
def test_length_regulate_matches_naive(durations, dim):
    x = torch.randn(len(durations), dim)
    naive = [x[m] for m, d in enumerate(durations) for _ in range(d)]
    out = length_regulate(x, durations)
    assert out.shape[0] == sum(durations)
    assert torch.equal(out, torch.stack(naive))


def test_round_durations_half_up_and_floor():
    d = torch.tensor([[2.5, 0.5, 0.0, -3.0]])
    log_d = torch.log1p(d.clamp(min=-0.999))
    out = round_durations(log_d, torch.ones(1, 4, dtype=torch.bool))
    assert out.tolist() == [[3, 1, 0, 0]]


def test_round_durations_keeps_one_frame():
    log_d = torch.tensor([[-5.0, -1.0, -4.0]])
    out = round_durations(log_d, torch.ones(1, 3, dtype=torch.bool))
    assert out.tolist() == [[0, 1, 0]]


def test_predicted_durations_set_frame_count():
    m = small_model()
    mel, pred = synthesize(m, [3, 4, 5], torch.randn(256), duration_override=[2, 3, 1])
    assert mel.shape == (6, 80)
    assert pred["duration"].tolist() == [2, 3, 1]


def test_teacher_durations_set_frame_count():
    m = small_model()
    dur = np.array([4, 1, 3, 2])
    mel, _ = synthesize(m, [1, 2, 3, 4], torch.zeros(256),
                        teacher=VarianceTargets(dur, np.full(4, 130.0), np.full(4, 4.0)))
    assert mel.shape == (10, 80)


def test_inference_path_without_teacher():
    m = small_model()
    mel, pred = synthesize(m, [1, 5, 7, 2], torch.randn(256))
    assert mel.shape[0] == pred["duration"].sum() >= 1
    assert pred["pitch"].shape == (4,)


def test_style_shape_checked():
    m = small_model()
    with pytest.raises(ValueError):
        synthesize(m, [1, 2], torch.zeros(128))
    with pytest.raises(ValueError):
        synthesize(m, [], torch.zeros(256))


def test_style_changes_variance_predictions():
    m = small_model()
    ids = torch.tensor([[1, 4, 6, 2, 9]])
    lengths = torch.tensor([5])
    d = torch.tensor([[2, 2, 2, 2, 2]])
    out0 = m(ids, lengths, torch.zeros(1, 256), duration_override=d)
    out1 = m(ids, lengths, torch.randn(1, 256), duration_override=d)
    assert (out0.log_duration - out1.log_duration).abs().max() > 1e-6
    assert (out0.pitch - out1.pitch).abs().max() > 1e-6


def test_style_broadcast_is_position_independent():
    m = small_model()
    M = 15
    mask = torch.ones(1, M, dtype=torch.bool)
    style = torch.randn(1, 256)
    _, _, log_d, pitch, energy, _ = m.variance_adaptor(torch.zeros(1, M, 256), style, mask,
                                                         duration_override=torch.ones(1, M))
    # two k=3 convolutions see zero padding within 2 positions of either edge
    interior = slice(2, M - 2)
    for pred in (log_d, pitch):
        vals = pred[0, interior]
        assert torch.allclose(vals, vals[0].expand_as(vals), atol=1e-6)
    # energy also sees the pitch embedding (k=3) of the edge-affected pitch values
    e = energy[0, 5:M - 5]
    assert torch.allclose(e, e[0].expand_as(e), atol=1e-6)


def test_compute_losses_zero_when_equal():
    mel = torch.randn(1, 7, 80)
    d = torch.tensor([[3, 4]])
    p = torch.tensor([[0.3, -0.2]])
    e = torch.tensor([[1.0, 2.0]])
    b = compute_losses(mel, mel, torch.log1p(d.float()), p, e, d, p, e)
    assert b.as_dict() == {"mel": 0.0, "duration": 0.0, "pitch": 0.0, "energy": 0.0, "total": 0.0}


def test_compute_losses_mel_offset_one():
    mel = torch.randn(1, 5, 80)
    d = torch.tensor([[2, 3]])
    z = torch.zeros(1, 2)
    b = compute_losses(mel + 1, mel, torch.log1p(d.float()), z, z, d, z, z)
    assert float(b.mel) == pytest.approx(1.0)


def test_compute_losses_hand_computed():
    pred_mel = torch.tensor([[[0.5] * 80, [1.0] * 80, [0.0] * 80]])
    gt_mel = torch.tensor([[[0.0] * 80, [2.0] * 80, [0.0] * 80]])
    pred_logd = torch.tensor([[math.log(2.0), 0.0]])
    gt_d = torch.tensor([[2, 1]])
    pred_p, gt_p = torch.tensor([[1.0, 2.0]]), torch.tensor([[0.0, 4.0]])
    pred_e, gt_e = torch.tensor([[0.5, 0.5]]), torch.tensor([[0.0, 1.5]])
    b = compute_losses(pred_mel, gt_mel, pred_logd, pred_p, pred_e, gt_d, gt_p, gt_e)
    assert float(b.mel) == pytest.approx((0.5 + 1.0 + 0.0) / 3)
    expected_dur = ((math.log(2) - math.log(3)) ** 2 + (0 - math.log(2)) ** 2) / 2
    assert float(b.duration) == pytest.approx(expected_dur)
    assert float(b.pitch) == pytest.approx((1 + 4) / 2)
    assert float(b.energy) == pytest.approx((0.25 + 1.0) / 2)
    assert float(b.total) == pytest.approx(float(b.mel) + expected_dur + 2.5 + 0.625)


def test_compute_losses_frame_mismatch():
    with pytest.raises(ValueError):
        z = torch.zeros(1, 2)
        compute_losses(torch.zeros(1, 4, 80), torch.zeros(1, 5, 80), z, z, z, z.long(), z, z)


def test_batched_training_forward_masks_padding():
    m = small_model()
    ids = torch.tensor([[1, 2, 3], [4, 5, 0]])
    lengths = torch.tensor([3, 2])
    tg = VarianceTargets(torch.tensor([[2, 1, 2], [3, 1, 0]]),
                         torch.tensor([[100.0, 0.0, 150.0], [120.0, 130.0, 0.0]]),
                         torch.tensor([[4.0, 2.0, 6.0], [5.0, 5.0, 0.0]]))
    out = m(ids, lengths, torch.randn(2, 256), tg)
    assert out.mel.shape == (2, 5, 80)
    assert out.mel_lengths.tolist() == [5, 4]
    assert out.mel[1, 4].abs().max() == 0
    single = m(ids[1:, :2], lengths[1:], torch.zeros(1, 256) + 0, VarianceTargets(*(t[1:, :2] for t in tg)))
    assert single.mel.shape == (1, 4, 80)
    loss = model_losses(m, out, torch.zeros(2, 5, 80), tg)
    assert torch.isfinite(loss.total)


def acoustic_style_gradient_error():
    m = small_model(seed=3).double()
    ids = torch.tensor([[2, 7]])
    tg = VarianceTargets(torch.tensor([[2, 3]]), torch.tensor([[130.0, 95.0]], dtype=torch.float64),
                         torch.tensor([[4.0, 7.0]], dtype=torch.float64))
    gt_mel = torch.randn(1, 5, 80, dtype=torch.float64)
    style = torch.randn(1, 256, dtype=torch.float64, requires_grad=True)

    def loss():
        out = m(ids, torch.tensor([2]), style, tg)
        return model_losses(m, out, gt_mel, tg).total

    return oracles.sampled_gradient_error(loss, {"style": style}, n_samples=40)


def test_acoustic_gradient_wrt_style():
    worst, per = acoustic_style_gradient_error()
    assert worst < 1e-3, per
