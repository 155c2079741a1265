import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from ctxtts.tensorio import (FormatError, config_hash, decode_tensors, encode_tensors, load_module_state,
                             load_sidecar, load_tensors, save_module, save_tensors)

arrays = hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, min_side=0, max_side=4),
                    elements=st.floats(-1e6, 1e6, width=32))


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=8), arrays, max_size=4))
def test_roundtrip(tensors):
    back = decode_tensors(encode_tensors(tensors))
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].shape == v.shape
        np.testing.assert_array_equal(back[k], v)


def test_header_layout():
    raw = encode_tensors({"ab": np.array([[1.0, 2.0]], dtype=np.float32)})
    assert raw[:4] == (2).to_bytes(4, "little") and raw[4:6] == b"ab"
    assert raw[6:10] == (2).to_bytes(4, "little")
    assert np.frombuffer(raw[-8:], "<f4").tolist() == [1.0, 2.0]


@pytest.mark.parametrize("cut", [1, 5, 9, 15])
def test_truncation_detected(cut):
    raw = encode_tensors({"x": np.zeros((2, 2), np.float32)})
    with pytest.raises(FormatError):
        decode_tensors(raw[:-cut])


def test_save_writes_sidecar_and_no_temp_files(tmp_path):
    path = tmp_path / "t.bin"
    save_tensors(path, {"a": np.ones(3)}, {"seed": 4})
    assert load_sidecar(path) == {"seed": 4}
    np.testing.assert_array_equal(load_tensors(path)["a"], np.ones(3))
    assert sorted(p.name for p in tmp_path.iterdir()) == ["t.bin", "t.bin.json"]


def test_module_roundtrip_and_shape_check(tmp_path):
    m = torch.nn.Sequential(torch.nn.Linear(3, 2), torch.nn.BatchNorm1d(2))
    save_module(tmp_path / "m.bin", m, {})
    m2 = torch.nn.Sequential(torch.nn.Linear(3, 2), torch.nn.BatchNorm1d(2))
    load_module_state(tmp_path / "m.bin", m2)
    for (k, a), b in zip(m.state_dict().items(), m2.state_dict().values()):
        assert torch.equal(a, b) and a.dtype == b.dtype, k
    with pytest.raises(FormatError):
        load_module_state(tmp_path / "m.bin", torch.nn.Sequential(torch.nn.Linear(3, 3)))


def test_config_hash_is_key_order_free():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
