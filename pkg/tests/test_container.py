import numpy as np
import pytest

from hinflow.container import read_container, write_container
from hinflow.errors import DataError
from hinflow.nncore import Tensor, load_checkpoint, save_checkpoint


def test_container_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "a": rng.standard_normal((4, 7)),
        "b": rng.standard_normal((2, 3, 5)),
        "scalarish": np.array([1e-300, np.pi, -0.0]),
    }
    path = tmp_path / "roundtrip.hfc"
    write_container(path, {"kind": "test", "note": "x"}, arrays)
    header, back = read_container(path)
    assert header["kind"] == "test"
    for name, a in arrays.items():
        assert back[name].shape == a.shape
        assert np.array_equal(back[name], a)
        assert back[name].tobytes() == a.astype("<f8").tobytes()


def test_container_truncation_detected(tmp_path):
    path = tmp_path / "trunc.hfc"
    write_container(path, {}, {"a": np.ones((8, 8))})
    raw = path.read_bytes()
    path.write_bytes(raw[:-16])
    with pytest.raises(DataError):
        read_container(path)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    params = {
        "head.w": Tensor(rng.standard_normal((8, 2)), requires_grad=True),
        "head.b": Tensor(np.zeros(2), requires_grad=True),
    }
    path = tmp_path / "model.hfc"
    save_checkpoint(path, "planner", params, {"width": 8}, rng_state={"state": 123})
    kind, loaded, hyper, rng_state = load_checkpoint(path)
    assert kind == "planner"
    assert hyper == {"width": 8}
    assert rng_state == {"state": 123}
    for name in params:
        assert np.array_equal(loaded[name].data, params[name].data)
        assert loaded[name].requires_grad


def test_checkpoint_rewrite_is_byte_identical(tmp_path):
    rng = np.random.default_rng(2)
    params = {"w": Tensor(rng.standard_normal((5, 5)), requires_grad=True)}
    p1, p2 = tmp_path / "a.hfc", tmp_path / "b.hfc"
    save_checkpoint(p1, "policy", params, {"k": 5}, None)
    save_checkpoint(p2, "policy", params, {"k": 5}, None)
    assert p1.read_bytes() == p2.read_bytes()
