import numpy as np
import pytest

import hinflow.nncore as nn
from hinflow.errors import DimensionError, HinflowError
from hinflow.nncore import Tape, Tensor

from gradcheck import check_grads, rand_params


def test_backward_square():
    w = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = nn.mse(w, Tensor([0.0]))
    grads = tape.gradients(loss, {"w": w})
    assert np.allclose(grads["w"], [6.0])


def test_backward_unused_param_zero_grad():
    w = Tensor([3.0], requires_grad=True)
    u = Tensor([[1.0, 2.0]], requires_grad=True)
    with Tape() as tape:
        loss = nn.mse(w, Tensor([1.0]))
    grads = tape.gradients(loss, {"w": w, "u": u})
    assert np.array_equal(grads["u"], np.zeros((1, 2)))


def test_backward_requires_scalar():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        out = nn.add(w, w)
    with pytest.raises(DimensionError):
        tape.backward(out)


def test_backward_foreign_loss_rejected():
    w = Tensor([1.0], requires_grad=True)
    with Tape() as first:
        loss = nn.mean_all(w)
    assert first is not None
    with Tape() as other:
        nn.add(w, w)
    with pytest.raises(HinflowError):
        other.backward(loss)


def test_grad_two_layer_network_matches_finite_differences():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((4, 5))
    y = rng.standard_normal((4, 2))
    params = rand_params(rng, {"w1": (5, 8), "b1": (8,), "w2": (8, 2), "b2": (2,)})

    def loss():
        h = nn.gelu(nn.linear(Tensor(x), params["w1"], params["b1"]))
        out = nn.linear(h, params["w2"], params["b2"])
        return nn.mse(out, Tensor(y))

    check_grads(loss, params)


def test_grad_linear():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((3, 4))
    params = rand_params(rng, {"w": (4, 6), "b": (6,)})

    def loss():
        return nn.mean_all(nn.mul(nn.linear(Tensor(x), params["w"], params["b"]),
                                  nn.linear(Tensor(x), params["w"], params["b"])))

    check_grads(loss, params)


def test_grad_activation():
    rng = np.random.default_rng(12)
    params = rand_params(rng, {"w": (5, 5)})

    def loss():
        return nn.mse(nn.gelu(params["w"]), Tensor(np.zeros((5, 5))))

    check_grads(loss, params)


def test_grad_tanh():
    rng = np.random.default_rng(13)
    params = rand_params(rng, {"w": (4, 3)})

    def loss():
        return nn.mse(nn.tanh(params["w"]), Tensor(np.full((4, 3), 0.3)))

    check_grads(loss, params)


def test_grad_layer_norm():
    rng = np.random.default_rng(14)
    x = rng.standard_normal((6, 8))
    params = rand_params(rng, {"x": (6, 8), "g": (8,), "b": (8,)})

    def loss():
        return nn.mse(nn.layer_norm(params["x"], params["g"], params["b"]),
                      Tensor(x))

    check_grads(loss, params)


def test_grad_attention():
    rng = np.random.default_rng(15)
    y = rng.standard_normal((5, 4))
    params = rand_params(rng, {"q": (5, 4), "k": (5, 4), "v": (5, 4)})

    def loss():
        return nn.mse(nn.attention(params["q"], params["k"], params["v"]), Tensor(y))

    check_grads(loss, params)


def test_grad_batched_attention():
    rng = np.random.default_rng(16)
    y = rng.standard_normal((2, 4, 3))
    params = rand_params(rng, {"q": (2, 4, 3), "k": (2, 4, 3), "v": (2, 4, 3)})

    def loss():
        return nn.mse(nn.attention(params["q"], params["k"], params["v"]), Tensor(y))

    check_grads(loss, params)


def test_grad_concat_and_slice():
    rng = np.random.default_rng(17)
    params = rand_params(rng, {"a": (3, 4), "b": (2, 4)})

    def loss():
        joined = nn.concat([params["a"], params["b"]], axis=0)
        part = nn.narrow(joined, 0, 1, 3)
        return nn.mse(part, Tensor(np.zeros((3, 4))))

    check_grads(loss, params)


def test_grad_softmax():
    rng = np.random.default_rng(18)
    y = rng.standard_normal((4, 5))
    params = rand_params(rng, {"x": (4, 5)})

    def loss():
        return nn.mse(nn.softmax(params["x"]), Tensor(y))

    check_grads(loss, params)


def test_grad_cumsum():
    rng = np.random.default_rng(19)
    y = rng.standard_normal((3, 6))
    params = rand_params(rng, {"x": (3, 6)})

    def loss():
        return nn.mse(nn.cumsum(params["x"], axis=1), Tensor(y))

    check_grads(loss, params)


def test_grad_take_rows():
    rng = np.random.default_rng(20)
    idx = np.array([0, 2, 2, 1])
    params = rand_params(rng, {"table": (3, 5)})

    def loss():
        return nn.mse(nn.take_rows(params["table"], idx), Tensor(np.zeros((4, 5))))

    check_grads(loss, params)


def test_grad_reused_tensor_accumulates():
    rng = np.random.default_rng(21)
    params = rand_params(rng, {"w": (3, 3)})

    def loss():
        return nn.mean_all(nn.mul(params["w"], params["w"]))

    check_grads(loss, params)


def test_grad_attn_block():
    rng = np.random.default_rng(22)
    x = rng.standard_normal((2, 5, 8))
    y = rng.standard_normal((2, 5, 8))
    params = {f"blk.{k}": v for k, v in nn.attn_block_params(rng, 8, with_mlp=True).items()}

    def loss():
        return nn.mse(nn.attn_block(Tensor(x), params, "blk"), Tensor(y))

    check_grads(loss, params, rtol=2e-4)
