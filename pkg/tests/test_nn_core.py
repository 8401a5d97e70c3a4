import math

import numpy as np
import pytest
from scipy.signal import correlate2d

import kws.nn_core as nn
from kws.errors import DecodeError, ShapeMismatch, ZeroVector
from kws.nn_core import (
    Adam,
    BatchNorm2d,
    Conv2d,
    Linear,
    Module,
    Tensor,
    load_checkpoint,
    no_grad,
    save_checkpoint,
)
from tests.gradcheck import check_gradients


def away_from_zero(rng, shape):
    x = rng.standard_normal(shape)
    return x + 0.1 * np.sign(x)


# Each builder returns (fn, inputs) for a shape variant 0..4.

def conv_case(rng, v, dilation):
    n, c, f = 1 + v % 2, 1 + v % 3, 2 + v % 2
    h, w = (2 * dilation + 2 + v, dilation + 3 + 2 * v) if dilation <= 4 else (6 + v, 5 + v)
    return lambda x, k: nn.conv2d(x, k, (dilation, dilation)), [
        rng.standard_normal((n, c, h, w)),
        rng.standard_normal((f, c, 3, 3)),
    ]


def batchnorm_case(rng, v, training):
    c = 1 + v
    x = rng.standard_normal((2 + v % 2, c, 3, 2 + v))
    mean, var = rng.standard_normal(c), rng.uniform(0.5, 2.0, c)
    return lambda x, g, b: nn.batchnorm2d(x, g, b, mean.copy(), var.copy(), training), [
        x,
        rng.uniform(0.5, 1.5, c),
        rng.standard_normal(c),
    ]


def matrix_pair(rng, v):
    return rng.standard_normal((2 + v, 3 + v)), rng.standard_normal((1 + v, 3 + v))


CASES = {
    **{f"conv2d_d{d}": (lambda rng, v, d=d: conv_case(rng, v, d)) for d in (1, 2, 4, 8, 16)},
    "batchnorm_train": lambda rng, v: batchnorm_case(rng, v, True),
    "batchnorm_eval": lambda rng, v: batchnorm_case(rng, v, False),
    "relu": lambda rng, v: (nn.relu, [away_from_zero(rng, (2, v + 1, 3))]),
    "add": lambda rng, v: (nn.add, [rng.standard_normal((v + 1, 4))] * 2),
    "sub": lambda rng, v: (nn.sub, [rng.standard_normal((3, v + 2)), rng.standard_normal((3, v + 2))]),
    "add_constant": lambda rng, v: (lambda x: nn.add_constant(x, 0.7), [rng.standard_normal((v + 1, 2))]),
    "global_avg_pool2d": lambda rng, v: (nn.global_avg_pool2d, [rng.standard_normal((2, v + 1, 3, v + 2))]),
    "linear_bias": lambda rng, v: (
        nn.linear,
        [rng.standard_normal((v + 2, 4)), rng.standard_normal((v + 1, 4)), rng.standard_normal(v + 1)],
    ),
    "linear_no_bias": lambda rng, v: (nn.linear, [rng.standard_normal((3, v + 2)), rng.standard_normal((2, v + 2))]),
    "cosine_similarity": lambda rng, v: (nn.cosine_similarity, list(matrix_pair(rng, v))),
    "pairwise_distance": lambda rng, v: (nn.pairwise_distance, list(matrix_pair(rng, v))),
    "scale_shift": lambda rng, v: (
        nn.scale_shift,
        [rng.standard_normal((v + 2, 3)), rng.uniform(1, 5, (1,)), rng.standard_normal((1,))],
    ),
    "take_rows": lambda rng, v: (lambda x: nn.take_rows(x, [0, v + 1, 0, 1]), [rng.standard_normal((v + 2, 3))]),
    "concat_rows": lambda rng, v: (nn.concat_rows, [rng.standard_normal((v + 1, 3)), rng.standard_normal((2, 3))]),
    "group_mean": lambda rng, v: (
        lambda x: nn.group_mean(x, [[0, 1], list(range(v + 3)), [v + 2]]),
        [rng.standard_normal((v + 3, 4))],
    ),
    "transpose": lambda rng, v: (nn.transpose, [rng.standard_normal((v + 1, 3))]),
    "gather": lambda rng, v: (lambda x: nn.gather(x, [0, 1, 1, 0], [v, 0, v, v]), [rng.standard_normal((2, v + 1))]),
    "sum_all": lambda rng, v: (nn.sum_all, [rng.standard_normal((v + 1, 2, 2))]),
    "softmax_cross_entropy": lambda rng, v: (
        lambda z: nn.softmax_cross_entropy(
            z, [i % (v + 2) for i in range(v + 3)], mask=[i != 1 for i in range(v + 3)], normalizer=v + 3
        ),
        [rng.standard_normal((v + 3, v + 2))],
    ),
}


@pytest.mark.parametrize("variant", range(5))
@pytest.mark.parametrize("name", sorted(CASES))
def test_gradient_matches_central_differences(name, variant):
    rng = np.random.default_rng(1000 * variant + len(name))
    fn, inputs = CASES[name](rng, variant)
    check_gradients(fn, inputs, seed=variant)


def naive_conv(x, k, dh, dw):
    n, c, h, w = x.shape
    f = k.shape[0]
    out = np.zeros((n, f, h, w))
    for b in range(n):
        for o in range(f):
            for r in range(h):
                for s in range(w):
                    total = 0.0
                    for i in range(3):
                        for j in range(3):
                            rr, ss = r + (i - 1) * dh, s + (j - 1) * dw
                            if 0 <= rr < h and 0 <= ss < w:
                                total += (x[b, :, rr, ss] * k[o, :, i, j]).sum()
                    out[b, o, r, s] = total
    return out


@pytest.mark.parametrize("dilation", [(1, 1), (2, 2), (4, 4), (8, 8), (16, 16), (1, 2)])
def test_conv2d_matches_naive_loop(dilation):
    rng = np.random.default_rng(sum(dilation))
    x = rng.standard_normal((2, 3, 20, 18))
    k = rng.standard_normal((4, 3, 3, 3))
    got = nn.conv2d(Tensor(x), Tensor(k), dilation).values
    np.testing.assert_allclose(got, naive_conv(x, k, *dilation), atol=1e-10)


@pytest.mark.parametrize("dilation", [(2, 2), (4, 4), (3, 1)])
def test_dilated_conv2d_equals_zero_inserted_kernel(dilation):
    dh, dw = dilation
    rng = np.random.default_rng(dh * 10 + dw)
    x = rng.standard_normal((2, 3, 17, 15))
    k = rng.standard_normal((2, 3, 3, 3))
    sparse = np.zeros((2, 3, 2 * dh + 1, 2 * dw + 1))
    sparse[:, :, ::dh, ::dw] = k
    expected = np.array([
        [sum(correlate2d(x[b, c], sparse[o, c], mode="same") for c in range(3)) for o in range(2)]
        for b in range(2)
    ])
    got = nn.conv2d(Tensor(x), Tensor(k), dilation).values
    np.testing.assert_allclose(got, expected, atol=1e-10)


def test_conv2d_rejects_mismatched_kernel():
    with pytest.raises(ShapeMismatch):
        nn.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_batchnorm_updates_running_statistics():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 2, 3, 5)) * 3 + 1
    bn = BatchNorm2d(2, dtype=np.float64)
    out = bn(Tensor(x))
    count = 4 * 3 * 5
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * count / (count - 1))
    np.testing.assert_allclose(out.values.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)


def test_batchnorm_eval_uses_running_statistics():
    bn = BatchNorm2d(1, dtype=np.float64).eval()
    bn.running_mean[:] = 2.0
    bn.running_var[:] = 4.0
    x = np.full((1, 1, 2, 2), 6.0)
    np.testing.assert_allclose(bn(Tensor(x)).values, 4.0 / np.sqrt(4.0 + nn.BN_EPS))
    assert bn.running_mean[0] == 2.0


def test_cosine_of_zero_vector_is_floored(monkeypatch):
    a = Tensor(np.zeros((1, 3)), requires_grad=True)
    b = Tensor(np.ones((2, 3)))
    out = nn.cosine_similarity(a, b)
    np.testing.assert_array_equal(out.values, 0.0)
    nn.sum_all(out).backward()
    assert np.all(np.isfinite(a.grad))

    monkeypatch.setattr(nn, "DEBUG", True)
    with pytest.raises(ZeroVector):
        nn.cosine_similarity(a, b)


def test_no_grad_records_nothing():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with no_grad():
        y = nn.relu(x)
    assert not y.requires_grad
    assert nn.relu(x).requires_grad


def test_backward_without_gradient_needs_scalar():
    with pytest.raises(ShapeMismatch):
        nn.relu(Tensor(np.ones((2, 2)), requires_grad=True)).backward()


def test_gradients_accumulate_over_shared_inputs():
    x = Tensor(np.array([[1.0, -2.0]]), requires_grad=True)
    nn.sum_all(nn.add(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [[2.0, 2.0]])


class TwoLayer(Module):
    def __init__(self, rng):
        self.conv = Conv2d(1, 2, dilation=2, rng=rng)
        self.bn = BatchNorm2d(2)
        self.head = [Linear(2, 3, rng), Linear(3, 1, rng, bias=False)]


def test_module_collects_nested_names():
    model = TwoLayer(np.random.default_rng(0))
    assert [n for n, _ in model.named_parameters()] == [
        "conv.weight",
        "bn.gamma",
        "bn.beta",
        "head.0.weight",
        "head.0.bias",
        "head.1.weight",
    ]
    assert [n for n, _ in model.named_buffers()] == ["bn.running_mean", "bn.running_var"]
    assert model.parameter_count() == 18 + 4 + 9 + 3
    assert not any(m.training for m in model.eval().modules())


def test_checkpoint_round_trip(tmp_path):
    model = TwoLayer(np.random.default_rng(1))
    model.bn.running_var[:] = [2.0, 3.0]
    state = model.state_dict()
    state["objective.w"] = np.asarray(10.0, dtype=np.float32)
    save_checkpoint(tmp_path / "m.bin", state)
    loaded = load_checkpoint(tmp_path / "m.bin")
    assert list(loaded) == list(state)
    for name in state:
        np.testing.assert_array_equal(loaded[name], state[name])

    other = TwoLayer(np.random.default_rng(2))
    other.load_state_dict(loaded)
    np.testing.assert_array_equal(other.conv.weight.values, model.conv.weight.values)
    np.testing.assert_array_equal(other.bn.running_var, [2.0, 3.0])


def test_load_state_dict_reports_missing_keys():
    state = TwoLayer(np.random.default_rng(0)).state_dict()
    del state["head.0.bias"]
    with pytest.raises(ShapeMismatch, match="head.0.bias"):
        TwoLayer(np.random.default_rng(0)).load_state_dict(state)


def test_checkpoint_rejects_bad_magic_and_trailing_bytes(tmp_path):
    path = tmp_path / "m.bin"
    path.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(DecodeError):
        load_checkpoint(path)
    save_checkpoint(path, {"w": np.ones(2, dtype=np.float32)})
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(DecodeError):
        load_checkpoint(path)


def test_adam_first_step_moves_by_learning_rate():
    p = nn.Parameter(np.array([1.0, -1.0, 0.5]))
    p.grad = np.array([0.3, -2.0, 0.0])
    opt = Adam([p], lr=0.01)
    opt.step()
    np.testing.assert_allclose(p.values, [0.99, -0.99, 0.5], atol=1e-7)
    assert opt.state.step == 1


def test_adam_second_step_uses_bias_corrected_moments():
    p = nn.Parameter(np.array([1.0]))
    opt = Adam([p], lr=0.1)
    p.grad = np.array([1.0])
    opt.step()
    assert p.values[0] == pytest.approx(0.9, rel=1e-7)
    p.grad = np.array([-0.5])
    opt.step()

    m, v = 0.9 * 0.1 + 0.1 * -0.5, 0.999 * 0.001 + 0.001 * 0.25
    np.testing.assert_allclose(opt.state.first_moment[0], [m], rtol=1e-12)
    np.testing.assert_allclose(opt.state.second_moment[0], [v], rtol=1e-12)
    expected = 0.9 - 0.1 * (m / (1 - 0.9**2)) / math.sqrt(v / (1 - 0.999**2))
    assert p.values[0] == pytest.approx(expected, rel=1e-7)
    assert opt.state.step == 2


def test_adam_weight_decay_acts_without_gradient():
    p = nn.Parameter(np.array([2.0]))
    opt = Adam([p], lr=0.1, weight_decay=0.5)
    opt.step()
    assert p.values[0] == pytest.approx(1.9, abs=1e-6)

