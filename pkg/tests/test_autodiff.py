import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advrestore.autodiff import Parameter, Tensor, backward, grad, kernels, nn, ops, optim
from advrestore.autodiff import _pykernels
from tests.gradcheck import max_gradient_error
from tests.oracles import conv2d_loop, rel_err


def check_gradients(build, arrays, n_coords=6, seed=0, tol=1e-5):
    """Compare analytic gradients of ``build(*tensors)`` with central differences."""
    worst = max_gradient_error(build, arrays, n_coords, seed)
    assert worst <= tol, worst


OP_CASES = {
    "add": ([(2, 3), (2, 3)], lambda a, b: ops.add(a, b)),
    "sub": ([(2, 3), (2, 3)], lambda a, b: ops.sub(a, b)),
    "mul": ([(2, 3), (2, 3)], lambda a, b: ops.mul(a, b)),
    "scale": ([(4,)], lambda a: ops.scale(a, -1.7)),
    "add_scalar": ([(4,)], lambda a: ops.add_scalar(a, 0.3)),
    "square": ([(5,)], lambda a: ops.square(a)),
    "matmul": ([(3, 4), (4, 2)], lambda a, b: ops.matmul(a, b)),
    "conv2d": ([(2, 3, 6, 6), (4, 3, 3, 3)], lambda x, w: ops.conv2d(x, w, 1, 1)),
    "conv2d_stride2": ([(2, 2, 8, 8), (3, 2, 3, 3)], lambda x, w: ops.conv2d(x, w, 2, 1)),
    "conv_transpose2d": ([(2, 3, 4, 4), (3, 2, 4, 4)], lambda x, w: ops.conv_transpose2d(x, w, 2, 1)),
    "add_bias": ([(2, 3, 4, 4), (3,)], lambda x, b: ops.add_bias(x, b)),
    "add_bias_per_sample": ([(2, 3, 4, 4), (2, 3)], lambda x, b: ops.add_bias(x, b)),
    "concat": ([(2, 2, 3, 3), (2, 3, 3, 3)], lambda a, b: ops.concat([a, b], axis=1)),
    "silu": ([(3, 4)], lambda a: ops.silu(a)),
    "sigmoid": ([(3, 4)], lambda a: ops.sigmoid(a)),
    "group_norm": ([(2, 4, 3, 3), (4,), (4,)], lambda x, g, b: ops.group_norm(x, g, b, 2)),
    "upsample": ([(2, 2, 3, 3)], lambda a: ops.upsample_nearest(a, 2)),
    "downsample": ([(2, 2, 4, 4)], lambda a: ops.downsample_nearest(a, 2)),
    "reshape": ([(2, 6)], lambda a: ops.reshape(a, (3, 4))),
    "transpose": ([(2, 5)], lambda a: ops.transpose(a)),
    "l2_normalize": ([(3, 5)], lambda a: ops.l2_normalize(a)),
    "sum_axis": ([(3, 5)], lambda a: ops.sum(a, axis=1)),
    "clamp": ([(4, 4)], lambda a: ops.clamp(a, -0.5, 0.5)),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name):
    shapes, fn = OP_CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    arrays = [rng.normal(size=s) for s in shapes]
    if name == "clamp":
        # keep coordinates away from the kinks
        arrays[0] = np.where(np.abs(np.abs(arrays[0]) - 0.5) < 0.05, 0.2, arrays[0])
    w = np.random.default_rng(1)
    probe = None

    def build(*ts):
        nonlocal probe
        out = fn(*ts)
        if probe is None:
            probe = Tensor(w.normal(size=out.shape))
        return ops.sum(ops.mul(out, probe))

    check_gradients(build, arrays)


@pytest.mark.parametrize(
    "name,fn",
    [
        ("mse", lambda a, b: ops.mse(a, b)),
        ("mean", lambda a, b: ops.mean(ops.mul(a, b))),
        ("cross_entropy", lambda a, b: ops.cross_entropy(ops.add(a, b), np.array([0, 2, 1]))),
    ],
)
def test_scalar_losses_match_finite_differences(name, fn):
    rng = np.random.default_rng(3)
    check_gradients(fn, [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))])


def test_random_five_parameter_graph():
    rng = np.random.default_rng(7)
    arrays = [rng.normal(size=s) for s in [(2, 3), (3, 3), (3,), (2, 3), (3, 2)]]

    def build(a, b, c, d, e):
        h = ops.silu(ops.add_bias(ops.matmul(a, b), c))
        h = ops.mul(h, ops.sigmoid(d))
        return ops.mean(ops.square(ops.matmul(h, e)))

    check_gradients(build, arrays, n_coords=5)


def test_concatenate_shape():
    a = Tensor(np.zeros((2, 3, 4, 4)))
    b = Tensor(np.zeros((2, 5, 4, 4)))
    assert ops.concat([a, b], axis=1).shape == (2, 8, 4, 4)


def test_concat_backward_splits_exactly():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True)
    probe = rng.normal(size=(2, 5, 3, 3))
    ga, gb = grad(ops.sum(ops.mul(ops.concat([a, b]), Tensor(probe))), [a, b])
    np.testing.assert_array_equal(ga, probe[:, :2])
    np.testing.assert_array_equal(gb, probe[:, 2:])


def test_silu_zero():
    assert ops.silu(Tensor([0.0])).data[0] == 0.0


def test_conv_identity_center_kernel():
    x = np.ones((1, 1, 3, 3))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(ops.conv2d(x, w, 1, 1).data, np.ones((1, 1, 3, 3)))


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)])
def test_conv2d_matches_loop_oracle(stride, pad, k):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(4, 3, k, k))
    np.testing.assert_allclose(ops.conv2d(x, w, stride, pad).data, conv2d_loop(x, w, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv_transpose_is_adjoint_of_conv():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, 4, 4))
    y = rng.normal(size=(2, 4, 4, 4))
    lhs = np.sum(ops.conv2d(x, w, 2, 1).data * y)
    rhs = np.sum(x * ops.conv_transpose2d(y, w, 2, 1).data)
    assert rel_err(lhs, rhs) < 1e-12


def test_backward_sum_of_squares():
    w = Tensor([1.0, 2.0], requires_grad=True)
    backward(ops.sum(ops.mul(w, w)))
    np.testing.assert_array_equal(w.grad, [2.0, 4.0])


def test_unreachable_leaf_gets_zero():
    w = Tensor([1.0, 2.0], requires_grad=True)
    v = Tensor([3.0, 4.0], requires_grad=True)
    gw, gv = grad(ops.sum(ops.square(w)), [w, v])
    np.testing.assert_array_equal(gv, [0.0, 0.0])
    np.testing.assert_array_equal(gw, [2.0, 4.0])


def test_non_scalar_loss_rejected():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        backward(ops.square(w))


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ValueError, match=r"add: shape mismatch \[2, 3\] vs \[3, 2\]"):
        ops.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(ValueError, match="conv2d"):
        ops.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))


def test_l2_normalize_rejects_zero():
    with pytest.raises(ValueError, match="zero vector"):
        ops.l2_normalize(Tensor(np.zeros((1, 3))))


def test_sgd_step():
    p = Parameter([1.0], "w")
    p.grad = np.array([2.0])
    optim.SGD([p], 0.1).step()
    np.testing.assert_allclose(p.data, [0.8])


def test_frozen_parameter_unchanged():
    p = Parameter([1.0, -3.0], "w", trainable=False)
    p.grad = np.array([5.0, 5.0])
    before = p.data.copy()
    for opt in (optim.SGD([p], 0.1), optim.Adam([p], 0.1)):
        opt.step()
    assert np.array_equal(p.data, before)


@pytest.mark.parametrize("g", [1e-3, 0.3, -250.0])
def test_adam_first_step_magnitude_is_lr(g):
    p = Parameter([0.0], "w")
    p.grad = np.array([g])
    optim.Adam([p], lr=0.01).step()
    # bias-corrected m/sqrt(v) = sign(g) at t=1
    np.testing.assert_allclose(abs(p.data[0]), 0.01, rtol=1e-4)
    assert np.sign(p.data[0]) == -np.sign(g)


def test_non_finite_gradient_names_parameter():
    p = Parameter([1.0], "decoder.weight")
    p.grad = np.array([np.nan])
    with pytest.raises(FloatingPointError, match="decoder.weight"):
        optim.Adam([p], 0.1).step()


def _train_tiny(seed):
    rng = np.random.default_rng(seed)
    layer = nn.Conv2d(1, 2, 3, rng)
    head = nn.Linear(2 * 4 * 4, 1, rng)
    opt = optim.Adam(layer.parameters() + head.parameters(), 1e-2)
    x = rng.normal(size=(4, 1, 4, 4))
    y = rng.normal(size=(4, 1))
    trajectory = []
    for _ in range(5):
        opt.zero_grad()
        out = head(ops.flatten(ops.silu(layer(x))))
        backward(ops.mse(out, y))
        opt.step()
        trajectory.append(np.concatenate([p.data.ravel() for p in layer.parameters()]))
    return np.array(trajectory)


def test_same_seed_bit_identical_trajectory():
    assert np.array_equal(_train_tiny(3), _train_tiny(3))


def test_module_names_parameters():
    rng = np.random.default_rng(0)

    class Net(nn.Module):
        def __init__(self):
            self.blocks = [nn.Conv2d(1, 2, 3, rng), nn.GroupNorm(1, 2)]

    names = list(Net().named_parameters())
    assert names == ["blocks.0.weight", "blocks.0.bias", "blocks.1.gamma", "blocks.1.beta"]


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 2),
    c=st.integers(1, 3),
    h=st.integers(3, 7),
    k=st.sampled_from([1, 2, 3]),
    stride=st.integers(1, 2),
    pad=st.integers(0, 1),
    seed=st.integers(0, 2**16),
)
def test_kernel_backends_agree_bitwise(n, c, h, k, stride, pad, seed):
    x = np.random.default_rng(seed).normal(size=(n, c, h, h + 1))
    cols = kernels.im2col(x, k, k, stride, pad)
    assert np.array_equal(cols, _pykernels.im2col(x, k, k, stride, pad))
    back = kernels.col2im(cols, x.shape, k, k, stride, pad)
    assert np.array_equal(back, _pykernels.col2im(cols, x.shape, k, k, stride, pad))


def test_compiled_backend_is_selected_when_built():
    pytest.importorskip("advrestore.autodiff._ckernels")
    assert kernels.BACKEND == "cython"


def test_environment_forces_python_backend():
    import os
    import subprocess
    import sys

    env = dict(os.environ, ADVRESTORE_PURE_PYTHON="1")
    out = subprocess.run(
        [sys.executable, "-c", "from advrestore.autodiff import kernels; print(kernels.BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "python"
