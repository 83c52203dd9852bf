import math

import numpy as np
import pytest

import oracle
from cilseg import tensor as T
from cilseg.serialize import load_arrays, save_arrays


def test_conv_identity_scaled_kernel():
    x = T.Tensor(np.ones((1, 1, 3, 3)))
    k = T.Tensor(np.array([[[[2.0]]]]))
    b = T.Tensor(np.zeros(1))
    out = T.conv2d(x, k, b)
    assert out.shape == (1, 1, 3, 3)
    assert np.array_equal(out.data, np.full((1, 1, 3, 3), 2.0))


def test_conv_sum_reduction():
    x = T.Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    k = T.Tensor(np.ones((1, 1, 2, 2)))
    b = T.Tensor(np.zeros(1))
    out = T.conv2d(x, k, b)
    assert out.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 10.0


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 3, 8, 8))
    k = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(b), stride=1, padding=0)
    assert np.abs(out.data - oracle.conv2d(x, k, b)).max() < 1e-12


@pytest.mark.parametrize("n,cin,hw,cout,k,stride,pad", [
    (1, 1, 4, 1, 1, 1, 0),
    (2, 2, 6, 3, 3, 1, 1),
    (1, 4, 16, 2, 3, 2, 1),
    (4, 4, 8, 4, 2, 2, 0),
])
def test_conv_oracle_shapes(n, cin, hw, cout, k, stride, pad):
    rng = np.random.default_rng(n * 100 + cin)
    x = rng.standard_normal((n, cin, hw, hw))
    w = rng.standard_normal((cout, cin, k, k))
    b = rng.standard_normal(cout)
    out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=stride, padding=pad)
    ref = oracle.conv2d(x, w, b, stride=stride, padding=pad)
    assert out.shape == ref.shape
    assert np.abs(out.data - ref).max() < 1e-12


def test_conv_channel_mismatch_rejected():
    with pytest.raises(ValueError):
        T.conv2d(T.Tensor(np.ones((1, 2, 4, 4))), T.Tensor(np.ones((1, 3, 3, 3))),
                 T.Tensor(np.zeros(1)))


def test_upsample_factor_one_identity():
    x = np.arange(8.0).reshape(1, 2, 2, 2)
    out = T.upsample_nearest(T.Tensor(x), 1)
    assert np.array_equal(out.data, x)


def test_upsample_block_replication():
    out = T.upsample_nearest(T.Tensor(np.full((1, 1, 1, 1), 5.0)), 2)
    assert np.array_equal(out.data, np.full((1, 1, 2, 2), 5.0))


def test_upsample_backward_block_sum():
    x = T.Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
    out = T.upsample_nearest(x, 2)
    T.tsum(out).backward()
    assert np.array_equal(x.grad, np.full((1, 1, 2, 2), 4.0))
    g = np.random.default_rng(0).standard_normal((1, 3, 4, 4))
    x2 = T.Tensor(np.zeros((1, 3, 2, 2)), requires_grad=True)
    out2 = T.upsample_nearest(x2, 2)
    T.tsum(T.mul(out2, T.Tensor(g))).backward()
    assert np.abs(x2.grad - oracle.upsample_backward(g, 2)).max() < 1e-12


def test_softmax_symmetry():
    logits = T.Tensor(np.zeros((1, 2, 1, 1)))
    out = T.softmax_channels(logits)
    assert np.allclose(out.data[0, :, 0, 0], [0.5, 0.5], atol=1e-15)


def test_softmax_large_logits_no_overflow():
    logits = T.Tensor(np.full((1, 3, 1, 1), 1000.0))
    out = T.softmax_channels(logits)
    assert np.all(np.isfinite(out.data))
    assert np.allclose(out.data[0, :, 0, 0], [1 / 3] * 3, atol=1e-15)


def test_softmax_hand_values():
    logits = T.Tensor(np.log([1.0, 2.0, 5.0]).reshape(1, 3, 1, 1))
    out = T.softmax_channels(logits)
    assert np.allclose(out.data[0, :, 0, 0], [0.125, 0.25, 0.625], atol=1e-12)


def test_softmax_sums_and_shift_invariance():
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((2, 5, 4, 4))
    a = T.softmax_channels(T.Tensor(logits)).data
    assert np.abs(a.sum(axis=1) - 1.0).max() < 1e-12
    b = T.softmax_channels(T.Tensor(logits + 11.5)).data
    assert np.abs(a - b).max() < 1e-12


def test_backward_sum_gives_ones():
    w = T.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    T.tsum(w).backward()
    assert np.array_equal(w.grad, np.ones(3))


def test_backward_quadratic():
    w = T.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    T.tsum(T.mul(w, w)).backward()
    assert np.array_equal(w.grad, np.array([2.0, 4.0, 6.0]))


def test_backward_rejects_non_scalar():
    w = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        T.mul(w, w).backward()


def test_gradient_accumulation_two_consumers():
    # y = w*w + 3w consumed via two paths; grad = 2w + 3
    w = T.Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    y = T.add(T.mul(w, w), T.scale(w, 3.0))
    T.tsum(y).backward()
    assert np.array_equal(w.grad, 2 * w.data + 3.0)


def test_relu_and_mean():
    out = T.relu(T.Tensor(np.array([-1.0, 0.0, 2.0])))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])
    assert T.tmean(T.Tensor(np.array([2.0, 4.0]))).item() == 3.0


def test_log_clamps_zero():
    out = T.log(T.Tensor(np.array([0.0])))
    assert out.data[0] == math.log(1e-12)


def test_mean_over_axes():
    x = np.arange(24.0).reshape(2, 3, 4)
    out = T.tmean(T.Tensor(x), axes=(0, 2))
    assert np.allclose(out.data, x.mean(axis=(0, 2)))


def test_incompatible_shapes_rejected():
    with pytest.raises(ValueError):
        T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((3, 2))))
    with pytest.raises(ValueError):
        T.mul(T.Tensor(np.ones(3)), T.Tensor(np.ones((1, 3))))


def test_singleton_broadcast_allowed():
    a = T.Tensor(np.ones((2, 3)), requires_grad=True)
    b = T.Tensor(np.array([[1.0, 2.0, 3.0]]))
    out = T.mul(a, b)
    assert np.array_equal(out.data, np.tile([1.0, 2.0, 3.0], (2, 1)))
    T.tsum(out).backward()
    assert np.array_equal(a.grad, np.tile([1.0, 2.0, 3.0], (2, 1)))


def test_narrow_and_reshape_roundtrip():
    x = T.Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
    sl = T.narrow(x, 0, 1, 2)
    assert np.array_equal(sl.data, x.data[1:3])
    T.tsum(T.reshape(sl, (8,))).backward()
    expect = np.zeros((3, 4))
    expect[1:3] = 1.0
    assert np.array_equal(x.grad, expect)


def test_no_grad_blocks_recording():
    w = T.Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.mul(w, w)
    assert not y.requires_grad


def test_serialize_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    arrays = {
        "a.w": rng.standard_normal((3, 4, 5)),
        "b": rng.standard_normal(7),
        "nested.name.x": rng.standard_normal((2, 2)),
    }
    path = tmp_path / "params.bin"
    save_arrays(path, arrays)
    loaded = load_arrays(path)
    assert list(loaded) == list(arrays)
    for name in arrays:
        assert arrays[name].tobytes() == loaded[name].tobytes()


def test_serialize_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(ValueError):
        load_arrays(path)
