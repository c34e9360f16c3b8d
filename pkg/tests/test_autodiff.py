"""Gradient checks: every primitive against central finite differences of
an independent float64 reimplementation (h=1e-3), plus Adam closed-form
behavior and engine contracts."""

import numpy as np
import pytest

import dirsep.autodiff as ad
from dirsep.autodiff import Adam, Tensor, backward


def fd_grad(f, args, idx, h=1e-3):
    """Central finite differences of scalar f w.r.t. args[idx], float64."""
    work = [np.array(a, dtype=np.float64) for a in args]
    grad = np.zeros_like(work[idx])
    it = np.nditer(work[idx], flags=["multi_index"])
    for _ in it:
        mi = it.multi_index
        orig = work[idx][mi]
        work[idx][mi] = orig + h
        fp = f(work)
        work[idx][mi] = orig - h
        fm = f(work)
        work[idx][mi] = orig
        grad[mi] = (fp - fm) / (2 * h)
    return grad


def max_rel_err(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_op(build, oracle, arg_shapes, seed, wrt=None, bound=1e-4):
    """build(tensors) -> engine scalar; oracle(arrays64) -> float64 scalar."""
    rng = np.random.default_rng(seed)
    args = [rng.uniform(-1.0, 1.0, s).astype(np.float32) for s in arg_shapes]
    # keep ReLU/log style kinks away from the FD stencil
    args = [np.where(np.abs(a) < 0.05, a + 0.1, a).astype(np.float32) for a in args]
    tensors = [Tensor(a, requires_grad=True) for a in args]
    loss = build(tensors)
    backward(loss)
    for i in wrt if wrt is not None else range(len(args)):
        numeric = fd_grad(oracle, args, i)
        err = max_rel_err(tensors[i].grad.astype(np.float64), numeric)
        assert err < bound, f"arg {i}: rel err {err}"


def weights(shape, seed):
    return np.random.default_rng(seed).uniform(-1, 1, shape).astype(np.float32)


# ------------------------------------------------------------ primitives


def test_grad_add_broadcast():
    w = weights((2, 3, 4), 100)
    check_op(
        lambda t: ad.tsum(ad.mul(ad.add(t[0], t[1]), Tensor(w))),
        lambda a: float(((a[0] + a[1]) * w).sum()),
        [(2, 3, 4), (4,)], seed=0)


def test_grad_sub():
    w = weights((3, 4), 101)
    check_op(
        lambda t: ad.tsum(ad.mul(ad.sub(t[0], t[1]), Tensor(w))),
        lambda a: float(((a[0] - a[1]) * w).sum()),
        [(3, 4), (3, 4)], seed=1)


def test_grad_mul_broadcast():
    w = weights((2, 3, 4), 102)
    check_op(
        lambda t: ad.tsum(ad.mul(ad.mul(t[0], t[1]), Tensor(w))),
        lambda a: float((a[0] * a[1] * w).sum()),
        [(2, 3, 4), (3, 4)], seed=2)


def test_grad_div():
    w = weights((3, 3), 103)
    check_op(
        lambda t: ad.tsum(ad.mul(ad.div(t[0], t[1]), Tensor(w))),
        lambda a: float((a[0] / a[1] * w).sum()),
        [(3, 3), (3, 3)], seed=3)


def test_grad_scale():
    check_op(
        lambda t: ad.tsum(ad.scale(t[0], 2.5)),
        lambda a: float((2.5 * a[0]).sum()),
        [(4, 5)], seed=4)


def test_grad_matmul_2d():
    w = weights((3, 5), 104)
    check_op(
        lambda t: ad.tsum(ad.mul(ad.matmul(t[0], t[1]), Tensor(w))),
        lambda a: float(((a[0] @ a[1]) * w).sum()),
        [(3, 4), (4, 5)], seed=5)


def test_grad_matmul_batched():
    w = weights((2, 3, 5), 105)
    check_op(
        lambda t: ad.tsum(ad.mul(ad.matmul(t[0], t[1]), Tensor(w))),
        lambda a: float(((a[0] @ a[1]) * w).sum()),
        [(2, 3, 4), (4, 5)], seed=6)


def test_grad_relu():
    w = weights((4, 4), 106)
    check_op(
        lambda t: ad.tsum(ad.mul(ad.relu(t[0]), Tensor(w))),
        lambda a: float((np.maximum(a[0], 0.0) * w).sum()),
        [(4, 4)], seed=7)


def test_grad_sigmoid():
    w = weights((4, 4), 107)
    check_op(
        lambda t: ad.tsum(ad.mul(ad.sigmoid(t[0]), Tensor(w))),
        lambda a: float((1 / (1 + np.exp(-a[0])) * w).sum()),
        [(4, 4)], seed=8)


def test_grad_log():
    w = weights((3, 4), 108)

    def build(t):
        return ad.tsum(ad.mul(ad.log(ad.add(ad.mul(t[0], t[0]), 0.5)), Tensor(w)))

    check_op(
        build,
        lambda a: float((np.log(a[0] * a[0] + 0.5) * w).sum()),
        [(3, 4)], seed=9)


def test_grad_sum_axis_and_mean():
    w = weights((3,), 109)
    check_op(
        lambda t: ad.tsum(ad.mul(ad.tsum(t[0], axis=1), Tensor(w))),
        lambda a: float((a[0].sum(axis=1) * w).sum()),
        [(3, 5)], seed=10)
    w2 = weights((5,), 110)
    check_op(
        lambda t: ad.tsum(ad.mul(ad.tmean(t[0], axis=0), Tensor(w2))),
        lambda a: float((a[0].mean(axis=0) * w2).sum()),
        [(3, 5)], seed=11)


def test_grad_reshape_concat_take_expand():
    w = weights((2, 6), 111)
    check_op(
        lambda t: ad.tsum(ad.mul(ad.reshape(t[0], (2, 6)), Tensor(w))),
        lambda a: float((a[0].reshape(2, 6) * w).sum()),
        [(3, 4)], seed=12)

    wc = weights((3, 7), 112)
    check_op(
        lambda t: ad.tsum(ad.mul(ad.concat([t[0], t[1]], axis=1), Tensor(wc))),
        lambda a: float((np.concatenate([a[0], a[1]], axis=1) * wc).sum()),
        [(3, 4), (3, 3)], seed=13)

    wt = weights((3, 5), 113)
    check_op(
        lambda t: ad.tsum(ad.mul(ad.take(t[0], 1, axis=1), Tensor(wt))),
        lambda a: float((a[0][:, 1, :] * wt).sum()),
        [(3, 2, 5)], seed=14)

    ws = weights((2, 4), 117)
    check_op(
        lambda t: ad.tsum(ad.mul(ad.slice_rows(t[0], 1, 3), Tensor(ws))),
        lambda a: float((a[0][1:3] * ws).sum()),
        [(5, 4)], seed=17)

    we = weights((2, 4, 3), 114)
    check_op(
        lambda t: ad.tsum(ad.mul(ad.expand_time(t[0], 4), Tensor(we))),
        lambda a: float((np.broadcast_to(a[0][:, None, :], (2, 4, 3)) * we).sum()),
        [(2, 3)], seed=15)


def conv1d_oracle(x, w, b, dilation):
    """Plain float64 reference convolution (same padding)."""
    k, cin, cout = w.shape
    t = x.shape[-2]
    pad = (k - 1) // 2 * dilation
    pad_spec = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x, pad_spec)
    out = np.zeros(x.shape[:-1] + (cout,), dtype=np.float64)
    for i in range(k):
        out += xp[..., i * dilation:i * dilation + t, :] @ w[i]
    if b is not None:
        out += b
    return out


@pytest.mark.parametrize("dilation", [1, 2, 4])
@pytest.mark.parametrize("batched", [False, True])
def test_grad_conv1d(dilation, batched):
    xshape = (2, 6, 3) if batched else (6, 3)
    wshape = (3, 3, 4)
    wmask = weights(xshape[:-1] + (4,), 115 + dilation)
    check_op(
        lambda t: ad.tsum(ad.mul(ad.conv1d(t[0], t[1], t[2], dilation=dilation),
                                 Tensor(wmask))),
        lambda a: float((conv1d_oracle(a[0], a[1], a[2], dilation) * wmask).sum()),
        [xshape, wshape, (4,)], seed=16 + dilation)


def test_grad_conv1d_no_bias():
    wmask = weights((5, 2), 120)
    check_op(
        lambda t: ad.tsum(ad.mul(ad.conv1d(t[0], t[1], None, dilation=1), Tensor(wmask))),
        lambda a: float((conv1d_oracle(a[0], a[1], None, 1) * wmask).sum()),
        [(5, 3), (3, 3, 2)], seed=21)


def overlap_add_oracle(frames, hop, origin_length):
    t, fl = frames.shape[-2], frames.shape[-1]
    out = np.zeros(frames.shape[:-2] + ((t - 1) * hop + fl,), dtype=np.float64)
    for k in range(t):
        out[..., k * hop:k * hop + fl] += frames[..., k, :]
    return out[..., :origin_length]


@pytest.mark.parametrize("hop,origin", [(2, 9), (4, 16), (3, 13)])
def test_grad_overlap_add(hop, origin):
    wmask = weights((origin,), 130 + hop)
    check_op(
        lambda t: ad.tsum(ad.mul(ad.overlap_add_rows(t[0], hop, origin), Tensor(wmask))),
        lambda a: float((overlap_add_oracle(a[0], hop, origin) * wmask).sum()),
        [(4, 4)], seed=30 + hop)


# -------------------------------------------------------------- composites


def test_grad_composed_graph_many_seeds():
    # conv -> relu -> matmul -> sigmoid -> sum, checked on several seeds
    for seed in range(5):
        w2 = weights((4, 3), 200 + seed)

        def build(t):
            h = ad.relu(ad.conv1d(t[0], t[1], t[2], dilation=2))
            return ad.tsum(ad.sigmoid(ad.matmul(h, Tensor(w2))))

        def oracle(a):
            h = np.maximum(conv1d_oracle(a[0], a[1], a[2], 2), 0.0)
            return float((1 / (1 + np.exp(-(h @ w2)))).sum())

        check_op(build, oracle, [(7, 3), (3, 3, 4), (4,)], seed=300 + seed)


# ----------------------------------------------------------- contracts


def test_sum_gradient_is_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    backward(ad.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4), dtype=np.float32))


def test_relu_gradient_zero_for_negative_input():
    x = Tensor(-np.abs(np.random.default_rng(1).normal(size=(4,))) - 0.1,
               requires_grad=True)
    backward(ad.tsum(ad.relu(x)))
    np.testing.assert_array_equal(x.grad, np.zeros(4, dtype=np.float32))


def test_relu_gradient_at_exact_zero_is_zero():
    x = Tensor(np.zeros(3), requires_grad=True)
    backward(ad.tsum(ad.relu(x)))
    np.testing.assert_array_equal(x.grad, np.zeros(3, dtype=np.float32))


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = ad.relu(x)
    with pytest.raises(ValueError):
        backward(y)


def test_backward_twice_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = ad.tsum(ad.relu(x))
    backward(loss)
    with pytest.raises(RuntimeError):
        backward(loss)


def test_no_grad_skips_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.relu(x)
    assert y._backward_fn is None


def test_grad_accumulates_across_graphs():
    x = Tensor(np.ones(3), requires_grad=True)
    backward(ad.tsum(ad.scale(x, 2.0)))
    backward(ad.tsum(ad.scale(x, 3.0)))
    np.testing.assert_allclose(x.grad, 5.0)


# -------------------------------------------------------------------- Adam


def test_adam_zero_grad_leaves_params():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    p.grad = np.zeros(2, dtype=np.float32)
    opt = Adam([p], lr=1e-3)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_adam_missing_grad_raises():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([p], lr=1e-3)
    with pytest.raises(ValueError):
        opt.step()


def test_adam_matches_closed_form_recursion():
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam([p], lr=lr, beta1=b1, beta2=b2, eps=eps)
    # hand recursion in float64 mirrors of the update rule
    theta, m, v = 0.0, 0.0, 0.0
    for step in range(1, 6):
        p.grad = np.array([1.0], dtype=np.float32)
        opt.step()
        m = b1 * m + (1 - b1) * 1.0
        v = b2 * v + (1 - b2) * 1.0
        mhat = m / (1 - b1 ** step)
        vhat = v / (1 - b2 ** step)
        theta -= lr * mhat / (np.sqrt(vhat) + eps)
        assert p.data[0] == pytest.approx(theta, abs=1e-7)
        assert p.grad is None
    # first step is approximately -lr with bias correction
    assert abs(-5 * lr - p.data[0]) < 1e-6


def test_adam_default_lr_used_in_training_config():
    from dirsep.training import TrainConfig

    assert TrainConfig().lr == pytest.approx(1e-3)


def test_determinism_bit_identical_trajectories():
    def run():
        rng = np.random.default_rng(42)
        p = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        opt = Adam([p], lr=1e-2)
        x = Tensor(rng.normal(size=(5, 4)))
        for _ in range(10):
            loss = ad.tsum(ad.sigmoid(ad.matmul(x, p)))
            backward(loss)
            opt.step()
        return p.data.copy()

    np.testing.assert_array_equal(run(), run())
