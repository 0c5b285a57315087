import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mamelab import numerics as nx
from mamelab import oracles, ssm
from mamelab.numerics import Tensor


def test_discretize_small_step_limit():
    a, b = ssm.discretize(-1.0, 1.0, 1e-12)
    assert a == pytest.approx(1.0, abs=1e-11)
    assert b == pytest.approx(0.0, abs=1e-11)


def test_discretize_ln2_matches_euler():
    a, b = ssm.discretize(-1.0, 1.0, np.log(2.0))
    assert a == pytest.approx(0.5, rel=1e-12)
    assert b == pytest.approx(0.5, rel=1e-12)
    ea, eb = oracles.euler_hold(np.array([-1.0]), np.array([1.0]), np.array([np.log(2.0)]))
    assert abs(ea[0] - a) / a < 1e-6
    assert abs(eb[0] - b) / b < 1e-6


def test_discretize_large_step():
    a, _ = ssm.discretize(-1.0, 1.0, 1e3)
    assert a < 1e-300


def test_discretize_rejects_nonpositive_step():
    with pytest.raises(ssm.NonPositiveStepError, match="nonpositive step"):
        ssm.discretize(-1.0, 1.0, 0.0)
    with pytest.raises(ssm.NonPositiveStepError):
        ssm.discretize(-1.0, 1.0, np.array([0.1, -0.1]))


@given(st.floats(-50, -1e-3), st.floats(1e-4, 10.0), st.floats(1.001, 5.0))
def test_a_bar_in_unit_interval_and_decreasing(a, d, k):
    a1, _ = ssm.discretize(a, 1.0, d)
    a2, _ = ssm.discretize(a, 1.0, d * k)
    assert 0.0 <= a2 <= a1 < 1.0
    if a1 > 1e-300:
        assert a2 < a1


def _tensors(*arrs):
    return [Tensor(a, dtype="f64") for a in arrs]


def test_scan_zero_input_gives_zero(rng):
    n, di, s = 5, 3, 2
    x = np.zeros((n, di))
    args = _tensors(x, rng.uniform(0.1, 1, (n, di)), -rng.uniform(0.5, 2, (di, s)),
                    rng.normal(size=(n, s)), rng.normal(size=(n, s)))
    assert np.all(ssm.scan_kernel(*args).data == 0)


def test_scan_two_step_hand_case():
    # A=-1, delta=ln 2 gives A_bar = 0.5 and B_bar = 0.5*B; B=2 makes B_bar=1
    d = np.log(2.0)
    args = _tensors(np.array([[1.0], [0.0]]), np.full((2, 1), d), np.array([[-1.0]]),
                    np.full((2, 1), 2.0), np.ones((2, 1)))
    y = ssm.scan_kernel(*args).data
    assert np.allclose(y[:, 0], [1.0, 0.5], atol=1e-12)
    # same recurrence with A_bar=0.5, B_bar=C=1 written directly
    h, ys = 0.0, []
    for x in (1.0, 0.0):
        h = 0.5 * h + 1.0 * x
        ys.append(h * 0.5)
    assert np.allclose(np.array(ys), [0.5, 0.25])


@pytest.mark.parametrize("kernel", [ssm.scan_kernel, ssm.scan_kernel_numpy])
def test_scan_matches_naive_recurrence(rng, kernel):
    n, di, s = 32, 5, 4
    x = rng.normal(size=(n, di))
    d = rng.uniform(0.001, 2.0, (n, di))
    A = -rng.uniform(0.1, 8.0, (di, s))
    Bm, Cm = rng.normal(size=(n, s)), rng.normal(size=(n, s))
    y = kernel(*_tensors(x, d, A, Bm, Cm)).data
    assert np.max(np.abs(y - oracles.naive_scan(x, d, A, Bm, Cm))) < 1e-10


def test_fused_and_numpy_kernels_agree_with_gradients(rng):
    b, n, di, s = 2, 7, 4, 3
    vals = [rng.normal(size=(b, n, di)), rng.uniform(0.01, 1.0, (b, n, di)), -rng.uniform(0.5, 4, (di, s)),
            rng.normal(size=(b, n, s)), rng.normal(size=(b, n, s))]
    gy = rng.normal(size=(b, n, di))
    outs = []
    for kernel in (ssm.scan_kernel, ssm.scan_kernel_numpy):
        ts = [Tensor(v, requires_grad=True, dtype="f64") for v in vals]
        with nx.GradTape() as tape:
            loss = nx.sum_(nx.mul(kernel(*ts), gy))
        g = nx.backward(tape, loss)
        outs.append([loss.item()] + [g[t] for t in ts])
    assert outs[0][0] == pytest.approx(outs[1][0], rel=1e-12)
    for a, b_ in zip(outs[0][1:], outs[1][1:]):
        assert np.allclose(a, b_, rtol=1e-9, atol=1e-11)


def test_scan_gradient_finite_differences(rng):
    n, di, s = 6, 3, 2
    vals = [rng.normal(size=(n, di)), rng.uniform(0.05, 0.8, (n, di)), -rng.uniform(0.5, 3, (di, s)),
            rng.normal(size=(n, s)), rng.normal(size=(n, s))]
    ts = [Tensor(v, requires_grad=True, dtype="f64") for v in vals]
    w = rng.normal(size=(n, di))

    def loss():
        return nx.sum_(nx.mul(ssm.scan_kernel(*ts), w))

    with nx.GradTape() as tape:
        out = loss()
    g = nx.backward(tape, out)
    eps = 1e-6
    for t in ts:
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = loss().item()
            flat[i] = old - eps
            dn = loss().item()
            flat[i] = old
            fd = (up - dn) / (2 * eps)
            an = g[t].reshape(-1)[i]
            assert abs(fd - an) <= 1e-6 * max(1.0, abs(fd))


def _block(rng, d=6, di=8, s=3):
    return ssm.init_block(rng, d, di, s, 2, dtype=np.float64)


def test_selective_scan_shapes_and_positive_delta(rng):
    p = _block(rng)
    x = Tensor(rng.normal(size=(2, 9, 8)), dtype="f64")
    out = ssm.selective_scan(x, p.fwd)
    assert out.y.shape == (2, 9, 8)
    assert out.delta.shape == (2, 9, 8)
    assert np.all(out.delta.data > 0)


def test_selective_scan_rejects_nonfinite(rng):
    p = _block(rng)
    x = rng.normal(size=(4, 8))
    x[1, 2] = np.nan
    with pytest.raises(FloatingPointError, match="nonfinite"):
        ssm.selective_scan(Tensor(x, dtype="f64"), p.fwd)


def test_vim_block_zero_out_proj_is_pure_residual(rng):
    p = _block(rng)
    p.out_proj.data[:] = 0.0
    t = Tensor(rng.normal(size=(5, 6)), dtype="f64")
    out = ssm.vim_block(t, p)
    assert np.array_equal(out.t_next.data, t.data)
    assert out.t_star.shape == (5, 6)
    assert out.delta_f.shape == (5, 8) and out.delta_b.shape == (5, 8)


def test_palindrome_with_tied_directions(rng):
    p = _block(rng)
    x = rng.normal(size=(7, 8))
    x = np.concatenate([x[:4], x[:3][::-1]])
    assert np.array_equal(x, x[::-1])
    xt = Tensor(x, dtype="f64")
    yf = ssm.selective_scan(xt, p.fwd).y.data
    yb = ssm.selective_scan(xt, p.fwd, reverse=True).y.data
    assert np.allclose(yf, yb[::-1], atol=1e-13)


def test_a_is_negative_integers_at_init(rng):
    p = _block(rng)
    A = p.fwd.A
    assert np.all(A < 0)
    assert np.allclose(A[0], -np.arange(1, 4))
