import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vgm2 import autodiff as ad


def finite_difference(f, arrays, eps=1e-6):
    """Central finite differences of a scalar function of numpy arrays."""
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(*arrays)
            flat[i] = orig - eps
            lo = f(*arrays)
            flat[i] = orig
            gf[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def tape_gradients(build, arrays):
    tape = ad.Tape()
    leaves = [tape.variable(a) for a in arrays]
    loss = build(*leaves)
    grads = tape.backward(loss)
    return float(loss.value), [tape.grad(grads, v) for v in leaves]


def _plain(build, arrays):
    tape = ad.Tape()
    leaves = [tape.variable(a) for a in arrays]
    return float(build(*leaves).value)


def test_square_gradient():
    tape = ad.Tape()
    x = tape.variable(3.0)
    loss = ad.mul(x, x)
    grads = tape.backward(loss)
    assert tape.grad(grads, x) == pytest.approx(6.0)


def test_constant_loss_has_zero_gradients():
    tape = ad.Tape()
    x = tape.variable(np.ones(4))
    c = tape.constant(2.0)
    loss = ad.mul(c, c)
    grads = tape.backward(loss)
    assert np.all(tape.grad(grads, x) == 0.0)


def test_non_scalar_loss_raises():
    tape = ad.Tape()
    x = tape.variable(np.ones(3))
    with pytest.raises(ad.NonScalarLossError):
        tape.backward(x)


def test_shape_mismatch_error_names_op_and_shapes():
    tape = ad.Tape()
    a = tape.variable(np.ones((2, 3)))
    b = tape.variable(np.ones((4, 5)))
    with pytest.raises(ad.ShapeMismatchError, match="add"):
        ad.add(a, b)
    with pytest.raises(ad.ShapeMismatchError, match="matmul"):
        ad.matmul(a, b)


def test_forward_values():
    tape = ad.Tape()
    assert float(ad.log(tape.variable(1.0)).value) == 0.0
    assert float(ad.sigmoid(tape.variable(0.0)).value) == pytest.approx(0.5)
    # digamma(1) = -gamma (Euler-Mascheroni)
    assert float(ad.digamma(tape.variable(1.0)).value) == pytest.approx(-0.5772156649, abs=1e-9)


@pytest.mark.parametrize(
    "name,build",
    [
        ("exp", lambda x: ad.vsum(ad.exp(x))),
        ("log", lambda x: ad.vsum(ad.log(x))),
        ("sqrt", lambda x: ad.vsum(ad.sqrt(x))),
        ("tanh", lambda x: ad.vsum(ad.tanh(x))),
        ("sigmoid", lambda x: ad.vsum(ad.sigmoid(x))),
        ("softplus", lambda x: ad.vsum(ad.softplus(x))),
        ("lgamma", lambda x: ad.vsum(ad.lgamma(x))),
        ("digamma", lambda x: ad.vsum(ad.digamma(x))),
        ("power", lambda x: ad.vsum(ad.power(x, 1.7))),
        ("mean", lambda x: ad.vmean(ad.mul(x, x))),
        ("logsumexp", lambda x: ad.logsumexp(x)),
        ("clip", lambda x: ad.vsum(ad.mul(ad.clip(x, 0.2, 3.0), x))),
    ],
)
def test_unary_gradients_match_finite_differences(name, build):
    rng = np.random.default_rng(7)
    x = rng.uniform(0.3, 2.5, size=(3, 4))
    val, (g,) = tape_gradients(build, [x])
    (fd,) = finite_difference(lambda a: _plain(build, [a]), [x])
    assert np.allclose(g, fd, rtol=1e-5, atol=1e-7), name


def test_binary_and_structural_gradients():
    rng = np.random.default_rng(11)
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(3, 2))
    bias = rng.normal(size=(2,))

    def build(av, bv, biasv):
        h = ad.tanh(ad.add(ad.matmul(av, bv), biasv))
        return ad.vsum(ad.mul(h, h))

    _, gs = tape_gradients(build, [a, b, bias])
    fds = finite_difference(lambda *arr: _plain(build, list(arr)), [a, b, bias])
    for g, fd in zip(gs, fds):
        assert np.allclose(g, fd, rtol=1e-5, atol=1e-7)


def test_gather_rows_and_axis_reductions():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(6, 2))
    idx_i = np.array([0, 2, 4])
    idx_j = np.array([1, 3, 5])

    def build(zv):
        zi = ad.gather_rows(zv, idx_i)
        zj = ad.gather_rows(zv, idx_j)
        d2 = ad.vsum(ad.power(ad.sub(zi, zj), 2.0), axis=1)
        return ad.vsum(ad.log(ad.add(d2, 1.0)))

    _, (g,) = tape_gradients(build, [z])
    (fd,) = finite_difference(lambda a: _plain(build, [a]), [z])
    assert np.allclose(g, fd, rtol=1e-5, atol=1e-8)


def test_logsumexp_axis_gradient():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 5))

    def build(xv):
        return ad.vsum(ad.logsumexp(xv, axis=0))

    _, (g,) = tape_gradients(build, [x])
    (fd,) = finite_difference(lambda a: _plain(build, [a]), [x])
    assert np.allclose(g, fd, rtol=1e-5, atol=1e-8)


def test_maximum_and_logaddexp():
    rng = np.random.default_rng(9)
    a = rng.normal(size=(5,))
    b = rng.normal(size=(5,))

    def build(av, bv):
        return ad.vsum(ad.logaddexp(av, bv))

    _, gs = tape_gradients(build, [a, b])
    fds = finite_difference(lambda *arr: _plain(build, list(arr)), [a, b])
    for g, fd in zip(gs, fds):
        assert np.allclose(g, fd, rtol=1e-5, atol=1e-8)
    tape = ad.Tape()
    out = ad.logaddexp(tape.variable(a), tape.variable(b))
    assert np.allclose(out.value, np.logaddexp(a, b))


def test_backward_is_linear_in_the_loss():
    rng = np.random.default_rng(13)
    x = rng.uniform(0.5, 1.5, size=(4,))

    def l1(xv):
        return ad.vsum(ad.mul(xv, xv))

    def l2(xv):
        return ad.vsum(ad.exp(xv))

    def lsum(xv):
        return ad.add(l1(xv), l2(xv))

    _, (g1,) = tape_gradients(l1, [x])
    _, (g2,) = tape_gradients(l2, [x])
    _, (gs,) = tape_gradients(lsum, [x])
    assert np.allclose(gs, g1 + g2, atol=1e-12)


def test_polymorphic_numpy_path_matches_var_path():
    rng = np.random.default_rng(21)
    x = rng.uniform(0.2, 3.0, size=(8,))
    tape = ad.Tape()
    xv = tape.variable(x)
    expr_var = ad.logsumexp(ad.add(ad.lgamma(xv), ad.softplus(xv)))
    expr_np = ad.logsumexp(ad.add(ad.lgamma(x), ad.softplus(x)))
    assert float(expr_var.value) == pytest.approx(float(expr_np), abs=1e-12)


def test_numpy_reflected_operators_on_var():
    tape = ad.Tape()
    x = tape.variable(np.array([1.0, 2.0]))
    y = np.array([3.0, 4.0]) * x + 1.0
    assert isinstance(y, ad.Var)
    assert np.allclose(y.value, [4.0, 9.0])


class TestAdam:
    def test_zero_gradient_keeps_params_and_bumps_timestep(self):
        params = {"w": np.ones(3)}
        grads = {"w": np.zeros(3)}
        state = ad.AdamState.for_params(params)
        new_params, new_state = ad.adam_step(params, grads, state, lr=0.1)
        assert np.array_equal(new_params["w"], params["w"])
        assert new_state.t == 1

    def test_first_step_is_bias_corrected(self):
        params = {"w": np.array(0.0)}
        grads = {"w": np.array(1.0)}
        state = ad.AdamState.for_params(params)
        new_params, _ = ad.adam_step(params, grads, state, lr=0.1)
        # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
        assert float(new_params["w"]) == pytest.approx(-0.1, rel=1e-6)

    def test_determinism_bitwise(self):
        rng = np.random.default_rng(0)
        p0 = {"w": rng.normal(size=(4, 4))}

        def run():
            params = {k: v.copy() for k, v in p0.items()}
            state = ad.AdamState.for_params(params)
            gen = np.random.default_rng(42)
            for _ in range(25):
                grads = {"w": gen.normal(size=(4, 4))}
                params, state = ad.adam_step(params, grads, state, lr=1e-2)
            return params["w"]

        assert np.array_equal(run(), run())

    def test_non_finite_gradient_names_parameter(self):
        params = {"bad": np.array(1.0)}
        grads = {"bad": np.array(np.nan)}
        state = ad.AdamState.for_params(params)
        with pytest.raises(ad.NonFiniteGradientError, match="bad"):
            ad.adam_step(params, grads, state)


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=10**6))
def test_sum_then_backward_broadcasts_ones(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n,))
    tape = ad.Tape()
    xv = tape.variable(x)
    grads = tape.backward(ad.vsum(xv))
    assert np.array_equal(tape.grad(grads, xv), np.ones(n))
