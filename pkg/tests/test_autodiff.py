import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import numeric_grad, rel_error
from fleetalign import autodiff as ad
from fleetalign.autodiff import GraphError, NonFiniteError, ShapeError, Tensor

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def check_grad(build, *arrays_, tol=1e-6):
    """Compare backward() against central differences for every input array."""
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays_]
    build(*leaves).backward()
    for leaf in leaves:
        def f():
            return float(build(*[Tensor(l.data) for l in leaves]).data)
        num = numeric_grad(f, leaf.data)
        assert rel_error(leaf.grad, num, floor=1.0) < tol, (leaf.grad, num)


UNARY = {
    "neg": lambda a: ad.tsum(-a),
    "square": lambda a: ad.tsum(ad.square(a)),
    "exp": lambda a: ad.tsum(ad.exp(a)),
    "sigmoid": lambda a: ad.tsum(ad.sigmoid(a) * ad.sigmoid(a)),
    "sqrt": lambda a: ad.tsum(ad.sqrt(ad.square(a) + 1.0)),
    "log": lambda a: ad.tsum(ad.log(ad.square(a) + 0.5)),
    "mean": lambda a: ad.mean(ad.square(a)),
    "softmax": lambda a: ad.tsum(ad.softmax(a, axis=-1) * np.arange(a.shape[-1])),
    "log_softmax": lambda a: ad.tsum(ad.log_softmax(a, axis=-1) * np.arange(a.shape[-1])),
    "l2_norm": lambda a: ad.tsum(ad.l2_norm(a, axis=-1)),
    "transpose": lambda a: ad.tsum(ad.transpose(a) * np.arange(a.size).reshape(a.shape[::-1])),
    "reshape": lambda a: ad.tsum(ad.square(ad.reshape(a, (-1,)))),
    "sum_axis": lambda a: ad.tsum(ad.square(ad.tsum(a, axis=0))),
    "mean_keepdims": lambda a: ad.tsum(ad.square(a - ad.mean(a, axis=1, keepdims=True))),
    "pair_distances": lambda a: ad.tsum(ad.square(ad.pair_distances(a)) + ad.pair_distances(a)),
    "slice_rows": lambda a: ad.tsum(ad.square(ad.slice_rows(a, 1, 3))),
    "take_rows": lambda a: ad.tsum(ad.square(ad.take_rows(a, [0, 2, 2, 1]))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@given(x=arrays(np.float64, (4, 3), elements=finite))
def test_unary_gradients(name, x):
    if name == "l2_norm" or name == "pair_distances":
        x = x + np.arange(12).reshape(4, 3)  # keep norms and distances away from zero
    check_grad(UNARY[name], x)


@given(a=arrays(np.float64, (3, 4), elements=finite), b=arrays(np.float64, (4,), elements=finite))
def test_broadcast_binary_gradients(a, b):
    check_grad(lambda a, b: ad.tsum(ad.square(a + b) * (a - b)), a, b)
    check_grad(lambda a, b: ad.tsum(a / (ad.square(b) + 1.0)), a, b)


@given(a=arrays(np.float64, (3, 4), elements=finite), b=arrays(np.float64, (4, 2), elements=finite))
def test_matmul_gradients(a, b):
    check_grad(lambda a, b: ad.tsum(ad.square(ad.matmul(a, b))), a, b)


def test_relu_and_clip_gradients_away_from_kinks():
    x = np.array([[-1.5, -0.3, 0.4], [2.0, -2.2, 0.7]])
    check_grad(lambda a: ad.tsum(ad.relu(a) * a), x)
    check_grad(lambda a: ad.tsum(ad.square(ad.clip(a, -1.0, 1.0))), x)


def test_concat_gradient():
    check_grad(lambda a, b: ad.tsum(ad.square(ad.concat([a, b], axis=0)) * 2.0),
               np.ones((2, 3)), np.arange(6.0).reshape(2, 3))


def test_pair_distances_with_explicit_indices_matches_all_pairs():
    x = np.random.default_rng(0).normal(size=(6, 3))
    i, j = np.triu_indices(6, k=1)
    a = ad.pair_distances(Tensor(x)).data
    b = ad.pair_distances(Tensor(x), i, j).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
    check_grad(lambda t: ad.tsum(ad.square(ad.pair_distances(t, i[::2], j[::2]))), x)


def test_zero_distance_has_zero_gradient():
    t = Tensor(np.array([[1.0, 2.0], [1.0, 2.0]]), requires_grad=True)
    ad.tsum(ad.pair_distances(t)).backward()
    assert np.all(t.grad == 0)


def test_gradient_accumulates_over_reused_leaf():
    t = Tensor(np.array([2.0]), requires_grad=True)
    (ad.tsum(t * t) + ad.tsum(t * 3.0)).backward()
    assert t.grad[0] == pytest.approx(7.0)


def test_backward_twice_raises_without_retain_graph():
    t = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = ad.tsum(ad.square(t))
    y.backward()
    with pytest.raises(GraphError):
        y.backward()


def test_retain_graph_allows_second_pass_and_accumulates():
    t = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = ad.tsum(ad.square(t))
    y.backward(retain_graph=True)
    y.backward()
    np.testing.assert_array_equal(t.grad, 4.0 * t.data)


def test_backward_requires_scalar():
    with pytest.raises(GraphError):
        (Tensor(np.ones(3), requires_grad=True) * 2.0).backward()


def test_non_finite_output_raises():
    with pytest.raises(NonFiniteError):
        ad.log(Tensor(np.array([0.0, 1.0])))
    with pytest.raises(NonFiniteError):
        ad.exp(Tensor(np.array([1000.0])))


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@pytest.mark.parametrize("alpha", [0.2, 1.0, 3.0])
def test_gradient_reversal_contract(alpha):
    x = np.random.default_rng(1).normal(size=(5, 4))
    t = Tensor(x, requires_grad=True)
    out = ad.gradient_reversal(t, alpha)
    assert np.array_equal(out.data, x)
    upstream = np.random.default_rng(2).normal(size=x.shape)
    ad.tsum(out * upstream).backward()
    np.testing.assert_array_equal(t.grad, -alpha * upstream)


def test_gradient_reversal_rejects_nonpositive_alpha():
    with pytest.raises(ValueError):
        ad.gradient_reversal(Tensor(np.ones(2)), 0.0)


def test_gaussian_sample_reparameterization_gradients():
    rng_a, rng_b = np.random.default_rng(7), np.random.default_rng(7)
    mu = Tensor(np.array([[0.5, -1.0]]), requires_grad=True)
    lv = Tensor(np.array([[0.2, -0.4]]), requires_grad=True)
    z = ad.gaussian_sample(mu, lv, rng_a)
    eps = rng_b.standard_normal((1, 2))
    np.testing.assert_allclose(z.data, mu.data + np.exp(lv.data / 2) * eps)
    ad.tsum(z).backward()
    np.testing.assert_allclose(mu.grad, 1.0)
    np.testing.assert_allclose(lv.grad, 0.5 * np.exp(lv.data / 2) * eps)


def _reference_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return theta


def test_adam_matches_scalar_reference():
    grads = [np.array([0.3, -1.2]), np.array([0.1, 0.5]), np.array([-2.0, 0.0])]
    p = np.array([1.0, -1.0])
    state = ad.AdamState(learning_rate=1e-2)
    for g in grads:
        ad.adam_step([p], [g], state)
    expected = np.array([_reference_adam(1.0, [g[0] for g in grads], 1e-2),
                         _reference_adam(-1.0, [g[1] for g in grads], 1e-2)])
    np.testing.assert_allclose(p, expected, rtol=1e-12)


def test_adam_first_step_moves_by_learning_rate():
    p = np.array([0.0, 0.0])
    ad.adam_step([p], [np.array([5.0, -0.01])], ad.AdamState(learning_rate=1e-3))
    np.testing.assert_allclose(p, [-1e-3, 1e-3], rtol=1e-4)


def test_adam_minimizes_quadratic():
    x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = ad.Adam([x], lr=0.05)
    for _ in range(2000):
        opt.zero_grad()
        ad.tsum(ad.square(x - np.array([1.0, 0.5]))).backward()
        opt.step()
    np.testing.assert_allclose(x.data, [1.0, 0.5], atol=1e-3)


def test_adam_rejects_non_finite_gradient_and_bad_config():
    with pytest.raises(NonFiniteError):
        ad.adam_step([np.zeros(1)], [np.array([np.nan])], ad.AdamState())
    with pytest.raises(ValueError):
        ad.AdamState(learning_rate=0.0)
    with pytest.raises(ValueError):
        ad.AdamState(beta1=1.0)
