import numpy as np
import pytest

from skipseg.autodiff import (
    Tensor,
    add_elementwise,
    finite_diff_check,
    get_default_dtype,
    mul,
    no_grad,
    precision,
    tensor,
    weighted_sum,
    zero_grads,
)
from skipseg.exceptions import DimensionError, NonDeterministicError
from skipseg.ops import relu, sigmoid


def test_add_values():
    out = add_elementwise(tensor([1.0, 2.0]), tensor([3.0, 4.0]))
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_add_zeros_is_identity(rng):
    x = tensor(rng.standard_normal(5))
    np.testing.assert_array_equal(add_elementwise(x, tensor(np.zeros(5))).data, x.data)


def test_add_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2,\).*\(3,\)"):
        add_elementwise(tensor([1.0, 2.0]), tensor([1.0, 2.0, 3.0]))


def test_add_gradient_matches_finite_differences(f64, rng):
    a = tensor(rng.standard_normal((3, 4)))
    b = tensor(rng.standard_normal((3, 4)))
    err = finite_diff_check(lambda t: add_elementwise(t, b).sum(), a)
    assert err < 1e-6


def test_add_distributes_gradient_unchanged_to_both_branches(f64, rng):
    a = tensor(rng.standard_normal(6), requires_grad=True)
    b = tensor(rng.standard_normal(6), requires_grad=True)
    w = rng.standard_normal(6)
    weighted_sum(add_elementwise(a, b), w).backward()
    np.testing.assert_array_equal(a.grad, b.grad)
    np.testing.assert_allclose(a.grad, w)


def test_backward_relu_subgradient():
    x = tensor([-1.0, 2.0], requires_grad=True)
    relu(x).sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_backward_sigmoid_at_zero():
    x = tensor([0.0], requires_grad=True)
    sigmoid(x).sum().backward()
    np.testing.assert_allclose(x.grad, [0.25])


def test_backward_requires_scalar():
    x = tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2.0).backward()


def test_backward_on_detached_graph_raises():
    x = tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(RuntimeError, match="graph"):
        x.detach().sum().backward()
    with no_grad():
        y = (x * 3.0).sum()
    with pytest.raises(RuntimeError):
        y.backward()


def test_gradients_accumulate_until_zeroed():
    x = tensor([1.0, -3.0], requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    loss.backward()
    np.testing.assert_allclose(x.grad, 2 * (2 * x.data))
    zero_grads([x])
    assert x.grad is None
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_unreachable_tensors_get_no_grad():
    x = tensor([1.0], requires_grad=True)
    unused = tensor([2.0], requires_grad=True)
    (x * 2.0).sum().backward()
    assert x.grad is not None
    assert unused.grad is None


def test_intermediates_receive_grad_and_shared_nodes_visited_once():
    x = tensor([2.0], requires_grad=True)
    h = mul(x, x)
    loss = add_elementwise(h, h).sum()
    loss.backward()
    np.testing.assert_allclose(h.grad, [2.0])
    np.testing.assert_allclose(x.grad, [8.0])


def test_deep_chain_does_not_hit_recursion_limit():
    x = tensor([1.0], requires_grad=True)
    h = x
    for _ in range(5000):
        h = h * 1.0
    h.sum().backward()
    np.testing.assert_allclose(x.grad, [1.0])


def test_precision_switch():
    assert get_default_dtype() == np.float32
    with precision("float64"):
        assert tensor([1]).dtype == np.float64
    assert tensor([1]).dtype == np.float32
    with pytest.raises(ValueError):
        with precision("float16"):
            pass


def test_finite_diff_quadratic(f64):
    x = tensor([3.0])
    err = finite_diff_check(lambda t: mul(t, t).sum(), x)
    assert err < 1e-8


def test_finite_diff_detects_wrong_gradient(f64):
    from skipseg.autodiff import make_result

    def bad_square(t):
        return make_result(t.data ** 2, (t,), lambda g: (g * 3 * t.data,), "bad")

    err = finite_diff_check(lambda t: bad_square(t).sum(), tensor([1.0, 2.0]))
    assert err > 0.1


def test_finite_diff_rejects_nondeterministic_function(f64):
    gen = np.random.default_rng(0)

    def noisy(t):
        return weighted_sum(t, gen.standard_normal(t.shape))

    with pytest.raises(NonDeterministicError):
        finite_diff_check(noisy, tensor([1.0, 2.0]))


def test_finite_diff_restores_inputs(f64, rng):
    x = tensor(rng.standard_normal(4))
    before = x.data.copy()
    finite_diff_check(lambda t: mul(t, t).sum(), x)
    np.testing.assert_array_equal(x.data, before)
    assert not x.requires_grad and x.grad is None


def test_tensor_repr_and_item():
    t = Tensor(np.array([2.5]))
    assert t.item() == 2.5
    assert "shape=(1,)" in repr(t)
