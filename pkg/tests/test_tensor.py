import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dafakd.gradcheck import check_gradients, numeric_grad, relative_error
from dafakd.tensor import (
    ContractError,
    DimensionError,
    Tensor,
    build_tape,
    is_grad_enabled,
    log_softmax,
    matmul,
    no_grad,
    softmax_with_temperature,
)


def _param(rng, *shape, positive=False):
    data = rng.uniform(0.5, 2.0, size=shape) if positive else rng.normal(size=shape)
    return Tensor(data, requires_grad=True)


class TestPrimitiveGradients:
    """Each primitive's backward rule agrees with central differences."""

    @pytest.mark.parametrize(
        "name, build",
        [
            ("add-broadcast", lambda a, b, c: ((a + c) * (a + c)).sum()),
            ("sub", lambda a, b, c: ((a - 2.0 * a * a) * 0.5).sum()),
            ("mul", lambda a, b, c: (a * c).sum()),
            ("div", lambda a, b, c: (a / (c * c + 1.0)).sum()),
            ("rdiv", lambda a, b, c: (1.0 / (a * a + 1.0)).sum()),
            ("pow", lambda a, b, c: ((a * a + 1.0) ** 1.5).sum()),
            ("matmul", lambda a, b, c: (matmul(a, b) ** 2).sum()),
            ("exp-log", lambda a, b, c: ((a * 0.3).exp() + (a * a + 1.0).log()).sum()),
            ("relu", lambda a, b, c: ((a + 0.05).relu() * a).sum()),
            ("mean-axis", lambda a, b, c: (a.mean(axis=0) ** 2).sum() + a.mean(axis=1, keepdims=True).sum()),
            ("transpose-reshape", lambda a, b, c: (a.T.reshape(12) * np.arange(12.0)).sum()),
            ("gather-repeat", lambda a, b, c: (a.gather_rows([0, 2, 0, 1]) ** 2).sum()),
            ("neg-rsub", lambda a, b, c: (3.0 - (-a)).mean()),
        ],
    )
    def test_matches_finite_differences(self, name, build):
        rng = np.random.default_rng(3)
        a, b, c = _param(rng, 3, 4), _param(rng, 4, 2), _param(rng, 1, 4)
        result = check_gradients(name, lambda: build(a, b, c), [a, b, c])
        assert result.passed, result.detail

    def test_log_softmax_with_temperature(self):
        rng = np.random.default_rng(0)
        z = _param(rng, 4, 5)
        w = rng.normal(size=(4, 5))
        for tau in (0.5, 1.0, 3.0):
            result = check_gradients(f"tau={tau}", lambda tau=tau: (log_softmax(z, tau) * w).sum(), [z])
            assert result.passed, result.detail

    def test_softmax_with_temperature(self):
        rng = np.random.default_rng(1)
        z = _param(rng, 3, 4)
        w = rng.normal(size=(3, 4))
        result = check_gradients("softmax", lambda: (softmax_with_temperature(z, 2.0) * w).sum(), [z])
        assert result.passed, result.detail


class TestAutodiffContract:
    def test_gradients_accumulate_until_cleared(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        (x * 3.0).sum().backward()
        (x * 3.0).sum().backward()
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])
        x.zero_grad()
        (x * 3.0).sum().backward()
        np.testing.assert_array_equal(x.grad, [3.0, 3.0])

    def test_shared_subexpression(self):
        """A node used twice receives the sum of both paths."""
        x = Tensor(2.0, requires_grad=True)
        y = x * x
        (y + y * x).backward()
        # d/dx (x^2 + x^3) = 2x + 3x^2
        assert x.grad == pytest.approx(2 * 2 + 3 * 4)

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError, match="scalar"):
            (x * 2).backward()

    def test_backward_needs_graph(self):
        with pytest.raises(ContractError, match="requires grad"):
            Tensor(np.ones(3)).sum().backward()

    def test_item_needs_single_element(self):
        with pytest.raises(ContractError):
            Tensor(np.ones(2)).item()

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            assert not is_grad_enabled()
            y = (x * 2).sum()
        assert is_grad_enabled()
        assert not y.requires_grad
        assert y._parents == ()

    def test_no_grad_restored_after_exception(self):
        with pytest.raises(RuntimeError):
            with no_grad():
                raise RuntimeError
        assert is_grad_enabled()

    def test_detach_cuts_the_graph(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        d = (x * 2).detach()
        assert not d.requires_grad
        y = (x * d).sum()
        y.backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_tape_is_topological(self):
        x = Tensor(1.0, requires_grad=True)
        a = x * 2.0
        b = a + x
        c = b * a
        tape = build_tape(c)
        pos = {id(t): i for i, t in enumerate(tape)}
        for node in tape:
            for p in node._parents:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(node)]
        assert tape[-1] is c

    def test_deep_chain_has_no_recursion_limit(self):
        x = Tensor(1.0, requires_grad=True)
        y = x
        for _ in range(5000):
            y = y * 1.0
        y.backward()
        assert x.grad == 1.0

    def test_matmul_shape_error(self):
        with pytest.raises(DimensionError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(ValueError):
            log_softmax(Tensor(np.zeros((1, 2))), 0.0)
        with pytest.raises(ValueError):
            softmax_with_temperature(Tensor(np.zeros((1, 2))), -1.0)


class TestSoftmax:
    @settings(max_examples=50, deadline=None)
    @given(
        st.integers(1, 6),
        st.integers(2, 8),
        st.floats(0.1, 10.0),
        st.floats(-500.0, 500.0),
        st.integers(0, 2**31),
    )
    def test_rows_are_distributions(self, n, c, tau, shift, seed):
        z = np.random.default_rng(seed).normal(scale=20.0, size=(n, c)) + shift
        p = softmax_with_temperature(Tensor(z), tau).data
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(np.exp(log_softmax(Tensor(z), tau).data), p, atol=1e-12)

    def test_large_logits_stay_finite(self):
        z = Tensor([[1000.0, 0.0, -1000.0]])
        out = log_softmax(z).data
        assert np.all(np.isfinite(out))
        assert out[0, 0] == 0.0

    def test_shift_invariance(self):
        z = np.array([[0.3, -1.2, 2.0]])
        np.testing.assert_allclose(
            log_softmax(Tensor(z)).data, log_softmax(Tensor(z + 123.0)).data, atol=1e-12
        )


class TestGradcheckHelpers:
    def test_numeric_grad_of_quadratic(self):
        x = Tensor(np.array([1.0, -2.0, 0.5]))
        g = numeric_grad(lambda: (x * x).sum(), x.data)
        np.testing.assert_allclose(g, 2 * x.data, rtol=1e-8)
        # the probe leaves the input untouched
        np.testing.assert_array_equal(x.data, [1.0, -2.0, 0.5])

    def test_relative_error_falls_back_to_absolute(self):
        assert relative_error(np.zeros(3), np.full(3, 1e-14)) == pytest.approx(1e-14)
        assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.2])) == pytest.approx(0.2 / 2.2)
