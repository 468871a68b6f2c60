import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgxvqa import autodiff as ad
from sgxvqa.autodiff import (
    NumericsError, ShapeError, Tensor, finite_difference_check, reference_mode,
)
from sgxvqa.gradsuite import TOLERANCE, run_suite


class TestTensorBasics:
    def test_backward_requires_scalar(self):
        t = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ShapeError):
            t.backward()

    def test_grad_accumulates_over_reuse(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        y = x * x  # dy/dx = 2x via two paths
        y.backward()
        assert x.grad == pytest.approx(6.0)

    def test_rsub(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        y = 1.0 - x
        y.backward()
        assert y.item() == pytest.approx(-1.0)
        assert x.grad == pytest.approx(-1.0)

    def test_nonfinite_intermediate_raises(self):
        x = Tensor(np.array(1000.0), requires_grad=True)
        with pytest.raises(NumericsError):
            ad.exp(x)

    def test_reference_mode_uses_float64(self):
        with reference_mode():
            t = ad.relu(Tensor(np.ones(3)))
            assert t.data.dtype == np.float64


class TestGradientSuite:
    """Reverse-mode gradients vs central differences for every primitive and
    for composite layers, including a full model loss."""

    @pytest.fixture(scope="class")
    def results(self):
        return run_suite()

    def test_all_cases_within_tolerance(self, results):
        failing = {k: v for k, v in results.items() if v > TOLERANCE}
        assert not failing, failing

    def test_suite_covers_primitives_and_composites(self, results):
        assert {"matmul", "softmax", "layer_norm", "cross_entropy",
                "multi_head_attention", "model_loss"} <= set(results)


class TestMaskedSoftmax:
    def test_masked_entries_are_zero_and_rest_sum_to_one(self):
        x = Tensor(np.array([[1.0, 2.0, 3.0]]))
        mask = np.array([[True, False, True]])
        w = ad.masked_softmax(x, mask, axis=-1)
        assert w.data[0, 1] == 0.0
        assert w.data[0].sum() == pytest.approx(1.0)

    def test_empty_support_raises(self):
        x = Tensor(np.zeros((1, 3)))
        with pytest.raises(ShapeError):
            ad.masked_softmax(x, np.zeros((1, 3), dtype=bool), axis=-1)


class TestCrossEntropy:
    def test_matches_manual_log_softmax(self):
        logits = np.array([0.2, -1.0, 3.0])
        t = Tensor(logits)
        loss = ad.cross_entropy(t, 1)
        manual = -(logits[1] - np.log(np.exp(logits).sum()))
        assert loss.item() == pytest.approx(manual, rel=1e-6)

    def test_stable_for_large_logits(self):
        loss = ad.cross_entropy(Tensor(np.array([50.0, 0.0, -50.0])), 0)
        assert np.isfinite(loss.item())


class TestDropout:
    def test_eval_mode_is_identity(self):
        x = Tensor(np.ones((4, 4)))
        y = ad.dropout(x, 0.5, train=False, rng=np.random.default_rng(0))
        np.testing.assert_array_equal(y.data, x.data)

    def test_train_mode_scales_survivors(self):
        x = Tensor(np.ones(10_000))
        y = ad.dropout(x, 0.25, train=True, rng=np.random.default_rng(0))
        kept = y.data[y.data > 0]
        np.testing.assert_allclose(kept, 1.0 / 0.75)
        assert kept.size == pytest.approx(7500, abs=300)


class TestMatmulShapes:
    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(1, 4), m=st.integers(1, 4), k=st.integers(1, 4))
    def test_2d_gradient_any_shape(self, n, m, k):
        r = np.random.default_rng(n * 100 + m * 10 + k)
        err = finite_difference_check(
            lambda a, b: ad.tsum(ad.matmul(a, b)),
            [r.normal(size=(n, m)), r.normal(size=(m, k))])
        assert err < TOLERANCE

    def test_3d_times_vector(self):
        r = np.random.default_rng(0)
        err = finite_difference_check(
            lambda a, b: ad.tsum(ad.matmul(a, b)),
            [r.normal(size=(2, 3, 4)), r.normal(size=4)])
        assert err < TOLERANCE


def test_softmax_rows_sum_to_one():
    x = Tensor(np.random.default_rng(0).normal(size=(5, 7)))
    w = ad.softmax(x, axis=-1)
    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-6)


def test_layer_norm_zero_mean_unit_variance():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 8)) * 5 + 2)
    y = ad.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
    np.testing.assert_allclose(y.data.mean(axis=-1), 0.0, atol=1e-5)
    np.testing.assert_allclose(y.data.std(axis=-1), 1.0, atol=1e-3)
