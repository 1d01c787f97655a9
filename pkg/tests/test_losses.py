import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowasd.errors import CalibrationFailed, ConfigError, EmptyBatchError
from flowasd.losses import (
    LossSpec,
    calibrate,
    calibrate_c,
    loss_nll,
    loss_oe_modified,
    loss_oe_threshold,
    qualifying,
)
from flowasd.numerics import Tensor
from flowasd.numerics.gradcheck import check_gradients
from flowasd.training import TrainConfig

nll_lists = st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=12)


def value(t):
    return t.item()


class TestHandExamples:
    def test_nll(self):
        assert value(loss_nll([2.0, 4.0])) == 3.0
        assert value(loss_nll([1.25])) == 1.25

    def test_threshold(self):
        assert value(loss_oe_threshold([2.0, 4.0], [3.0, 10.0], 5.0)) == 0.0
        assert value(loss_oe_threshold([1.0], [0.5, 0.7], 5.0)) == pytest.approx(0.4, abs=1e-15)
        assert value(loss_oe_threshold([2.0, 4.0], [5.0, 7.0], 5.0)) == 3.0

    def test_modified(self):
        assert value(loss_oe_modified([2.0, 4.0], [3.0, 3.5, 6.0], 5.0, 0.5)) == 1.375
        assert value(loss_oe_modified([2.0, 4.0], [4.0, 4.5], 5.0, 0.5)) == 3.0

    def test_empty_target(self):
        with pytest.raises(EmptyBatchError):
            loss_nll([])
        with pytest.raises(EmptyBatchError):
            loss_oe_modified([], [1.0], 5.0)

    def test_empty_outliers_reduce_to_nll(self):
        assert value(loss_oe_threshold([2.0, 4.0], [], 5.0)) == 3.0
        assert value(loss_oe_modified([2.0, 4.0], [], 5.0)) == 3.0

    def test_k_range(self):
        with pytest.raises(ValueError):
            loss_oe_modified([1.0], [0.0], 5.0, k=1.0)
        with pytest.raises(ValueError):
            LossSpec("oe_modified", c=1.0, k=0.0)
        loss_oe_modified([1.0], [0.0], 5.0, k=1.0, max_gate=False)

    def test_infinite_non_qualifying_outlier_is_ignored(self):
        assert value(loss_oe_threshold([1.0], [np.inf, 0.5], 5.0)) == 0.5


class TestLossSpec:
    def test_missing_threshold(self):
        spec = LossSpec("oe_threshold")
        with pytest.raises(ConfigError):
            spec.validate()

    def test_dispatch(self):
        t, o = Tensor([2.0, 4.0]), Tensor([3.0, 3.5, 6.0])
        loss, q = LossSpec("oe_modified", c=5.0, k=0.5)(t, o)
        assert loss.item() == 1.375 and q == 2
        loss, q = LossSpec("oe_threshold", c=5.0)(t, o)
        assert loss.item() == pytest.approx(3.0 - 3.25) and q == 2
        loss, q = LossSpec("nll_only")(t, o)
        assert loss.item() == 3.0 and q == 0

    def test_bad_kind(self):
        with pytest.raises(ValueError):
            LossSpec("kl")


class TestProperties:
    @settings(max_examples=100, deadline=None)
    @given(target=nll_lists, outlier=nll_lists, c=st.floats(-60, 60), k=st.floats(0.01, 0.99))
    def test_modified_with_k_one_and_no_max_gate_is_threshold(self, target, outlier, c, k):
        a = value(loss_oe_modified(target, outlier, c, 1.0, max_gate=False))
        b = value(loss_oe_threshold(target, outlier, c))
        assert a == b

    @settings(max_examples=100, deadline=None)
    @given(outlier=nll_lists, c1=st.floats(-60, 60), c2=st.floats(-60, 60))
    def test_qualifying_set_monotone_in_c(self, outlier, c1, c2):
        lo, hi = sorted((c1, c2))
        assert np.all(qualifying(outlier, lo) <= qualifying(outlier, hi))

    @settings(max_examples=100, deadline=None)
    @given(target=nll_lists, outlier=nll_lists, c=st.floats(-60, 60), k=st.floats(0.01, 0.99))
    def test_modified_minus_threshold(self, target, outlier, c, k):
        # with max(target) above every outlier both gates pick the same set
        target = target + [100.0]
        gate = np.asarray(outlier) < c
        l5 = value(loss_oe_modified(target, outlier, c, k))
        l4 = value(loss_oe_threshold(target, outlier, c))
        expected = (1 - k) * np.mean(np.asarray(outlier)[gate]) if gate.any() else 0.0
        assert l5 - l4 == pytest.approx(expected, abs=1e-9)


class TestGradients:
    @pytest.mark.parametrize("kind", ["threshold", "modified"])
    def test_gate_is_constant(self, kind):
        target = Tensor([2.0, 4.0], requires_grad=True)
        outlier = Tensor([3.0, 3.5, 6.0, 4.5], requires_grad=True)
        if kind == "threshold":
            loss, scale, expected_gate = loss_oe_threshold(target, outlier, 5.0), 1.0, [1, 1, 0, 1]
        else:
            loss, scale, expected_gate = loss_oe_modified(target, outlier, 5.0, 0.5), 0.5, [1, 1, 0, 0]
        loss.backward()
        n = sum(expected_gate)
        expected = [-scale / n if g else 0.0 for g in expected_gate]
        np.testing.assert_allclose(outlier.grad, expected, rtol=1e-15)
        assert outlier.grad[2] == 0.0
        np.testing.assert_allclose(target.grad, [0.5, 0.5])

    def test_finite_difference(self):
        rng = np.random.default_rng(0)
        target = Tensor(rng.normal(size=5), requires_grad=True)
        outlier = Tensor(rng.normal(size=6) + 0.5, requires_grad=True)
        # keep every value well away from the gate boundaries
        assert check_gradients(lambda: loss_oe_modified(target, outlier, 0.8, 0.5), [target, outlier]) < 1e-6


class TestCalibration:
    def test_within_final_epoch_range(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(300, 4))
        cfg = TrainConfig(warmup_epochs=3, batch_size=32, learning_rate=1e-3, model_overrides={"hidden_units": 8})
        cal = calibrate(x, cfg)
        assert min(cal.batch_means) <= cal.c <= max(cal.batch_means)
        assert cal.epochs == 3
        assert calibrate_c(x, cfg) == cal.c

    def test_empty(self):
        with pytest.raises(CalibrationFailed):
            calibrate_c(np.zeros((0, 4)), TrainConfig())

    def test_divergence(self):
        x = np.random.default_rng(2).normal(size=(64, 4))
        x[:, 0] = 1e300
        with pytest.raises(CalibrationFailed):
            calibrate_c(x, TrainConfig(warmup_epochs=1, model_overrides={"hidden_units": 8}))
