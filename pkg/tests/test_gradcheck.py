import math

import numpy as np
import pytest

from mu2.gradcheck import (
    _build_dts,
    central_difference,
    check_all,
    check_op,
    error_curve,
    register,
    registered_ops,
    relative_errors,
    unregister,
)


def test_central_difference_matches_closed_form():
    # f(x) = -log softmax(x)[2]; gradient is softmax(x) - onehot(2)
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=6)

    def f(x):
        shifted = x - x.max()
        return float(-(shifted[2] - math.log(np.exp(shifted).sum())))

    numeric = central_difference(f, x0, 1e-5)
    probs = np.exp(x0 - x0.max())
    probs /= probs.sum()
    analytic = probs.copy()
    analytic[2] -= 1.0
    assert np.max(np.abs(numeric - analytic)) < 1e-8


def test_central_difference_rejects_non_finite():
    def f(x):
        return float("inf") if x[0] > 0.5 else float(x[0])

    with pytest.raises(ValueError, match="non-finite"):
        central_difference(f, np.array([0.5]), 1e-3)


def test_central_difference_rejects_bad_step():
    with pytest.raises(ValueError, match="step"):
        central_difference(lambda x: 0.0, np.zeros(2), 0.0)


def test_relative_error_floor():
    errs = relative_errors(np.array([0.0]), np.array([1e-9]))
    assert abs(errs[0] - 1e-9 / 1e-7) < 1e-12


def test_registry_contents():
    ops = registered_ops()
    for name in ("rpe_attention", "svr_layer", "dts", "dmtp", "tta_layer",
                 "encoder_projections", "dpo_loss"):
        assert name in ops


def test_unknown_op_rejected():
    with pytest.raises(ValueError, match="unknown op"):
        check_op("not_an_op")


def test_all_registered_ops_pass():
    for report in check_all(seed=0):
        assert report.passed, report.summary()
        assert report.failing == []


def test_report_is_deterministic():
    a = check_op("dts", seed=3)
    b = check_op("dts", seed=3)
    assert a.max_errors == b.max_errors
    assert a.passed and b.passed


def test_seed_changes_problem():
    a = check_op("dpo_loss", seed=1)
    b = check_op("dpo_loss", seed=2)
    assert a.max_errors != b.max_errors


def test_corrupted_backward_is_caught():
    class CorruptedSelector:
        def __init__(self, seed):
            self.inner = _build_dts(seed)
            self.x0 = self.inner.x0
            self.slices = self.inner.slices

        def value(self, x):
            return self.inner.value(x)

        def analytic(self, x):
            grad = self.inner.analytic(x).copy()
            sl = self.slices["weight"]
            grad[sl] = grad[sl] * 1.5 + 0.01
            return grad

    register("corrupted_selector", CorruptedSelector)
    try:
        report = check_op("corrupted_selector", seed=0)
        assert not report.passed
        assert report.failing == ["weight"]
        assert "weight" in report.summary()
        assert "tokens" not in report.failing
    finally:
        unregister("corrupted_selector")


def test_error_curve_decreases():
    curve = error_curve("dts", seed=0, steps=(1e-3, 1e-4, 1e-5))
    assert [s for s, _ in curve] == [1e-3, 1e-4, 1e-5]
    errs = [e for _, e in curve]
    assert errs[1] <= errs[0] and errs[2] <= errs[1]


def test_per_tensor_errors_cover_params_and_inputs():
    report = check_op("svr_layer", seed=0)
    names = set(report.max_errors)
    assert "tokens" in names
    assert "attn.bias.table" in names
    assert any(n.startswith("ffn") for n in names)
