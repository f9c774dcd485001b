#!/usr/bin/env python3
"""
Test bias metrics against the published estimator comparison table
"""

import pytest

from models.schemas import EffectEstimate, Interval
from services.bias_metrics import (
    bias_quantities,
    bias_reduction,
    build_bias_report,
    delta_percent_of_max_overestimate,
    is_underestimate,
    rr_percent_bias,
)
from utils.errors import MetricInputError

# Exposed share rate implied by the published table
P1 = 1.3037e-03

# label -> (published p0, published RR)
PUBLISHED = {
    "AMs": (1.751e-04, 7.44),
    "Ms": (1.677e-04, 7.77),
    "AM": (1.124e-04, 11.59),
    "M": (9.989e-05, 13.05),
    "As": (1.489e-04, 8.75),
    "Ds": (1.469e-04, 8.87),
    "A": (6.501e-05, 20.04),
    "D": (5.806e-05, 22.45),
    "naive": (4.567e-05, 28.54),
    "exp": (1.920e-04, 6.79),
}


def _published_estimates():
    return {label: EffectEstimate(label=label, p0=p0, p1=P1) for label, (p0, _) in PUBLISHED.items()}


@pytest.mark.parametrize("label", sorted(PUBLISHED))
def test_published_rr_recomputed_from_p0(label):
    """RR = p1 / p0 reproduces every published row within rounding"""
    p0, rr = PUBLISHED[label]
    estimate = EffectEstimate(label=label, p0=p0, p1=P1)
    assert estimate.rr == pytest.approx(rr, abs=0.05)


def test_experimental_row_arithmetic():
    estimate = EffectEstimate(label="exp", p0=1.920e-04, p1=P1)
    assert estimate.rr == pytest.approx(6.79, abs=0.01)
    assert estimate.delta == pytest.approx(1.111e-03, abs=1e-6)


def test_null_effect():
    estimate = EffectEstimate(label="x", p0=0.02, p1=0.02)
    assert estimate.rr == 1.0
    assert estimate.delta == 0.0


def test_rr_percent_bias_naive_headline():
    assert rr_percent_bias(28.54, 6.79) == pytest.approx(320.0, abs=1.0)


def test_rr_percent_bias_self_and_best_model():
    assert rr_percent_bias(6.79, 6.79) == 0.0
    assert rr_percent_bias(7.44, 6.79) == pytest.approx(9.6, abs=0.05)
    assert rr_percent_bias(7.44, 6.79) < 10.0


def test_rr_percent_bias_rejects_nonpositive_reference():
    with pytest.raises(MetricInputError):
        rr_percent_bias(2.0, 0.0)


def test_delta_percent_of_max_naive():
    assert delta_percent_of_max_overestimate(1.257e-03, 1.111e-03, 1.920e-04) == pytest.approx(76.0, abs=1.0)
    assert delta_percent_of_max_overestimate(3e-4, 3e-4, 1e-3) == 0.0


def test_underestimate_is_flagged_as_negative_percent():
    assert delta_percent_of_max_overestimate(1.0e-03, 1.111e-03, 1.920e-04) < 0
    assert is_underestimate(1.0e-03, 1.111e-03)
    assert not is_underestimate(1.2e-03, 1.111e-03)


def test_bias_reduction_published_models():
    assert bias_reduction(7.44, 28.54, 6.79) == pytest.approx(97.0, abs=1.0)
    assert bias_reduction(8.87, 28.54, 6.79) == pytest.approx(91.0, abs=1.0)
    assert bias_reduction(6.79, 28.54, 6.79) == 100.0


def test_bias_reduction_undefined_without_naive_bias():
    with pytest.raises(MetricInputError):
        bias_reduction(7.0, 6.79, 6.79)


def test_bias_report_rows_follow_input_order():
    estimates = _published_estimates()
    report = build_bias_report(estimates)
    assert [row.label for row in report.rows] == list(estimates)
    rows = {row.label: row for row in report.rows}
    assert rows["exp"].rr_percent_bias == 0.0
    assert rows["exp"].bias_reduction == 100.0
    assert rows["naive"].rr_percent_bias == pytest.approx(320.0, abs=1.5)
    assert rows["naive"].bias_reduction == pytest.approx(0.0, abs=1e-9)
    assert rows["AMs"].bias_reduction == pytest.approx(97.0, abs=1.0)
    assert rows["naive"].delta_percent_of_max == pytest.approx(76.0, abs=1.0)
    assert report.flags == []


def test_bias_report_ordering_of_models():
    """Covariate sets with prior shares beat demographics, which beat naive"""
    rows = {row.label: row for row in build_bias_report(_published_estimates()).rows}
    assert rows["naive"].rr_percent_bias > rows["D"].rr_percent_bias > rows["Ds"].rr_percent_bias
    assert rows["A"].rr_percent_bias > rows["AMs"].rr_percent_bias


def test_bias_report_requires_experimental_estimate():
    estimates = _published_estimates()
    del estimates["exp"]
    with pytest.raises(MetricInputError):
        build_bias_report(estimates)


def test_bias_report_without_naive_reference():
    estimates = _published_estimates()
    del estimates["naive"]
    report = build_bias_report(estimates)
    assert "no_naive_reference" in report.flags
    assert all(row.bias_reduction is None for row in report.rows)


def test_bias_report_attaches_intervals():
    estimates = _published_estimates()
    interval = Interval(point=320.0, low=300.0, high=340.0, sd=10.0, n_replicates=50)
    report = build_bias_report(estimates, {"naive.rr_percent_bias": interval})
    rows = {row.label: row for row in report.rows}
    assert rows["naive"].ci["rr_percent_bias"].low == 300.0
    assert rows["AMs"].ci == {}


def test_bias_quantities_keys():
    values = bias_quantities(_published_estimates())
    assert values["naive.rr_percent_bias"] == pytest.approx(320.0, abs=1.5)
    assert values["exp.rr_abs_diff"] == 0.0
    assert bias_quantities({"naive": _published_estimates()["naive"]}) == {}


@pytest.mark.parametrize("offset", [0.5, 2.0, 5.0])
def test_metrics_flip_sign_around_the_experimental_estimate(offset):
    rr_exp, delta_exp, p0_exp = 6.79, 1.111e-03, 1.920e-04
    assert rr_percent_bias(rr_exp + offset, rr_exp) == pytest.approx(-rr_percent_bias(rr_exp - offset, rr_exp))
    shift = offset * 1e-4
    over = delta_percent_of_max_overestimate(delta_exp + shift, delta_exp, p0_exp)
    under = delta_percent_of_max_overestimate(delta_exp - shift, delta_exp, p0_exp)
    assert over == pytest.approx(-under)
    assert is_underestimate(delta_exp - shift, delta_exp) and not is_underestimate(delta_exp + shift, delta_exp)


@pytest.mark.parametrize("scale", [1e-3, 0.5, 40.0])
def test_metrics_ignore_a_common_rescaling(scale):
    assert rr_percent_bias(20.04 * scale, 6.79 * scale) == pytest.approx(rr_percent_bias(20.04, 6.79))
    assert delta_percent_of_max_overestimate(1.2e-3 * scale, 1.1e-3 * scale, 1.9e-4 * scale) == pytest.approx(
        delta_percent_of_max_overestimate(1.2e-3, 1.1e-3, 1.9e-4)
    )
    assert bias_reduction(7.44 * scale, 28.54 * scale, 6.79 * scale) == pytest.approx(bias_reduction(7.44, 28.54, 6.79))


def test_report_recomputes_exactly_from_serialized_estimates():
    estimates = _published_estimates()
    report = build_bias_report(estimates)
    restored = {
        label: EffectEstimate.model_validate_json(estimate.model_dump_json())
        for label, estimate in estimates.items()
    }
    assert build_bias_report(restored).model_dump() == report.model_dump()
