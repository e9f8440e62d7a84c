from fractions import Fraction

import numpy as np
import pytest

from medseglatdiff import build_schedule, schedule_from_alphas, schedule_from_spec


def test_single_step_schedule():
    s = build_schedule(1, 0.1, 0.1)
    assert s.alphas.tolist() == [0.9]
    assert s.gammas.tolist() == [0.9]
    assert s.alpha(1) == 0.9
    assert s.gamma(0) == 1.0


def test_three_step_running_product():
    # betas 0.01, 0.02, 0.03 -> alphas 0.99, 0.98, 0.97
    s = build_schedule(3, 0.01, 0.03)
    assert np.allclose(s.alphas, [0.99, 0.98, 0.97], rtol=0, atol=1e-15)
    expected = [0.99, 0.99 * 0.98, 0.99 * 0.98 * 0.97]
    assert np.allclose(s.gammas, expected, rtol=1e-15)
    assert abs(s.gammas[2] - 0.941094) < 1e-6


def test_default_thousand_step_terminal_gamma():
    s = build_schedule(1000, 1e-4, 0.02)
    # independent high-precision product over exact rationals
    betas = np.linspace(1e-4, 0.02, 1000)
    product = Fraction(1)
    for b in betas:
        product *= 1 - Fraction(float(b))
    assert float(product) < 1e-4
    assert abs(s.gamma(1000) - float(product)) / float(product) < 1e-12


def test_gamma_matches_running_product_everywhere():
    s = build_schedule(1000, 1e-4, 0.02)
    running = 1.0
    for t in range(1, 1001):
        running *= s.alpha(t)
        assert abs(s.gamma(t) - running) / running < 1e-12


def test_monotonicity_and_ranges():
    s = build_schedule(500, 1e-4, 0.05)
    assert np.all(np.diff(s.gammas) < 0)
    assert np.all((s.alphas > 0) & (s.alphas < 1))
    assert np.all((s.gammas > 0) & (s.gammas <= 1))


@pytest.mark.parametrize("kwargs", [
    dict(T=0), dict(T=-3),
    dict(T=10, beta_start=0.0), dict(T=10, beta_end=1.0),
    dict(T=10, beta_start=0.5, beta_end=0.1),
    dict(T=10, beta_start=float("nan")),
    dict(T=10, kind="cosine"),
])
def test_invalid_schedules_rejected(kwargs):
    with pytest.raises(ValueError):
        build_schedule(**{"beta_start": 1e-4, "beta_end": 0.02, **kwargs})


def test_step_index_bounds():
    s = build_schedule(10, 1e-4, 0.02)
    with pytest.raises(ValueError):
        s.alpha(0)
    with pytest.raises(ValueError):
        s.alpha(11)
    with pytest.raises(ValueError):
        s.gamma(11)


def test_spec_round_trip_is_bit_exact():
    s = build_schedule(777, 2e-4, 0.015)
    rebuilt = schedule_from_spec(s.spec())
    assert np.array_equal(s.alphas, rebuilt.alphas)
    assert np.array_equal(s.gammas, rebuilt.gammas)


def test_schedule_from_alphas_allows_degenerate():
    s = schedule_from_alphas([1.0, 1.0, 1.0])
    assert s.gamma(3) == 1.0
    with pytest.raises(ValueError):
        s.spec()  # no beta endpoints to serialize
    with pytest.raises(ValueError):
        schedule_from_alphas([1.5])
    with pytest.raises(ValueError):
        schedule_from_alphas([])
