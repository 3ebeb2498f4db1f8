import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kllab.algorithms import (
    estimate_limit,
    gradient_run,
    hessian_bound,
    prox,
    proximal_run,
    step_estimates_check,
)
from kllab.errors import CertFail, DescentViolation, StepTooLarge
from kllab.zoo import make_field

coords = st.floats(-2.0, 2.0, allow_nan=False)


@settings(max_examples=40)
@given(coords, coords, st.floats(0.01, 5.0))
def test_generic_prox_matches_closed_form(x, y, lam):
    for spec in ("quad:2,1,1,3", "power:3"):
        f = make_field(spec)
        p = prox(f, lam, (x, y))
        assert np.allclose(p, f.prox_oracle(np.array([x, y]), lam), atol=1e-8)


@given(coords, coords, st.floats(0.01, 3.0))
def test_norm_prox_is_shrinkage(x, y, lam):
    v = np.array([x, y])
    s = np.linalg.norm(v)
    expect = v * max(0.0, 1 - lam / s) if s > 0 else v
    assert np.allclose(prox(make_field("norm"), lam, v), expect, atol=1e-9)


def test_prox_is_nonexpansive():
    rng = np.random.default_rng(3)
    f = make_field("power:4")
    for _ in range(20):
        a, b = rng.normal(size=(2, 2))
        assert np.linalg.norm(prox(f, 0.3, a) - prox(f, 0.3, b)) <= np.linalg.norm(a - b) + 1e-9


def test_prox_rejects_large_step_on_semiconvex_field():
    f = make_field("flat:0.5")
    with pytest.raises(StepTooLarge):
        prox(f, 2.0 / f.alpha, (0.3, 0.0))
    with pytest.raises(ValueError):
        prox(f, -1.0, (0.3, 0.0))


def test_flat_prox_stationarity():
    f = make_field("flat:0.5")
    lam = 0.5 / f.alpha
    x = np.array([0.4, 0.3])
    p = prox(f, lam, x)
    assert np.linalg.norm(f.grad(p) + (p - x) / lam) <= 1e-9


@pytest.mark.parametrize("q", [0.3, 0.5, 0.9])
def test_estimate_limit_on_geometric_sequence(q):
    k = np.arange(40)
    values = 2.0 + q ** k
    points = np.column_stack([1.0 + q ** k, -q ** k])
    L, P = estimate_limit(values, points)
    assert L == pytest.approx(2.0, abs=1e-12)
    assert np.allclose(P, [1.0, 0.0], atol=1e-12)


def test_estimate_limit_on_stationary_run():
    L, P = estimate_limit([1.0, 1.0, 1.0], [[0.0, 1.0]] * 3)
    assert L == 1.0 and np.allclose(P, [0.0, 1.0])


@pytest.mark.parametrize("lam", [0.1, 0.5, 2.0])
def test_proximal_certificate_on_power(lam):
    f = make_field("power:2")
    run, rep = proximal_run(f, (0.0, 1.0), lam, np.sqrt, 25)
    assert rep.passed
    assert run.Y.shape == (26, 2)
    # radial iterates: equality in the per-step certificate
    assert np.max(np.abs(run.step_margin)) <= 1e-9
    assert run.length == pytest.approx(1.0 - np.linalg.norm(run.Y[-1]))


def test_proximal_certificate_with_schedule():
    f = make_field("power:2")
    run, rep = proximal_run(f, (1.0, 1.0), lambda k: 0.1 + 0.05 * k, f.phi_oracle, 30,
                            limit_value=0.0)
    assert np.allclose(run.step[1:4], [0.1, 0.15, 0.2])
    assert rep.passed


def test_proximal_certificate_fails_for_wrong_phi():
    f = make_field("power:2")
    run, rep = proximal_run(f, (0.0, 1.0), 0.5, lambda r: 0.1 * np.sqrt(r), 10)
    assert rep.verdict == "FAIL"
    assert rep.margin < 0
    with pytest.raises(CertFail) as err:
        proximal_run(f, (0.0, 1.0), 0.5, lambda r: 0.1 * np.sqrt(r), 10, strict=True)
    assert err.value.details["index"] == rep.extra["index"]


def test_gradient_run_rejects_beta():
    with pytest.raises(ValueError):
        gradient_run(make_field("quad:1,4"), (1.0, 1.0), t=0.3, beta=0.5, K=5)


def test_gradient_run_backtracking_descends():
    f = make_field("power:4")
    run, rep = gradient_run(f, (1.0, 0.5), t=None, beta=0.4, phi=f.phi_oracle, K=50)
    assert rep.passed
    assert np.all(np.diff(run.f) < 0)


def test_gradient_run_detects_descent_violation():
    f = make_field("quad:1,4")
    run, rep = gradient_run(f, (1.0, 1.0), t=0.6, beta=0.5, K=5, L=0.1)
    assert rep.verdict == "FAIL"
    assert rep.extra["kind"] == "descent"
    with pytest.raises(DescentViolation):
        gradient_run(f, (1.0, 1.0), t=0.6, beta=0.5, K=5, L=0.1, strict=True)


@pytest.mark.parametrize("spec", ["quad:1,1", "quad:1,4", "power:3"])
def test_length_bound_with_oracle_phi(spec):
    f = make_field(spec)
    L = f.lipschitz(1.5)
    t = 1.0 / L
    run, rep = gradient_run(f, (0.8, -0.6), t=t, beta=0.5, phi=f.phi_oracle, K=100, L=L)
    assert rep.passed
    assert run.length <= (f.phi_oracle(run.f[0]) - f.phi_oracle(run.f[-1])) / 0.5 + 1e-9


@pytest.mark.parametrize("spec", ["quad:1,4", "power:3", "power:4"])
def test_step_estimates(spec):
    f = make_field(spec)
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, size=(300, 2))
    L = f.lipschitz(3.0)
    rep = step_estimates_check(f, X, rng.uniform(0, 2 / L, 300), L=L)
    assert rep.passed


def test_step_estimates_fail_with_small_constant():
    f = make_field("quad:1,4")
    X = np.random.default_rng(1).uniform(-1, 1, size=(100, 2))
    rep = step_estimates_check(f, X, 0.4, L=1.0)
    assert rep.verdict == "FAIL"


@pytest.mark.parametrize("spec,R,expect", [("quad:1,4", 1.0, 4.0), ("power:2", 1.0, 2.0),
                                           ("power:4", 1.0, 12.0)])
def test_hessian_bound(spec, R, expect):
    assert hessian_bound(make_field(spec), R) == pytest.approx(expect, rel=1e-4)
