import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from kllab.errors import OutOfDomain
from kllab.zoo import eval_grad, make_field, strong_slope, zoo_entries

SMOOTH = ["power:1.5", "power:2", "power:3", "power:4", "quad:1,4", "quad:2,1,1,3", "flat:0.5"]
coords = st.floats(-1.5, 1.5, allow_nan=False)


def fd_grad(field, x, h=1e-6):
    e = np.eye(2) * h
    return np.array([(field(x + e[i]) - field(x - e[i])) / (2 * h) for i in range(2)])


@pytest.mark.parametrize("spec", SMOOTH + ["norm"])
def test_gradient_matches_finite_differences(spec):
    f = make_field(spec)
    rng = np.random.default_rng(1)
    for x in rng.uniform(-1, 1, size=(20, 2)):
        if np.linalg.norm(x) < 0.2:
            continue
        assert np.allclose(f.grad(x), fd_grad(f, x), rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("spec", SMOOTH + ["norm"])
def test_vectorised_evaluation_agrees_with_pointwise(spec):
    f = make_field(spec)
    X = np.random.default_rng(2).normal(size=(7, 2))
    assert np.allclose(f.value(X), [f(x) for x in X])
    assert np.allclose(f.grad(X), [f.grad(x) for x in X])


ORACLE_CASES = [(spec, r) for spec in ("power:1.5", "power:3", "quad:1,4", "norm")
                for r in (0.5, 1e-2, 1e-5)] + [("flat:0.5", 1e-2), ("flat:0.5", 1e-5)]


@pytest.mark.parametrize("spec,r", ORACLE_CASES)
def test_u_oracle_is_inverse_min_slope_on_level(spec, r):
    f = make_field(spec)
    th = np.linspace(0, 2 * math.pi, 721)
    D = np.column_stack([np.cos(th), np.sin(th)])
    lo, hi = np.zeros(len(th)), np.full(len(th), 10.0)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        below = f.value(mid[:, None] * D) < r
        lo, hi = np.where(below, mid, lo), np.where(below, hi, mid)
    slopes = np.linalg.norm(f.grad(0.5 * (lo + hi)[:, None] * D), axis=1)
    assert 1.0 / slopes.min() == pytest.approx(float(f.u_oracle(r)), rel=1e-6)


@pytest.mark.parametrize("spec", ["power:1.5", "power:2", "power:3", "quad:1,4", "flat:0.5"])
def test_phi_oracle_derivative(spec):
    f = make_field(spec)
    r = np.geomspace(1e-6, 1e-2, 9)
    h = 1e-6 * r
    num = (f.phi_oracle(r + h) - f.phi_oracle(r - h)) / (2 * h)
    assert np.allclose(num, f.dphi_oracle(r), rtol=1e-6)


@pytest.mark.parametrize("spec", ["power:1.5", "power:2", "power:4", "quad:2,1,1,3", "norm"])
@pytest.mark.parametrize("lam", [0.1, 1.0])
def test_prox_oracle_minimises_moreau_objective(spec, lam):
    f = make_field(spec)
    x = np.array([0.7, -0.4])
    p = f.prox_oracle(x, lam)

    def obj(y):
        return float(f(y)) + np.sum((y - x) ** 2) / (2 * lam)

    res = minimize(obj, x, method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-15,
                                                            "maxiter": 4000})
    assert obj(p) <= res.fun + 1e-10


@pytest.mark.parametrize("spec", ["power:1.5", "power:3", "quad:2,1,1,3", "norm"])
def test_flow_oracle_satisfies_ode(spec):
    f = make_field(spec)
    x0 = np.array([0.9, 0.3])
    for t in (0.05, 0.2, 0.4):
        h = 1e-6
        v = (f.flow_oracle(x0, t + h) - f.flow_oracle(x0, t - h)) / (2 * h)
        assert np.allclose(v, -f.grad(f.flow_oracle(x0, t)), rtol=1e-5, atol=1e-7)


@settings(max_examples=60)
@given(coords, coords)
def test_flat_is_semiconvex_along_lines(x, y):
    f = make_field("flat:0.5")
    p = np.array([x, y])
    d = np.array([0.6, 0.8])
    h = 1e-3
    second = (f(p + h * d) - 2 * f(p) + f(p - h * d)) / h ** 2
    assert second >= -f.alpha - 1e-6


@given(coords, coords)
def test_flat_log_excess_is_exact(x, y):
    f = make_field("flat:0.5")
    t = math.hypot(x, y)
    expect = -t ** -0.5 if t > 0 else -math.inf
    assert f.log_excess(np.array([x, y])) == pytest.approx(expect)


def test_flat_is_flat_at_origin():
    f = make_field("flat:0.5")
    assert f((1e-3, 0.0)) < 1e-13
    assert np.linalg.norm(f.grad((1e-3, 0.0))) < 1e-9
    assert f((0.0, 0.0)) == 0.0


@pytest.mark.parametrize("spec,x,expect", [
    ("power:2", (0.3, 0.4), 1.0),
    ("norm", (0.0, 0.0), 0.0),
    ("norm", (1.0, 1.0), 1.0),
    ("quad:1,4", (0.0, 0.5), 2.0),
])
def test_strong_slope(spec, x, expect):
    assert strong_slope(make_field(spec), x) == pytest.approx(expect, abs=1e-4)


def test_eval_grad_returns_pair_and_checks_domain():
    f = make_field("power:2")
    v, g = eval_grad(f, (1.0, 2.0))
    assert v == pytest.approx(5.0)
    assert np.allclose(g, [2.0, 4.0])
    with pytest.raises(OutOfDomain):
        eval_grad(f, (np.nan, 0.0))


@pytest.mark.parametrize("spec", ["power:5", "power:1", "flat:1.5", "quad:1,-1", "quad:1,2,3",
                                  "tri", "quad:1,2,3,4"])
def test_make_field_rejects(spec):
    with pytest.raises(ValueError):
        make_field(spec)


@pytest.mark.parametrize("spec", ["power:2", "power:3", "quad:1,4", "norm", "flat:0.5"])
def test_name_roundtrip(spec):
    assert make_field(make_field(spec).name).name == make_field(spec).name


def test_zoo_entries_list_builtins():
    names = [e.name for e in zoo_entries()]
    assert names == ["power:2", "quad:1,4", "norm", "flat:0.5", "cex"]
    assert all(isinstance(e.formulas, dict) and e.formulas for e in zoo_entries())


def test_norm_shifted_min_norm_at_kink():
    f = make_field("norm")
    assert np.allclose(f.min_norm_shifted((0.0, 0.0), (0.5, 0.0)), 0.0)
    assert np.allclose(f.min_norm_shifted((0.0, 0.0), (3.0, 4.0)), [2.4, 3.2])


def test_lipschitz_bounds_hessian():
    from kllab.algorithms import hessian_bound

    for spec, R in (("power:3", 1.0), ("power:4", 1.2), ("quad:1,4", 2.0), ("flat:0.5", 1.0)):
        f = make_field(spec)
        assert hessian_bound(f, R) <= f.lipschitz(R) * (1 + 1e-6)
