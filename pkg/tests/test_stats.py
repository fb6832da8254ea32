import itertools
import math

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy import stats as sps

from twinflow.behavior import CAR_FOLLOWING_MODELS
from twinflow.demand import AGGRESSIVENESS_TYPES, GAP_TOLERANCE_LEVELS
from twinflow.stats import (
    DegenerateSampleError,
    DimensionMismatchError,
    FactorLevels,
    NonConvergenceError,
    UnknownLevelError,
    build_design_matrix,
    monte_carlo_power,
    ncf_cdf,
    nested_f_test,
    ols_fit,
    one_sample_t,
    power_sample_size,
    regression_power,
    replications_per_cell,
)

NETWORKS = ("arterial4x4", "grid4x4")


def t_two_sided_oracle(t, df):
    """Two-sided p by quadrature of the Student t density (mpmath, 30 digits)."""
    mpmath.mp.dps = 30
    nu = mpmath.mpf(df)
    c = mpmath.gamma((nu + 1) / 2) / (mpmath.sqrt(nu * mpmath.pi) * mpmath.gamma(nu / 2))
    pdf = lambda x: c * (1 + x * x / nu) ** (-(nu + 1) / 2)
    return float(2 * mpmath.quad(pdf, [abs(t), mpmath.inf]))


def full_factorial():
    return [
        FactorLevels(c, a, g, r)
        for c, a, g, r in itertools.product(CAR_FOLLOWING_MODELS, AGGRESSIVENESS_TYPES, GAP_TOLERANCE_LEVELS, NETWORKS)
    ]


# -- t-test ------------------------------------------------------------------


def test_t_textbook_example():
    r = one_sample_t([1.0, 2.0, 3.0], 0.0)
    assert r.t == pytest.approx(2.0 * math.sqrt(3.0), abs=1e-9)
    assert r.df == 2
    assert r.p == pytest.approx(t_two_sided_oracle(r.t, 2), abs=1e-6)
    g = one_sample_t([1.0, 2.0, 3.0], 0.0, tail="greater")
    assert g.p == pytest.approx(r.p / 2, abs=1e-12)


def test_t_symmetric():
    r = one_sample_t([4.0, 6.0, 3.0, 7.0], 5.0)
    assert r.t == 0.0 and r.p == 1.0


def test_t_degenerate():
    with pytest.raises(DegenerateSampleError):
        one_sample_t([2.5, 2.5, 2.5], 0.0)
    with pytest.raises(DegenerateSampleError):
        one_sample_t([1.0], 0.0)


@settings(max_examples=100, deadline=None)
@given(
    xs=st.lists(st.floats(-100, 100), min_size=2, max_size=20),
    shift=st.floats(-50, 50),
    scale=st.floats(0.1, 10),
    mu=st.floats(-10, 10),
)
def test_t_invariances(xs, shift, scale, mu):
    assume(np.std(xs) > 1e-3)
    base = one_sample_t(xs, mu)
    shifted = one_sample_t([x + shift for x in xs], mu + shift)
    scaled = one_sample_t([x * scale for x in xs], mu * scale)
    assert shifted.t == pytest.approx(base.t, rel=1e-6, abs=1e-6)
    assert scaled.t == pytest.approx(base.t, rel=1e-6, abs=1e-6)


@pytest.mark.parametrize("t,df", [(0.5, 3), (2.0, 8), (4.2, 8), (1.7, 30)])
def test_t_p_against_oracle(t, df):
    xs = np.array([-1.0, 1.0] * ((df + 1) // 2) + ([0.0] if (df + 1) % 2 else []))
    # rescale so the statistic equals t exactly
    n = xs.size
    mu0 = -t * xs.std(ddof=1) / math.sqrt(n)
    r = one_sample_t(xs, mu0)
    assert r.df == df and r.t == pytest.approx(t, rel=1e-12)
    assert r.p == pytest.approx(t_two_sided_oracle(t, df), abs=1e-6)


# -- design matrices ---------------------------------------------------------


def expected_onehot_labels():
    C = [f"C[{c}]" for c in CAR_FOLLOWING_MODELS]
    A = [f"A[{a}]" for a in AGGRESSIVENESS_TYPES]
    R = [f"R[{r}]" for r in NETWORKS]
    out = C + A + ["L", "L^2"] + R
    out += [f"{c}:{r}" for c in C for r in R]
    out += [f"{a}:{r}" for a in A for r in R]
    out += [f"L:{r}" for r in R]
    out += [f"{c}:{a}" for c in C for a in A]
    out += [f"{c}:L" for c in C]
    out += [f"{a}:L" for a in A]
    return out


def test_onehot_mode_80_columns():
    dm = build_design_matrix(full_factorial(), "paper")
    assert dm.X.shape == (300, 80)
    assert list(dm.labels) == expected_onehot_labels()
    groups = [5, 6, 1, 1, 2, 10, 12, 2, 30, 5, 6]
    assert sum(groups) == 80


def test_onehot_mode_values():
    cell = FactorLevels("wagner", "courteous_old", 1.18, "grid4x4")
    dm = build_design_matrix([cell], "paper", NETWORKS)
    row = dict(zip(dm.labels, dm.X[0]))
    assert row["C[wagner]"] == 1.0 and row["C[acc]"] == 0.0
    assert row["L^2"] == pytest.approx(1.18**2)
    assert row["C[wagner]:A[courteous_old]"] == 1.0
    assert row["A[courteous_old]:L"] == 1.18
    assert row["L:R[grid4x4]"] == 1.18 and row["L:R[arterial4x4]"] == 0.0


def test_inference_reference_cell():
    cell = FactorLevels("krauss_lookahead", "aggressive_middle_aged", 0.5, "arterial4x4")
    dm = build_design_matrix([cell], "inference", NETWORKS)
    row = dict(zip(dm.labels, dm.X[0]))
    assert row.pop("Intercept") == 1.0
    nonzero = {k for k, v in row.items() if v != 0.0}
    assert nonzero == {"L", "L^2"}  # only the numeric tolerance terms


def test_inference_width_equals_onehot_rank():
    cells = full_factorial()
    onehot = build_design_matrix(cells, "paper")
    inf = build_design_matrix(cells, "inference")
    rank = np.linalg.matrix_rank(onehot.X)
    assert inf.X.shape[1] == rank == np.linalg.matrix_rank(inf.X)


def test_unknown_levels():
    with pytest.raises(UnknownLevelError):
        FactorLevels("idm", "courteous_old", 1.0, "g")
    with pytest.raises(UnknownLevelError):
        FactorLevels("acc", "timid", 1.0, "g")
    with pytest.raises(UnknownLevelError):
        FactorLevels("acc", "courteous_old", 0.9, "g")
    with pytest.raises(UnknownLevelError):
        build_design_matrix([FactorLevels("acc", "courteous_old", 1.0, "x")], networks=["g"])


# -- OLS ---------------------------------------------------------------------


def test_ols_noiseless():
    rng = np.random.default_rng(0)
    X = np.column_stack([np.ones(50), rng.normal(size=(50, 4))])
    beta = np.array([1.0, -2.0, 0.5, 3.0, 0.0])
    y = X @ beta
    m = ols_fit(X, y)
    assert np.allclose(m.coef, beta, atol=1e-12)
    assert np.linalg.norm(m.residuals) <= 1e-9 * np.linalg.norm(y)
    assert m.r_squared == pytest.approx(1.0)
    assert not m.rank_deficient


def test_ols_duplicate_column_flagged():
    rng = np.random.default_rng(1)
    x = rng.normal(size=30)
    X = np.column_stack([np.ones(30), x, x])
    m = ols_fit(X, 2 * x + rng.normal(size=30))
    assert m.rank_deficient and m.rank == 2
    # minimum-norm solution splits the effect evenly
    assert m.coef[1] == pytest.approx(m.coef[2])


def test_ols_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        ols_fit(np.ones((5, 2)), np.ones(4))
    with pytest.raises(DimensionMismatchError):
        ols_fit(np.ones((5, 2)), np.ones(5), labels=["a"])


def test_ols_matches_textbook_se():
    rng = np.random.default_rng(2)
    X = np.column_stack([np.ones(40), rng.normal(size=(40, 2))])
    y = X @ [1.0, 2.0, -1.0] + rng.normal(size=40)
    m = ols_fit(X, y)
    resid = y - X @ m.coef
    s2 = resid @ resid / (40 - 3)
    se = np.sqrt(np.diag(s2 * np.linalg.inv(X.T @ X)))
    assert np.allclose(m.std_err, se, rtol=1e-10)
    assert np.allclose(m.p, 2 * sps.t.sf(np.abs(m.coef / se), 37), rtol=1e-8)


def test_ols_recovery_small():
    rng = np.random.default_rng(3)
    X = np.column_stack([np.ones(100), rng.normal(size=(100, 3))])
    beta = np.array([0.5, 1.0, -1.0, 2.0])
    inside = 0
    for _ in range(200):
        m = ols_fit(X, X @ beta + rng.normal(size=100))
        inside += bool(np.all(np.abs(m.coef - beta) <= 3 * m.std_err))
    assert inside >= 190


def test_nested_f_matches_scipy_anova():
    rng = np.random.default_rng(4)
    x1, x2 = rng.normal(size=(2, 60))
    y = 1 + x1 + 0.3 * x2 + rng.normal(size=60)
    full = ols_fit(np.column_stack([np.ones(60), x1, x2]), y)
    red = ols_fit(np.column_stack([np.ones(60), x1]), y)
    F, p, d1, d2 = nested_f_test(full, red)
    assert (d1, d2) == (1, 57)
    # a single added term: F equals its squared t statistic
    assert F == pytest.approx(full.t[2] ** 2, rel=1e-10)
    assert p == pytest.approx(full.p[2], rel=1e-8)


# -- power -------------------------------------------------------------------


@pytest.mark.parametrize("x,dfn,dfd,nc", [(1.2, 80, 2565, 52.9), (0.5, 3, 10, 0.0), (2.0, 5, 50, 12.0), (1.05, 80, 500, 300.0)])
def test_ncf_cdf_against_scipy(x, dfn, dfd, nc):
    ref = sps.ncf.cdf(x, dfn, dfd, nc) if nc > 0 else sps.f.cdf(x, dfn, dfd)
    assert ncf_cdf(x, dfn, dfd, nc) == pytest.approx(ref, rel=1e-8, abs=1e-12)


def test_power_sample_size_anchor():
    n = power_sample_size(0.02, 0.05, 0.95, 80, 80)
    assert abs(n - 2646) <= 0.02 * 2646
    assert n == 2646
    assert regression_power(n, 0.02, 0.05, 80, 80) >= 0.95 > regression_power(n - 1, 0.02, 0.05, 80, 80)


def test_power_monotone():
    base = power_sample_size(0.05, 0.05, 0.8, 10, 20)
    assert power_sample_size(0.10, 0.05, 0.8, 10, 20) < base
    assert power_sample_size(0.05, 0.10, 0.8, 10, 20) <= base
    assert power_sample_size(0.05, 0.05, 0.9, 10, 20) >= base


def test_power_cap_and_validation():
    with pytest.raises(NonConvergenceError):
        power_sample_size(1e-6, 0.05, 0.95, 80, 80, cap=5000)
    with pytest.raises(ValueError):
        power_sample_size(0.0)
    with pytest.raises(ValueError):
        power_sample_size(0.02, 1.5)


def test_monte_carlo_power_small():
    n = power_sample_size(0.15, 0.05, 0.8, 3, 3)
    sim = monte_carlo_power(n, 0.15, 0.05, 3, 3, n_sims=4000, seed=1)
    assert sim == pytest.approx(regression_power(n, 0.15, 0.05, 3, 3), abs=0.03)


def test_replications():
    assert replications_per_cell(2646, 300) == 9
    assert replications_per_cell(300, 300) == 1
    assert replications_per_cell(301, 300) == 2
    with pytest.raises(ValueError):
        replications_per_cell(10, 0)
