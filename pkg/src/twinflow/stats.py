"""t-tests, factorial design matrices, OLS inference and power analysis."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special
from scipy import stats as sps

from .behavior import CAR_FOLLOWING_MODELS
from .demand import AGGRESSIVENESS_TYPES, GAP_TOLERANCE_LEVELS

__all__ = [
    "StatsError",
    "DegenerateSampleError",
    "UnknownLevelError",
    "DimensionMismatchError",
    "NonConvergenceError",
    "TTestResult",
    "FactorLevels",
    "DesignMatrix",
    "RegressionModel",
    "one_sample_t",
    "build_design_matrix",
    "ols_fit",
    "nested_f_test",
    "ncf_cdf",
    "regression_power",
    "power_sample_size",
    "monte_carlo_power",
    "replications_per_cell",
    "REFERENCE_MODEL",
    "REFERENCE_AGGRESSIVENESS",
]

REFERENCE_MODEL = "krauss_lookahead"
REFERENCE_AGGRESSIVENESS = "aggressive_middle_aged"
AGGRESSIVENESS_LEVELS = tuple(AGGRESSIVENESS_TYPES)


class StatsError(ValueError):
    pass


class DegenerateSampleError(StatsError):
    pass


class UnknownLevelError(StatsError):
    pass


class DimensionMismatchError(StatsError):
    pass


class NonConvergenceError(StatsError):
    pass


# ---------------------------------------------------------------------------
# one-sample t-test


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: int
    n: int
    mean: float
    std: float


def one_sample_t(samples: Sequence[float], mu0: float = 0.0, tail: str = "two") -> TTestResult:
    """Student t-test of ``mean(samples) == mu0``.

    ``tail="greater"`` tests the alternative ``mean > mu0``.
    """
    x = np.asarray(samples, dtype=float)
    n = x.size
    if n < 2:
        raise DegenerateSampleError("need at least two samples")
    if tail not in ("two", "greater"):
        raise ValueError("tail must be 'two' or 'greater'")
    mean = float(x.mean())
    s = float(x.std(ddof=1))
    if s == 0.0 or not np.isfinite(s):
        raise DegenerateSampleError(f"sample variance is zero (all values {x[0]!r})")
    t = (mean - mu0) / (s / math.sqrt(n))
    df = n - 1
    if tail == "two":
        p = float(min(1.0, 2.0 * sps.t.sf(abs(t), df)))
    else:
        p = float(sps.t.sf(t, df))
    return TTestResult(t=t, p=p, df=df, n=n, mean=mean, std=s)


# ---------------------------------------------------------------------------
# design matrices


@dataclass(frozen=True)
class FactorLevels:
    """One cell of the factorial: model C, aggressiveness A, tolerance L, network R."""

    car_following: str
    aggressiveness: str
    gap_tolerance: float
    network: str

    def __post_init__(self):
        if self.car_following not in CAR_FOLLOWING_MODELS:
            raise UnknownLevelError(f"unknown car-following model {self.car_following!r}")
        if self.aggressiveness not in AGGRESSIVENESS_LEVELS:
            raise UnknownLevelError(f"unknown aggressiveness type {self.aggressiveness!r}")
        if not any(abs(self.gap_tolerance - g) < 1e-12 for g in GAP_TOLERANCE_LEVELS):
            raise UnknownLevelError(f"gap tolerance {self.gap_tolerance!r} is not a design point")


@dataclass(frozen=True)
class DesignMatrix:
    X: np.ndarray
    labels: tuple[str, ...]
    mode: str


def _onehot(value: str, levels: Sequence[str], skip: str | None = None) -> list[tuple[str, float]]:
    return [(lv, 1.0 if value == lv else 0.0) for lv in levels if lv != skip]


def build_design_matrix(
    cells: Sequence[FactorLevels],
    mode: str = "inference",
    networks: Sequence[str] | None = None,
) -> DesignMatrix:
    """Second-order design matrix over the four factors.

    ``mode="paper"`` one-hot codes every level of C, A and R, giving the 80
    columns C, A, L, L^2, R, C:R, A:R, L:R, C:A, C:L and A:L.  It is rank
    deficient by construction.  ``mode="inference"`` adds an intercept and
    drops the reference levels (``krauss_lookahead``,
    ``aggressive_middle_aged`` and the first network) for a full-rank matrix.
    """
    if not cells:
        raise StatsError("design needs at least one cell")
    if mode not in ("paper", "inference"):
        raise ValueError("mode must be 'paper' or 'inference'")
    if networks is None:
        networks = list(dict.fromkeys(c.network for c in cells))
    networks = list(networks)
    for c in cells:
        if c.network not in networks:
            raise UnknownLevelError(f"unknown network {c.network!r}")
    ref = mode == "inference"
    c_ref = REFERENCE_MODEL if ref else None
    a_ref = REFERENCE_AGGRESSIVENESS if ref else None
    r_ref = networks[0] if ref else None

    rows = []
    labels: list[str] | None = None
    for cell in cells:
        C = [(f"C[{k}]", v) for k, v in _onehot(cell.car_following, CAR_FOLLOWING_MODELS, c_ref)]
        A = [(f"A[{k}]", v) for k, v in _onehot(cell.aggressiveness, AGGRESSIVENESS_LEVELS, a_ref)]
        R = [(f"R[{k}]", v) for k, v in _onehot(cell.network, networks, r_ref)]
        L = cell.gap_tolerance
        terms: list[tuple[str, float]] = [("Intercept", 1.0)] if ref else []
        terms += C + A + [("L", L), ("L^2", L * L)] + R
        terms += [(f"{c}:{r}", cv * rv) for c, cv in C for r, rv in R]
        terms += [(f"{a}:{r}", av * rv) for a, av in A for r, rv in R]
        terms += [(f"L:{r}", L * rv) for r, rv in R]
        terms += [(f"{c}:{a}", cv * av) for c, cv in C for a, av in A]
        terms += [(f"{c}:L", cv * L) for c, cv in C]
        terms += [(f"{a}:L", av * L) for a, av in A]
        if labels is None:
            labels = [t for t, _ in terms]
        rows.append([v for _, v in terms])
    return DesignMatrix(np.asarray(rows, dtype=float), tuple(labels), mode)


# ---------------------------------------------------------------------------
# OLS


@dataclass(frozen=True)
class RegressionModel:
    labels: tuple[str, ...]
    coef: np.ndarray
    std_err: np.ndarray
    t: np.ndarray
    p: np.ndarray
    r_squared: float
    adj_r_squared: float
    n: int
    rank: int
    df_resid: int
    sigma2: float
    rank_deficient: bool
    residuals: np.ndarray = field(repr=False)

    def table(self) -> list[dict]:
        return [
            {"term": lab, "estimate": float(b), "std_error": float(s), "t": float(t), "p": float(p)}
            for lab, b, s, t, p in zip(self.labels, self.coef, self.std_err, self.t, self.p)
        ]


def ols_fit(X, y, labels: Sequence[str] | None = None, rcond: float | None = None) -> RegressionModel:
    """Least squares with coefficient standard errors and two-sided p-values.

    Rank-deficient designs are solved with the minimum-norm solution and
    flagged; their standard errors come from the pseudo-inverse and only
    estimable combinations are meaningful.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise DimensionMismatchError(f"X {X.shape} and y {y.shape} do not conform")
    n, p = X.shape
    if labels is None:
        labels = tuple(f"x{i}" for i in range(p))
    if len(labels) != p:
        raise DimensionMismatchError("label count differs from column count")
    coef, _, rank, sv = np.linalg.lstsq(X, y, rcond=rcond)
    resid = y - X @ coef
    rss = float(resid @ resid)
    df = n - rank
    has_intercept = bool(np.any(np.all(X == 1.0, axis=0)))
    centred = y - y.mean() if has_intercept else y
    tss = float(centred @ centred)
    r2 = 1.0 - rss / tss if tss > 0 else 1.0
    adj = 1.0 - (1.0 - r2) * (n - (1 if has_intercept else 0)) / df if df > 0 else float("nan")
    if df > 0:
        sigma2 = rss / df
        cov = sigma2 * np.linalg.pinv(X.T @ X)
        se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        with np.errstate(divide="ignore", invalid="ignore"):
            tv = np.where(se > 0, coef / se, np.nan)
        pv = 2.0 * sps.t.sf(np.abs(tv), df)
    else:
        sigma2 = float("nan")
        se = np.full(p, np.nan)
        tv = np.full(p, np.nan)
        pv = np.full(p, np.nan)
    return RegressionModel(
        labels=tuple(labels),
        coef=coef,
        std_err=se,
        t=tv,
        p=pv,
        r_squared=r2,
        adj_r_squared=adj,
        n=n,
        rank=int(rank),
        df_resid=int(df),
        sigma2=sigma2,
        rank_deficient=bool(rank < p),
        residuals=resid,
    )


def nested_f_test(full: RegressionModel, reduced: RegressionModel) -> tuple[float, float, int, int]:
    """F test of the terms present in ``full`` but not in ``reduced``.

    Returns ``(F, p, df_num, df_den)``.
    """
    if full.n != reduced.n:
        raise DimensionMismatchError("models were fitted on different data")
    df_num = full.rank - reduced.rank
    df_den = full.df_resid
    if df_num <= 0 or df_den <= 0:
        raise StatsError("models are not properly nested")
    rss_f = float(full.residuals @ full.residuals)
    rss_r = float(reduced.residuals @ reduced.residuals)
    F = ((rss_r - rss_f) / df_num) / (rss_f / df_den)
    return F, float(sps.f.sf(F, df_num, df_den)), df_num, df_den


# ---------------------------------------------------------------------------
# power analysis


def ncf_cdf(x: float, dfn: float, dfd: float, nc: float, rtol: float = 1e-10) -> float:
    """Noncentral F CDF as a Poisson mixture of regularized incomplete betas.

    Terms are summed outward from the Poisson mode until the Poisson mass
    left on both sides is below ``rtol`` times the running sum.
    """
    if x <= 0:
        return 0.0
    if nc < 0 or dfn <= 0 or dfd <= 0:
        raise ValueError("invalid noncentral F parameters")
    z = dfn * x / (dfn * x + dfd)
    half = nc / 2.0
    if half == 0:
        return float(special.betainc(dfn / 2.0, dfd / 2.0, z))
    mode = int(math.floor(half))

    def weight(j: int) -> float:
        return math.exp(-half + j * math.log(half) - math.lgamma(j + 1))

    def term(j: int) -> float:
        return weight(j) * float(special.betainc(dfn / 2.0 + j, dfd / 2.0, z))

    total = term(mode)
    mass = weight(mode)
    lo, hi = mode - 1, mode + 1
    while True:
        step_mass = 0.0
        if lo >= 0:
            w = weight(lo)
            total += w * float(special.betainc(dfn / 2.0 + lo, dfd / 2.0, z))
            step_mass += w
            lo -= 1
        w = weight(hi)
        total += w * float(special.betainc(dfn / 2.0 + hi, dfd / 2.0, z))
        step_mass += w
        hi += 1
        mass += step_mass
        if 1.0 - mass <= rtol * max(total, 1e-300) or (step_mass < 1e-300 and lo < 0):
            break
        if hi - mode > 100000:
            break
    return min(1.0, max(0.0, total))


def regression_power(n: int, effect_f2: float, alpha: float, tested: int, total: int) -> float:
    """Power of the F test on ``tested`` of ``total`` predictors at sample size ``n``."""
    dfd = n - total - 1
    if dfd < 1:
        return 0.0
    crit = float(sps.f.isf(alpha, tested, dfd))
    return 1.0 - ncf_cdf(crit, tested, dfd, effect_f2 * n)


def power_sample_size(
    effect_f2: float,
    alpha: float = 0.05,
    power: float = 0.95,
    tested_predictors: int = 80,
    total_predictors: int = 80,
    cap: int = 10_000_000,
) -> int:
    """Smallest N whose R²-increase F test reaches ``power``.

    Numerator df is ``tested_predictors``, denominator df is
    ``N - total_predictors - 1`` and the noncentrality is ``effect_f2 * N``.
    """
    if not effect_f2 > 0:
        raise ValueError("effect_f2 must be > 0")
    if not 0 < alpha < 1 or not 0 < power < 1:
        raise ValueError("alpha and power must lie in (0, 1)")
    if not 1 <= tested_predictors <= total_predictors:
        raise ValueError("need 1 <= tested_predictors <= total_predictors")

    def ok(n: int) -> bool:
        return regression_power(n, effect_f2, alpha, tested_predictors, total_predictors) >= power

    lo = total_predictors + 1  # dfd = 0: no test
    hi = lo + 1
    while not ok(hi):
        lo = hi
        hi *= 2
        if hi > cap:
            raise NonConvergenceError(f"required sample size exceeds cap {cap}")
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def monte_carlo_power(
    n: int,
    effect_f2: float,
    alpha: float = 0.05,
    tested_predictors: int = 80,
    total_predictors: int = 80,
    n_sims: int = 10_000,
    seed: int = 0,
    chunk: int = 500,
) -> float:
    """Simulated rejection rate of the F test on synthetic regressions.

    A fixed Gaussian design with an intercept is drawn once; responses are
    the design's signal plus unit noise, with the signal placed so the tested
    block carries noncentrality ``effect_f2 * n``.
    """
    rng = np.random.default_rng(seed)
    k, u = total_predictors, tested_predictors
    X = np.column_stack([np.ones(n), rng.standard_normal((n, k))])
    q_full, _ = np.linalg.qr(X)  # reduced columns (intercept + untested) come first
    n_red = 1 + k - u
    signal = math.sqrt(effect_f2 * n) * q_full[:, -1]
    dfd = n - k - 1
    crit = float(sps.f.isf(alpha, u, dfd))
    hits = 0
    done = 0
    while done < n_sims:
        m = min(chunk, n_sims - done)
        Y = signal[:, None] + rng.standard_normal((n, m))
        proj = q_full.T @ Y
        tot = np.einsum("ij,ij->j", Y, Y)
        rss_full = tot - np.einsum("ij,ij->j", proj, proj)
        ss_test = np.einsum("ij,ij->j", proj[n_red:], proj[n_red:])
        F = (ss_test / u) / (rss_full / dfd)
        hits += int(np.count_nonzero(F > crit))
        done += m
    return hits / n_sims


def replications_per_cell(n: int, cells: int) -> int:
    """Replications needed so that ``cells`` times it reaches ``n``."""
    if cells < 1:
        raise ValueError("cells must be >= 1")
    return -(-int(n) // int(cells))
