"""Cohort simulation: two longitudinal data-generating processes.

The "simple" process gives every variable a one-month memory; the "complex"
process adds windowed history means (previous 6 months, months 7-24 back, and
everything older, truncated at 30 pre-baseline months) plus a cumulative
treatment average. Both share the baseline law and the event convention:
month-k covariates and treatment determine the event indicator for month k+1,
and follow-up stops at the first event.

Monthly continuous draws use a truncated normal whose location parameter is
applied exactly as the generating equations state it, even where it lands far
outside the truncation interval; the sampler below absorbs those cases.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.special import expit as _scipy_expit
from scipy.special import ndtr, ndtri

from .core import (
    Cohort,
    CovariateSchema,
    CovariateStepParams,
    HistoryBatch,
    ModelSet,
    PersonTrajectory,
    RiskCurve,
    TreatmentStrategy,
)

__all__ = [
    "RngStream",
    "expit",
    "sample_truncated_normal",
    "truncated_normal_transform",
    "sample_baseline",
    "SimpleEquation",
    "ComplexEquation",
    "SimpleScenario",
    "ComplexScenario",
    "scenario",
    "simulate_cohort",
    "ground_truth_risk",
    "DgpModelSet",
]

# Persons are simulated in fixed-size batches; batch b of a run draws from
# stream (seed, b), so results do not depend on how batches are scheduled.
BATCH_SIZE = 131072

# Standardized-bound cutoff beyond which the truncated normal degenerates to
# the boundary nearer the location parameter.
_TAIL_LIMIT = 8.0


@dataclass(frozen=True)
class RngStream:
    """A reproducible substream: same (seed, stream) gives the same draws."""

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,)))


def expit(x):
    """Logistic function 1 / (1 + exp(-x)), saturating without overflow."""
    return _scipy_expit(x)


def truncated_normal_transform(u, mu, sigma, a, b):
    """Map uniforms on [0,1) to Normal(mu, sigma) conditioned on [a, b].

    Inverse-CDF construction, computed in whichever normal tail keeps the
    CDF differences representable. When both standardized bounds lie beyond
    +-8 the distribution is treated as degenerate at the bound nearer mu.
    """
    u = np.asarray(u, dtype=float)
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    if np.any(a > b):
        raise ValueError("require a <= b")

    alpha = (a - mu) / sigma
    beta = (b - mu) / sigma

    upper = alpha > 0  # both bounds above mu: work with survival functions
    lo_cdf = np.where(upper, ndtr(-beta), ndtr(alpha))
    hi_cdf = np.where(upper, ndtr(-alpha), ndtr(beta))
    p = np.clip(lo_cdf + u * (hi_cdf - lo_cdf), 1e-300, 1.0)
    with np.errstate(invalid="ignore"):
        z = np.where(upper, -ndtri(np.clip(hi_cdf - u * (hi_cdf - lo_cdf), 1e-300, 1.0)),
                     ndtri(p))
    x = mu + sigma * z

    x = np.where(alpha >= _TAIL_LIMIT, a, x)
    x = np.where(beta <= -_TAIL_LIMIT, b, x)
    return np.clip(x, a, b)


def sample_truncated_normal(mu, sigma, a, b, rng: np.random.Generator, size=None):
    """Draw from Normal(mu, sigma) conditioned on [a, b]."""
    if size is None:
        size = np.broadcast(np.asarray(mu), np.asarray(a)).shape or None
    u = rng.random(size)
    return truncated_normal_transform(u, mu, sigma, a, b)


# ---------------------------------------------------------------------------
# Baseline covariates (shared by both scenarios)
# ---------------------------------------------------------------------------

SEX_P = 0.8
SMOKING_P = (0.45, 0.40, 0.15)
AGE_MU, AGE_SIGMA, AGE_LO, AGE_HI = 50.0, 12.0, 18.0, 80.0


def sample_baseline(n: int, rng: np.random.Generator):
    """Draw (sex, age, smoking, u) for n people.

    sex ~ Bernoulli(0.8), age ~ truncated normal (50, 12) on [18, 80],
    smoking ~ categorical(0.45, 0.40, 0.15) over scores {0, 1, 2},
    u ~ Uniform(0, 1).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    sex = (rng.random(n) < SEX_P).astype(float)
    age = truncated_normal_transform(rng.random(n), AGE_MU, AGE_SIGMA, AGE_LO, AGE_HI)
    edges = np.cumsum(SMOKING_P[:-1])
    smoking = np.searchsorted(edges, rng.random(n), side="right").astype(float)
    u = rng.random(n)
    return sex, age, smoking, u


# ---------------------------------------------------------------------------
# Generating equations
#
# Field names follow the variables they multiply: for covariate targets the
# cd4/rna/bmi fields act on month k-1 values, for the treatment and outcome
# targets they act on the current month (insti stays lagged in the treatment
# equation). Unused terms default to zero so each equation lists exactly its
# own coefficients.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimpleEquation:
    intercept: float = 0.0
    u: float = 0.0
    sex: float = 0.0
    age: float = 0.0
    age_sq: float = 0.0
    smoking: float = 0.0
    cd4: float = 0.0
    cd4_sq: float = 0.0
    rna: float = 0.0
    rna_sq: float = 0.0
    bmi: float = 0.0
    insti: float = 0.0
    bmi_rna: float = 0.0
    bmi_sex: float = 0.0
    cd4_age: float = 0.0
    # truncated-normal noise for continuous targets; unused for binary ones
    sigma: float = 0.0
    lo: float = 0.0
    hi: float = 0.0

    def predictor(self, *, u, sex, age, smoking, cd4, rna, bmi, insti):
        c = self
        return (c.intercept + c.u * u + c.sex * sex + c.age * age
                + c.age_sq * age * age + c.smoking * smoking
                + c.cd4 * cd4 + c.cd4_sq * cd4 * cd4
                + c.rna * rna + c.rna_sq * rna * rna
                + c.bmi * bmi + c.insti * insti
                + c.bmi_rna * bmi * rna + c.bmi_sex * bmi * sex
                + c.cd4_age * cd4 * age)


@dataclass(frozen=True)
class ComplexEquation:
    intercept: float = 0.0
    u: float = 0.0
    sex: float = 0.0
    age: float = 0.0
    age_sq: float = 0.0
    smoking: float = 0.0
    cd4: float = 0.0
    cd4_sq: float = 0.0
    cd4_m6: float = 0.0
    cd4_m24: float = 0.0
    cd4_old: float = 0.0
    rna: float = 0.0
    rna_sq: float = 0.0
    rna_m6: float = 0.0
    rna_m24: float = 0.0
    rna_old: float = 0.0
    bmi: float = 0.0
    bmi_m6: float = 0.0
    bmi_m24: float = 0.0
    bmi_old: float = 0.0
    insti: float = 0.0
    insti_cumavg: float = 0.0
    bmi_rna: float = 0.0
    bmi_sex: float = 0.0
    cd4_age: float = 0.0
    sigma: float = 0.0
    lo: float = 0.0
    hi: float = 0.0

    def predictor(self, *, u, sex, age, smoking, cd4, rna, bmi, insti, insti_cumavg,
                  cd4_m6, cd4_m24, cd4_old, rna_m6, rna_m24, rna_old,
                  bmi_m6, bmi_m24, bmi_old):
        c = self
        return (c.intercept + c.u * u + c.sex * sex + c.age * age
                + c.age_sq * age * age + c.smoking * smoking
                + c.cd4 * cd4 + c.cd4_sq * cd4 * cd4
                + c.cd4_m6 * cd4_m6 + c.cd4_m24 * cd4_m24 + c.cd4_old * cd4_old
                + c.rna * rna + c.rna_sq * rna * rna
                + c.rna_m6 * rna_m6 + c.rna_m24 * rna_m24 + c.rna_old * rna_old
                + c.bmi * bmi + c.bmi_m6 * bmi_m6 + c.bmi_m24 * bmi_m24
                + c.bmi_old * bmi_old
                + c.insti * insti + c.insti_cumavg * insti_cumavg
                + c.bmi_rna * bmi * rna + c.bmi_sex * bmi * sex
                + c.cd4_age * cd4 * age)


# Pre-baseline dispersion shared by both scenarios.
PRE_CD4 = dict(mu=450.0, sigma=100.0, lo=350.0, hi=800.0)
PRE_RNA = dict(mu=60.0, sigma=30.0, lo=40.0, hi=90.0)


@dataclass(frozen=True)
class SimpleScenario:
    """One-month-memory generating process."""

    include_u: bool = True
    cd4_early: SimpleEquation = SimpleEquation(
        u=-0.8, sex=0.7, age=-0.8, age_sq=-0.05, smoking=0.6,
        cd4=2.0, cd4_sq=0.005, rna=-1.0, bmi=-0.1, insti=0.05,
        bmi_rna=0.1, bmi_sex=0.08, cd4_age=-0.1,
        sigma=100.0, lo=350.0, hi=800.0)
    cd4_late: SimpleEquation = SimpleEquation(
        u=-0.8, sex=0.7, age=-0.8, age_sq=-0.05, smoking=0.6,
        cd4=1.8, cd4_sq=0.008, rna=-1.0, bmi=-0.1, insti=0.05,
        bmi_rna=0.1, bmi_sex=0.08, cd4_age=-0.1,
        sigma=80.0, lo=400.0, hi=800.0)
    rna_early: SimpleEquation = SimpleEquation(
        u=0.5, sex=0.5, age=0.3, age_sq=0.006, smoking=0.8,
        cd4=-0.5, cd4_sq=-0.0001, rna=2.0, bmi=0.3, insti=0.05,
        bmi_rna=0.08, bmi_sex=0.1, cd4_age=-0.01,
        sigma=30.0, lo=40.0, hi=80.0)
    rna_late: SimpleEquation = SimpleEquation(
        u=0.5, sex=0.5, age=0.3, age_sq=0.006, smoking=0.8,
        cd4=-0.5, cd4_sq=-0.0001, rna=1.8, bmi=0.3, insti=0.05,
        bmi_rna=0.08, bmi_sex=0.1, cd4_age=-0.01,
        sigma=20.0, lo=20.0, hi=70.0)
    high_bmi: SimpleEquation = SimpleEquation(
        intercept=-8.0, u=-2.0, sex=0.03, age=0.01, age_sq=0.0001, smoking=0.04,
        cd4=-0.0001, rna=0.001, bmi=10.0, insti=5.0,
        bmi_rna=0.001, bmi_sex=0.004, cd4_age=0.00001)
    treatment: SimpleEquation = SimpleEquation(
        intercept=-4.5, sex=0.5, age=0.01, age_sq=0.0001, smoking=0.1,
        cd4=0.001, rna=0.01, bmi=-7.0, insti=10.0,
        bmi_rna=0.0001, bmi_sex=0.001, cd4_age=0.00001)
    outcome: SimpleEquation = SimpleEquation(
        u=-0.08, sex=0.005, age=0.015, age_sq=0.00000005, smoking=0.025,
        cd4=-0.015, rna=0.03, rna_sq=0.0000004, bmi=0.1, insti=0.09)

    @property
    def name(self) -> str:
        return "simple"

    def cd4_eq(self, k: int) -> SimpleEquation:
        return self.cd4_early if k <= 5 else self.cd4_late

    def rna_eq(self, k: int) -> SimpleEquation:
        return self.rna_early if k <= 5 else self.rna_late


@dataclass(frozen=True)
class ComplexScenario:
    """Full-history generating process with windowed covariate means."""

    include_u: bool = True
    pre_months: int = 30
    cd4_decay: float = 0.995
    rna_growth: float = 1.01
    cd4_early: ComplexEquation = ComplexEquation(
        u=-2.0, sex=0.1, age=-1.0, age_sq=-0.05, smoking=0.3,
        cd4=1.0, cd4_sq=0.005, cd4_m6=0.8, cd4_m24=0.6, cd4_old=0.5,
        rna=-0.8, rna_m6=-0.5, rna_m24=-0.3, rna_old=-0.1,
        bmi=-0.1, bmi_m6=-0.08, bmi_m24=-0.04, bmi_old=-0.02,
        insti=0.05, insti_cumavg=0.02,
        bmi_rna=0.1, bmi_sex=0.08, cd4_age=-0.1,
        sigma=100.0, lo=350.0, hi=800.0)
    cd4_late: ComplexEquation = ComplexEquation(
        u=-2.0, sex=0.1, age=-1.0, age_sq=-0.05, smoking=0.3,
        cd4=1.8, cd4_sq=0.008, cd4_m6=1.0, cd4_m24=0.5, cd4_old=0.2,
        rna=-0.8, rna_m6=-0.5, rna_m24=-0.3, rna_old=-0.1,
        bmi=-0.1, bmi_m6=-0.08, bmi_m24=-0.04, bmi_old=-0.02,
        insti=0.05, insti_cumavg=0.02,
        bmi_rna=0.1, bmi_sex=0.08, cd4_age=-0.1,
        sigma=80.0, lo=400.0, hi=800.0)
    rna_early: ComplexEquation = ComplexEquation(
        u=2.0, sex=1.0, age=1.5, age_sq=0.006, smoking=0.5,
        cd4=-0.5, cd4_sq=-0.0001, cd4_m6=-0.2, cd4_m24=-0.05, cd4_old=-0.01,
        rna=6.0, rna_m6=5.0, rna_m24=3.0, rna_old=2.0,
        bmi=0.3, bmi_m6=0.1, bmi_m24=0.06, bmi_old=0.03,
        insti=0.05, insti_cumavg=0.01,
        bmi_rna=0.08, bmi_sex=0.1, cd4_age=-0.01,
        sigma=30.0, lo=40.0, hi=80.0)
    rna_late: ComplexEquation = ComplexEquation(
        u=2.0, sex=1.0, age=1.5, age_sq=0.006, smoking=0.5,
        cd4=-0.5, cd4_sq=-0.0001, cd4_m6=-0.2, cd4_m24=-0.05, cd4_old=-0.01,
        rna=6.0, rna_m6=5.0, rna_m24=3.0, rna_old=2.0,
        bmi=0.3, bmi_m6=0.1, bmi_m24=0.06, bmi_old=0.03,
        insti=0.05, insti_cumavg=0.01,
        bmi_rna=0.08, bmi_sex=0.1, cd4_age=-0.01,
        sigma=20.0, lo=20.0, hi=70.0)
    high_bmi: ComplexEquation = ComplexEquation(
        intercept=-6.5, u=-1.0, sex=-0.6, age=0.01, age_sq=0.0001, smoking=-0.04,
        cd4=-0.0001, cd4_sq=0.000001, cd4_m6=-0.001, cd4_m24=-0.0001, cd4_old=-0.001,
        rna=0.01, rna_m6=0.01, rna_m24=0.007, rna_old=0.006,
        bmi=4.5, bmi_m6=3.0, bmi_m24=1.6, bmi_old=1.0,
        insti=2.0, insti_cumavg=1.0)
    treatment: ComplexEquation = ComplexEquation(
        intercept=-4.0, sex=0.5, age=0.05, age_sq=0.00005, smoking=0.2,
        cd4=-0.001, cd4_sq=0.0000001, cd4_m6=-0.0001,
        rna=0.001, rna_m6=0.0003,
        bmi=-3.0, bmi_m6=-2.0, bmi_m24=-1.3, bmi_old=-0.8,
        insti=6.0, insti_cumavg=4.0)
    outcome: ComplexEquation = ComplexEquation(
        u=-0.05, sex=0.007, age=0.02, age_sq=0.00000005, smoking=0.03,
        cd4=-0.009, cd4_m6=-0.008, cd4_m24=-0.006, cd4_old=-0.004,
        rna=0.045, rna_sq=0.0000004, rna_m6=0.03, rna_m24=0.025, rna_old=0.02,
        bmi=0.14, bmi_m6=0.11, bmi_m24=0.08, bmi_old=0.06,
        insti=0.13, insti_cumavg=0.11)

    @property
    def name(self) -> str:
        return "complex"

    def cd4_eq(self, k: int) -> ComplexEquation:
        return self.cd4_early if k <= 5 else self.cd4_late

    def rna_eq(self, k: int) -> ComplexEquation:
        return self.rna_early if k <= 5 else self.rna_late


Scenario = Union[SimpleScenario, ComplexScenario]


def _zero_u(scn):
    updates = {}
    for f in dataclasses.fields(scn):
        v = getattr(scn, f.name)
        if isinstance(v, (SimpleEquation, ComplexEquation)) and v.u != 0.0:
            updates[f.name] = dataclasses.replace(v, u=0.0)
    return dataclasses.replace(scn, **updates)


def scenario(name: str, include_u: bool = True) -> Scenario:
    """Build a generating process by name ("simple" or "complex").

    include_u=False zeroes every coefficient on the unmeasured confounder,
    which makes the conditional laws a function of observed history alone.
    """
    if name == "simple":
        scn: Scenario = SimpleScenario(include_u=include_u)
    elif name == "complex":
        scn = ComplexScenario(include_u=include_u)
    else:
        raise ValueError(f"unknown scenario {name!r}")
    if not include_u:
        scn = _zero_u(scn)
    return scn


# ---------------------------------------------------------------------------
# Batch simulation engines
# ---------------------------------------------------------------------------

def _assign_treatment(strategy: TreatmentStrategy, p: np.ndarray, u: np.ndarray) -> np.ndarray:
    # u is always consumed so that strategies share one draw sequence
    if strategy is TreatmentStrategy.ALWAYS_TREAT:
        return np.ones_like(p)
    if strategy is TreatmentStrategy.NEVER_TREAT:
        return np.zeros_like(p)
    return (u < p).astype(float)


def _simulate_simple_batch(scn: SimpleScenario, n: int, K: int,
                           strategy: TreatmentStrategy, rng: np.random.Generator):
    sex, age, smoking, u_var = sample_baseline(n, rng)

    pre_cd4 = truncated_normal_transform(rng.random(n), **PRE_CD4)
    pre_rna = truncated_normal_transform(rng.random(n), **PRE_RNA)
    mu = scn.high_bmi.predictor(u=u_var, sex=sex, age=age, smoking=smoking,
                                cd4=pre_cd4, rna=pre_rna, bmi=0.0, insti=0.0)
    pre_bmi = (rng.random(n) < expit(mu)).astype(float)

    cd4 = np.empty((n, K))
    rna = np.empty((n, K))
    bmi = np.empty((n, K))
    insti = np.empty((n, K))
    event_time = np.zeros(n, dtype=np.int64)

    prev_cd4, prev_rna, prev_bmi = pre_cd4, pre_rna, pre_bmi
    prev_insti = np.zeros(n)
    for k in range(K):
        u1, u2, u3, u4, u5 = (rng.random(n) for _ in range(5))
        lag = dict(u=u_var, sex=sex, age=age, smoking=smoking,
                   cd4=prev_cd4, rna=prev_rna, bmi=prev_bmi, insti=prev_insti)
        eq = scn.cd4_eq(k)
        cd4[:, k] = truncated_normal_transform(u1, eq.predictor(**lag), eq.sigma, eq.lo, eq.hi)
        eq = scn.rna_eq(k)
        rna[:, k] = truncated_normal_transform(u2, eq.predictor(**lag), eq.sigma, eq.lo, eq.hi)
        bmi[:, k] = (u3 < expit(scn.high_bmi.predictor(**lag))).astype(float)

        cur = dict(u=u_var, sex=sex, age=age, smoking=smoking,
                   cd4=cd4[:, k], rna=rna[:, k], bmi=bmi[:, k])
        p_trt = expit(scn.treatment.predictor(insti=prev_insti, **cur))
        insti[:, k] = _assign_treatment(strategy, p_trt, u4)

        p_event = expit(scn.outcome.predictor(insti=insti[:, k], **cur))
        fired = (event_time == 0) & (u5 < p_event)
        event_time[fired] = k + 1

        prev_cd4, prev_rna, prev_bmi = cd4[:, k], rna[:, k], bmi[:, k]
        prev_insti = insti[:, k]

    return dict(sex=sex, age=age, smoking=smoking,
                pre_cd4=pre_cd4, pre_rna=pre_rna, pre_bmi=pre_bmi,
                cd4=cd4, rna=rna, high_bmi=bmi, insti=insti, event_time=event_time)


def _win_mean(mat: np.ndarray, lo: int, hi: int) -> np.ndarray:
    """Mean over matrix columns [lo, hi), clipped at 0; empty windows give 0."""
    lo = max(lo, 0)
    if hi <= lo:
        return np.zeros(mat.shape[0])
    return mat[:, lo:hi].mean(axis=1)


def _simulate_complex_batch(scn: ComplexScenario, n: int, K: int,
                            strategy: TreatmentStrategy, rng: np.random.Generator):
    P = scn.pre_months
    sex, age, smoking, u_var = sample_baseline(n, rng)

    # history matrices over months -P..K-1; column j holds month j-P
    cd4 = np.zeros((n, P + K))
    rna = np.zeros((n, P + K))
    bmi = np.zeros((n, P + K))
    insti_k = np.zeros((n, K))  # treatment exists from month 0 only

    cd4[:, 0] = truncated_normal_transform(rng.random(n), **PRE_CD4)
    rna[:, 0] = truncated_normal_transform(rng.random(n), **PRE_RNA)
    for j in range(1, P):
        cd4[:, j] = cd4[:, j - 1] * scn.cd4_decay
        rna[:, j] = rna[:, j - 1] * scn.rna_growth

    def windows(mat, j):
        return dict(m6=_win_mean(mat, j - 6, j),
                    m24=_win_mean(mat, j - 24, j - 6),
                    old=_win_mean(mat, 0, j - 24))

    def bmi_predictor(j, lag_cd4, lag_rna, lag_bmi):
        w_cd4, w_rna, w_bmi = windows(cd4, j), windows(rna, j), windows(bmi, j)
        return scn.high_bmi.predictor(
            u=u_var, sex=sex, age=age, smoking=smoking,
            cd4=lag_cd4, rna=lag_rna, bmi=lag_bmi, insti=0.0, insti_cumavg=0.0,
            cd4_m6=w_cd4["m6"], cd4_m24=w_cd4["m24"], cd4_old=w_cd4["old"],
            rna_m6=w_rna["m6"], rna_m24=w_rna["m24"], rna_old=w_rna["old"],
            bmi_m6=w_bmi["m6"], bmi_m24=w_bmi["m24"], bmi_old=w_bmi["old"])

    # month -P: one draw with lagged continuous terms set to the month -P
    # values; then evolve through month -1 with treatment held at zero
    mu = bmi_predictor(0, cd4[:, 0], rna[:, 0], np.zeros(n))
    bmi[:, 0] = (rng.random(n) < expit(mu)).astype(float)
    for j in range(1, P):
        mu = bmi_predictor(j, cd4[:, j - 1], rna[:, j - 1], bmi[:, j - 1])
        bmi[:, j] = (rng.random(n) < expit(mu)).astype(float)

    event_time = np.zeros(n, dtype=np.int64)
    for k in range(K):
        j = P + k
        u1, u2, u3, u4, u5 = (rng.random(n) for _ in range(5))
        w_cd4, w_rna, w_bmi = windows(cd4, j), windows(rna, j), windows(bmi, j)
        lag_insti = insti_k[:, k - 1] if k > 0 else np.zeros(n)
        cumavg_insti = _win_mean(insti_k, 0, k)
        shared = dict(u=u_var, sex=sex, age=age, smoking=smoking,
                      cd4_m6=w_cd4["m6"], cd4_m24=w_cd4["m24"], cd4_old=w_cd4["old"],
                      rna_m6=w_rna["m6"], rna_m24=w_rna["m24"], rna_old=w_rna["old"],
                      bmi_m6=w_bmi["m6"], bmi_m24=w_bmi["m24"], bmi_old=w_bmi["old"],
                      insti_cumavg=cumavg_insti)
        lag = dict(cd4=cd4[:, j - 1], rna=rna[:, j - 1], bmi=bmi[:, j - 1],
                   insti=lag_insti, **shared)

        eq = scn.cd4_eq(k)
        cd4[:, j] = truncated_normal_transform(u1, eq.predictor(**lag), eq.sigma, eq.lo, eq.hi)
        eq = scn.rna_eq(k)
        rna[:, j] = truncated_normal_transform(u2, eq.predictor(**lag), eq.sigma, eq.lo, eq.hi)
        bmi[:, j] = (u3 < expit(scn.high_bmi.predictor(**lag))).astype(float)

        cur = dict(cd4=cd4[:, j], rna=rna[:, j], bmi=bmi[:, j], **shared)
        p_trt = expit(scn.treatment.predictor(insti=lag_insti, **cur))
        insti_k[:, k] = _assign_treatment(strategy, p_trt, u4)

        p_event = expit(scn.outcome.predictor(insti=insti_k[:, k], **cur))
        fired = (event_time == 0) & (u5 < p_event)
        event_time[fired] = k + 1

    return dict(sex=sex, age=age, smoking=smoking,
                pre_cd4=cd4[:, P - 1], pre_rna=rna[:, P - 1], pre_bmi=bmi[:, P - 1],
                cd4=cd4[:, P:], rna=rna[:, P:], high_bmi=bmi[:, P:], insti=insti_k,
                event_time=event_time)


def _simulate_batch(scn: Scenario, n: int, K: int, strategy: TreatmentStrategy,
                    rng: np.random.Generator):
    if isinstance(scn, SimpleScenario):
        return _simulate_simple_batch(scn, n, K, strategy, rng)
    return _simulate_complex_batch(scn, n, K, strategy, rng)


def _iter_batches(scn: Scenario, n: int, K: int, strategy: TreatmentStrategy, seed: int):
    for b, start in enumerate(range(0, n, BATCH_SIZE)):
        size = min(BATCH_SIZE, n - start)
        rng = RngStream(seed, b).generator()
        yield start, _simulate_batch(scn, size, K, strategy, rng)


def simulate_cohort(scn: Scenario, n: int, K: int, strategy: TreatmentStrategy,
                    seed: int) -> Cohort:
    """Simulate an n-person cohort over K months under a treatment strategy.

    Identical arguments give byte-identical cohorts. Trajectories stop at the
    first event: a person whose event fires during month k+1 has records for
    months 0..k only.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 1 <= K <= 60:
        raise ValueError("K must be in 1..60")
    persons = []
    for start, batch in _iter_batches(scn, n, K, strategy, seed):
        ev = batch["event_time"]
        for i in range(len(ev)):
            t = int(ev[i])
            months = K if t == 0 else t
            persons.append(PersonTrajectory(
                person_id=start + i,
                sex=int(batch["sex"][i]), age=float(batch["age"][i]),
                smoking=int(batch["smoking"][i]),
                cd4=batch["cd4"][i, :months].copy(),
                rna=batch["rna"][i, :months].copy(),
                high_bmi=batch["high_bmi"][i, :months].copy(),
                insti=batch["insti"][i, :months].copy(),
                event_time=t if t else None,
                pre_baseline=(float(batch["pre_cd4"][i]), float(batch["pre_rna"][i]),
                              float(batch["pre_bmi"][i])),
            ))
    return Cohort(schema=CovariateSchema(horizon=K), persons=tuple(persons),
                  scenario=scn.name)


def ground_truth_risk(scn: Scenario, strategy: TreatmentStrategy, n: int, K: int,
                      seed: int) -> RiskCurve:
    """Empirical cumulative incidence from an n-person simulation.

    With n large (the reference runs use 1e6) this is the ground-truth risk
    under the given strategy.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    counts = np.zeros(K + 1, dtype=np.int64)
    for _, batch in _iter_batches(scn, n, K, strategy, seed):
        counts += np.bincount(batch["event_time"], minlength=K + 1)
    events_by_month = counts[1:]  # index k-1 = events during month k
    return RiskCurve(np.cumsum(events_by_month) / n)


# ---------------------------------------------------------------------------
# Exact-law model set (simple scenario, unmeasured confounder disabled)
# ---------------------------------------------------------------------------

class DgpModelSet(ModelSet):
    """The true conditional laws of the simple process as a ModelSet.

    Only valid when the scenario was built with include_u=False: with the
    unmeasured confounder active the conditionals given observed history
    have no closed form.
    """

    def __init__(self, scn: SimpleScenario):
        if not isinstance(scn, SimpleScenario):
            raise TypeError("exact model set is available for the simple scenario only")
        if scn.include_u:
            raise ValueError("exact conditionals require include_u=False")
        self.scn = scn

    def _lag_values(self, hist: HistoryBatch, k: int):
        return dict(u=0.0, sex=hist.sex, age=hist.age, smoking=hist.smoking,
                    cd4=hist.lagged("cd4", k), rna=hist.lagged("rna", k),
                    bmi=hist.lagged("high_bmi", k), insti=hist.lagged("insti", k))

    def covariate_step(self, hist: HistoryBatch, k: int) -> CovariateStepParams:
        lag = self._lag_values(hist, k)
        eq_c = self.scn.cd4_eq(k)
        eq_r = self.scn.rna_eq(k)
        ones = np.ones(hist.size)
        return CovariateStepParams(
            cd4_mu=eq_c.predictor(**lag), cd4_sd=eq_c.sigma * ones,
            cd4_lo=eq_c.lo * ones, cd4_hi=eq_c.hi * ones,
            rna_mu=eq_r.predictor(**lag), rna_sd=eq_r.sigma * ones,
            rna_lo=eq_r.lo * ones, rna_hi=eq_r.hi * ones,
            bmi_p=expit(self.scn.high_bmi.predictor(**lag)),
            bound_mode="truncate",
        )

    def treatment_prob(self, hist: HistoryBatch, k: int) -> np.ndarray:
        mu = self.scn.treatment.predictor(
            u=0.0, sex=hist.sex, age=hist.age, smoking=hist.smoking,
            cd4=hist.cd4[:, k], rna=hist.rna[:, k], bmi=hist.high_bmi[:, k],
            insti=hist.lagged("insti", k))
        return expit(mu)

    def hazard(self, hist: HistoryBatch, k: int) -> np.ndarray:
        mu = self.scn.outcome.predictor(
            u=0.0, sex=hist.sex, age=hist.age, smoking=hist.smoking,
            cd4=hist.cd4[:, k], rna=hist.rna[:, k], bmi=hist.high_bmi[:, k],
            insti=hist.insti[:, k])
        return expit(mu)
