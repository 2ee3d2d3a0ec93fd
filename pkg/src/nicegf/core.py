"""Shared data model: cohorts, trajectories, strategies, risk curves, file I/O.

Everything downstream (simulation, model fitting, Monte Carlo estimation)
works in terms of the types defined here. All containers are immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

import csv
import io
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "BASELINE_NAMES",
    "TIMEVARYING_NAMES",
    "CSV_HEADER",
    "CohortFormatError",
    "CovariateSchema",
    "PersonTrajectory",
    "Cohort",
    "TreatmentStrategy",
    "RiskCurve",
    "EffectCurve",
    "cumulative_incidence",
    "read_cohort",
    "write_cohort",
    "HistoryBatch",
    "CovariateStepParams",
    "ModelSet",
    "ModelStepper",
]

BASELINE_NAMES = ("sex", "age", "smoking")
TIMEVARYING_NAMES = ("cd4", "rna", "high_bmi")
CSV_HEADER = ["id", "k", "sex", "age", "smoking", "cd4", "rna", "high_bmi", "insti", "event"]


class CohortFormatError(ValueError):
    """Raised when a cohort file violates the long-format contract."""


@dataclass(frozen=True)
class CovariateSchema:
    """Names, kinds, and horizon for the cohort layout.

    The layout is fixed for this study: binary sex, continuous age in years,
    smoking score in {0, 1, 2}; time-varying cd4 and rna (continuous) and
    high_bmi (binary); binary treatment insti; binary event indicator; and a
    follow-up horizon of ``horizon`` months (60 in the main experiments).
    """

    horizon: int = 60
    baseline: tuple[str, ...] = BASELINE_NAMES
    timevarying: tuple[str, ...] = TIMEVARYING_NAMES
    treatment: str = "insti"
    outcome: str = "event"

    def __post_init__(self) -> None:
        if not 1 <= self.horizon <= 60:
            raise ValueError(f"horizon must be in 1..60, got {self.horizon}")


@dataclass(frozen=True)
class PersonTrajectory:
    """One person's observed follow-up in month-by-month form.

    ``records`` covers months 0..T where T = min(horizon-1, event_time-1).
    An event during month k+1 is determined by the month-k covariates and
    treatment; when it fires the trajectory stops, so ``event_time`` is in
    1..horizon when present. ``pre_baseline`` holds the month -1 values of
    (cd4, rna, high_bmi); treatment before month 0 is zero by definition.
    """

    person_id: int
    sex: int
    age: float
    smoking: int
    cd4: np.ndarray
    rna: np.ndarray
    high_bmi: np.ndarray
    insti: np.ndarray
    event_time: Optional[int] = None
    pre_baseline: Optional[tuple[float, float, float]] = None

    def __post_init__(self) -> None:
        n = len(self.cd4)
        if not (len(self.rna) == len(self.high_bmi) == len(self.insti) == n):
            raise ValueError("time-varying arrays must share one length")
        if n == 0:
            raise ValueError("trajectory needs at least the month-0 record")
        if self.event_time is not None and self.event_time < 1:
            raise ValueError("event_time must be >= 1 (no event during month 0)")
        for name in ("cd4", "rna"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite {name} values in person {self.person_id}")

    @property
    def n_months(self) -> int:
        return len(self.cd4)

    @property
    def last_month(self) -> int:
        """Index T of the final observed record."""
        return len(self.cd4) - 1


@dataclass(frozen=True)
class Cohort:
    """A set of person trajectories sharing one schema."""

    schema: CovariateSchema
    persons: tuple[PersonTrajectory, ...]
    scenario: str = "external"

    def __post_init__(self) -> None:
        if not self.persons:
            raise ValueError("cohort must be nonempty")
        ids = [p.person_id for p in self.persons]
        if len(set(ids)) != len(ids):
            raise ValueError("person ids must be unique")

    def __len__(self) -> int:
        return len(self.persons)

    def empirical_risk(self) -> "RiskCurve":
        """Observed cumulative incidence: fraction with event by each month."""
        k_grid = np.arange(1, self.schema.horizon + 1)
        events = np.array([p.event_time if p.event_time is not None else 0 for p in self.persons])
        values = (events[:, None] != 0) & (events[:, None] <= k_grid[None, :])
        return RiskCurve(values.mean(axis=0))


class TreatmentStrategy(Enum):
    """Static deterministic rules plus the no-intervention reference."""

    ALWAYS_TREAT = "always"
    NEVER_TREAT = "never"
    NATURAL_COURSE = "natural"

    @classmethod
    def parse(cls, text: str) -> "TreatmentStrategy":
        for member in cls:
            if member.value == text:
                return member
        raise ValueError(f"unknown strategy {text!r}; expected one of "
                         f"{[m.value for m in cls]}")


@dataclass(frozen=True)
class RiskCurve:
    """Cumulative incidence by month: values[k-1] = risk by month k."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size == 0:
            raise ValueError("risk curve must be a nonempty vector")
        if np.any(v < -1e-9) or np.any(v > 1 + 1e-9):
            raise ValueError("risks must lie in [0, 1]")
        if np.any(np.diff(v) < -1e-9):
            raise ValueError("risk curve must be non-decreasing")
        object.__setattr__(self, "values", np.clip(v, 0.0, 1.0))

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class EffectCurve:
    """Per-month risk ratio and risk difference between two strategies.

    ``rr`` is NaN wherever the reference (never-treat) risk is zero; the
    ``defined`` mask marks the usable entries.
    """

    rr: np.ndarray
    rd: np.ndarray

    @property
    def defined(self) -> np.ndarray:
        return np.isfinite(self.rr)


def cumulative_incidence(hazards: Sequence[float] | np.ndarray) -> RiskCurve:
    """Convert per-month hazards h_1..h_K into cumulative incidence.

    risk_k = 1 - prod_{s<=k} (1 - h_s). Raises ValueError if any hazard is
    outside [0, 1].
    """
    h = np.asarray(hazards, dtype=float)
    if h.ndim != 1 or h.size == 0:
        raise ValueError("hazards must be a nonempty vector")
    if np.any(~np.isfinite(h)) or np.any(h < 0) or np.any(h > 1):
        raise ValueError("hazards must lie in [0, 1]")
    return RiskCurve(1.0 - np.cumprod(1.0 - h))


# ---------------------------------------------------------------------------
# Long-format CSV I/O
#
# One row per person-month. An optional k = -1 row carries the pre-baseline
# covariate values (treatment and event are structurally zero there); months
# are contiguous from the first row of each person. The event column may be 1
# only on a person's final row.
# ---------------------------------------------------------------------------

def _format_float(x: float) -> str:
    return repr(float(x))


def write_cohort(cohort: Cohort, path: str) -> None:
    """Write a cohort in long format. UTF-8, LF line endings, '.' decimals."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for person in cohort.persons:
        base = [person.person_id, None, person.sex, _format_float(person.age), person.smoking]
        if person.pre_baseline is not None:
            cd4, rna, bmi = person.pre_baseline
            row = list(base)
            row[1] = -1
            writer.writerow(row + [_format_float(cd4), _format_float(rna), int(bmi), 0, 0])
        for k in range(person.n_months):
            event = int(person.event_time == k + 1) if person.event_time is not None else 0
            row = list(base)
            row[1] = k
            writer.writerow(row + [
                _format_float(person.cd4[k]),
                _format_float(person.rna[k]),
                int(person.high_bmi[k]),
                int(person.insti[k]),
                event,
            ])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def _parse_row(row: list[str], line_no: int) -> tuple:
    try:
        return (int(row[0]), int(row[1]), int(row[2]), float(row[3]), int(row[4]),
                float(row[5]), float(row[6]), int(row[7]), int(row[8]), int(row[9]))
    except (ValueError, IndexError) as exc:
        raise CohortFormatError(f"row {line_no}: cannot parse fields ({exc})") from exc


def read_cohort(path: str, schema: Optional[CovariateSchema] = None,
                scenario: str = "external") -> Cohort:
    """Read a long-format cohort file, validating the row contract.

    Raises CohortFormatError naming the offending row on missing columns,
    non-contiguous months, records after an event, or invalid indicators.
    """
    schema = schema or CovariateSchema()
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CohortFormatError("row 1: empty file") from None
        if header != CSV_HEADER:
            missing = [c for c in CSV_HEADER if c not in header]
            if missing:
                raise CohortFormatError(f"row 1: missing columns {missing}")
            raise CohortFormatError(f"row 1: header must be exactly {','.join(CSV_HEADER)}")

        persons: list[PersonTrajectory] = []
        current: list[tuple] = []
        current_id: Optional[int] = None
        seen_ids: set[int] = set()

        def flush(rows: list[tuple]) -> None:
            if not rows:
                return
            pid = rows[0][0]
            pre = None
            if rows[0][1] == -1:
                r = rows.pop(0)
                if r[8] != 0 or r[9] != 0:
                    raise CohortFormatError(
                        f"row {r[-1]}: pre-baseline row must have insti=0 and event=0")
                pre = (r[5], r[6], float(r[7]))
            if not rows:
                raise CohortFormatError(f"person {pid}: no month-0 record")
            event_time = None
            for idx, r in enumerate(rows):
                line_no = r[-1]
                if r[1] != idx:
                    raise CohortFormatError(
                        f"row {line_no}: non-contiguous k (expected {idx}, got {r[1]})")
                if event_time is not None:
                    raise CohortFormatError(
                        f"row {line_no}: record after event for person {pid}")
                if r[9] not in (0, 1):
                    raise CohortFormatError(f"row {line_no}: event must be 0 or 1")
                if r[9] == 1:
                    event_time = r[1] + 1
            first = rows[0]
            persons.append(PersonTrajectory(
                person_id=pid,
                sex=first[2], age=first[3], smoking=first[4],
                cd4=np.array([r[5] for r in rows]),
                rna=np.array([r[6] for r in rows]),
                high_bmi=np.array([float(r[7]) for r in rows]),
                insti=np.array([float(r[8]) for r in rows]),
                event_time=event_time,
                pre_baseline=pre,
            ))

        for line_no, raw in enumerate(reader, start=2):
            if len(raw) != len(CSV_HEADER):
                raise CohortFormatError(
                    f"row {line_no}: expected {len(CSV_HEADER)} fields, got {len(raw)}")
            parsed = _parse_row(raw, line_no) + (line_no,)
            pid = parsed[0]
            if pid != current_id:
                flush(current)
                current = []
                if pid in seen_ids:
                    raise CohortFormatError(f"row {line_no}: person {pid} appears twice")
                seen_ids.add(pid)
                current_id = pid
            current.append(parsed)
        flush(current)

    if not persons:
        raise CohortFormatError("row 2: file contains no person records")
    return Cohort(schema=schema, persons=tuple(persons), scenario=scenario)


# ---------------------------------------------------------------------------
# Estimation contract
#
# A ModelSet is anything that yields conditional covariate distributions,
# treatment probabilities, and discrete-time hazards given a history. The
# Monte Carlo engine drives it through a HistoryBatch: baseline rows plus
# month-by-month arrays it fills as the simulation advances.
# ---------------------------------------------------------------------------

@dataclass
class HistoryBatch:
    """Vectorized covariate/treatment history for a batch of simulated people.

    The per-month arrays have shape (batch, horizon) and are filled in-place
    by the simulation loop; entries at months > the current one are undefined.
    Month -1 lags live in pre_cd4/pre_rna/pre_bmi (pre-baseline treatment is
    zero by definition).
    """

    sex: np.ndarray
    age: np.ndarray
    smoking: np.ndarray
    pre_cd4: np.ndarray
    pre_rna: np.ndarray
    pre_bmi: np.ndarray
    cd4: np.ndarray
    rna: np.ndarray
    high_bmi: np.ndarray
    insti: np.ndarray

    @classmethod
    def allocate(cls, sex, age, smoking, pre_cd4, pre_rna, pre_bmi, horizon: int) -> "HistoryBatch":
        n = len(np.atleast_1d(sex))
        make = lambda: np.zeros((n, horizon))
        return cls(
            sex=np.asarray(sex, float), age=np.asarray(age, float),
            smoking=np.asarray(smoking, float),
            pre_cd4=np.asarray(pre_cd4, float), pre_rna=np.asarray(pre_rna, float),
            pre_bmi=np.asarray(pre_bmi, float),
            cd4=make(), rna=make(), high_bmi=make(), insti=make(),
        )

    @property
    def size(self) -> int:
        return len(self.sex)

    @property
    def horizon(self) -> int:
        return self.cd4.shape[1]

    def lagged(self, name: str, k: int) -> np.ndarray:
        """Values of a time-varying covariate at month k-1 (pre-baseline at k=0)."""
        if k > 0:
            return getattr(self, name)[:, k - 1]
        if name == "insti":
            return np.zeros(self.size)
        return getattr(self, "pre_" + {"cd4": "cd4", "rna": "rna", "high_bmi": "bmi"}[name])

    def running_mean(self, name: str, k: int) -> np.ndarray:
        """Mean of a covariate over months 0..k-1; zero for k=0."""
        if k == 0:
            return np.zeros(self.size)
        return getattr(self, name)[:, :k].mean(axis=1)


@dataclass(frozen=True)
class CovariateStepParams:
    """Conditional covariate laws for one month, batched.

    cd4 and rna are Normal(mu, sd) restricted to [lo, hi]; high_bmi is
    Bernoulli(p). bound_mode selects how the restriction is applied when
    sampling: "clamp" (draw then clip; the fitted-model convention) or
    "truncate" (exact truncated-normal draw; used by oracle model sets).
    """

    cd4_mu: np.ndarray
    cd4_sd: np.ndarray
    cd4_lo: np.ndarray
    cd4_hi: np.ndarray
    rna_mu: np.ndarray
    rna_sd: np.ndarray
    rna_lo: np.ndarray
    rna_hi: np.ndarray
    bmi_p: np.ndarray
    bound_mode: str = "clamp"


class ModelSet(ABC):
    """Conditional models for covariates, treatment, and outcome hazard.

    Implementations must be safe for concurrent read-only evaluation. The
    covariate law at month k conditions on history through k-1; the treatment
    probability additionally sees the month-k covariates; the hazard sees the
    month-k covariates and treatment.
    """

    @abstractmethod
    def covariate_step(self, hist: HistoryBatch, k: int) -> CovariateStepParams:
        """Distribution parameters for (cd4_k, rna_k, high_bmi_k)."""

    @abstractmethod
    def treatment_prob(self, hist: HistoryBatch, k: int) -> np.ndarray:
        """P(insti_k = 1 | history through k with current covariates)."""

    @abstractmethod
    def hazard(self, hist: HistoryBatch, k: int) -> np.ndarray:
        """P(event during month k+1 | event-free, history through k)."""

    def make_stepper(self, hist: HistoryBatch) -> "ModelStepper":
        """Sequential evaluator; overridden by recurrent models to carry state."""
        return ModelStepper(self, hist)


class ModelStepper:
    """Stateless default stepper: forwards each call to the owning ModelSet."""

    def __init__(self, model: ModelSet, hist: HistoryBatch):
        self.model = model
        self.hist = hist

    def covariate_step(self, k: int) -> CovariateStepParams:
        return self.model.covariate_step(self.hist, k)

    def treatment_prob(self, k: int) -> np.ndarray:
        return self.model.treatment_prob(self.hist, k)

    def hazard(self, k: int) -> np.ndarray:
        return self.model.hazard(self.hist, k)
