"""
Evaluation - ROC/AUC, collective counts and runtime scaling
评估：ROC/AUC、群体感染计数与运行时间扩展性
"""

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .config import SamplerConfig, ViConfig
from .data_io import generate_benchmark
from .engine import IndividualPosterior, infer, initial_messages
from .epidemic import INFECTIOUS, EpidemicParams, compile_system
from .errors import DataFormatError, EvaluationError
from .samplers import gibbs_infer, pf_infer

PathLike = Union[str, Path]


@dataclass(frozen=True)
class ScoredCell:
    """One evaluated (t, m) cell: posterior infection probability and, when known, the truth."""
    t: int
    m: int
    score: float
    label: Optional[int] = None

    def __post_init__(self):
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise EvaluationError(f"score {self.score} at (t={self.t}, m={self.m}) outside [0, 1]")
        if self.label not in (None, 0, 1):
            raise EvaluationError(f"label must be 0 or 1, got {self.label}")


@dataclass(frozen=True, eq=False)
class RocCurve:
    """ROC points ordered by decreasing threshold; the first point is (0, 0)."""
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"threshold": self.thresholds, "fpr": self.fpr, "tpr": self.tpr})


def roc_from_arrays(scores: Sequence[float], labels: Sequence[int]) -> RocCurve:
    """ROC over every distinct score; tied scores form a single step.

    Args:
        scores: finite real scores, higher means more likely positive
        labels: 0/1 ground truth

    Returns:
        RocCurve with trapezoid AUC
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise EvaluationError("scores and labels must be 1-D arrays of equal length")
    if not np.isfinite(scores).all():
        raise EvaluationError("scores must be finite")
    positives = int(labels.sum())
    negatives = len(labels) - positives
    if positives == 0 or negatives == 0:
        raise EvaluationError("ROC needs both positive and negative labels")

    order = np.argsort(-scores, kind="mergesort")
    ranked, hits = scores[order], labels[order]
    ends = np.r_[np.nonzero(np.diff(ranked))[0], len(ranked) - 1]
    tps = np.cumsum(hits)[ends]
    fps = ends + 1 - tps
    tpr = np.r_[0.0, tps / positives]
    fpr = np.r_[0.0, fps / negatives]
    thresholds = np.r_[np.inf, ranked[ends]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(thresholds=thresholds, fpr=fpr, tpr=tpr, auc=auc)


def roc_curve(cells: Sequence[ScoredCell]) -> RocCurve:
    if any(c.label is None for c in cells):
        raise EvaluationError("ROC needs a truth label on every cell")
    return roc_from_arrays([c.score for c in cells], [c.label for c in cells])


def all_cells(horizon: int, num_individuals: int) -> np.ndarray:
    """Ledger of every (t, m) cell, t-major, t 1-based."""
    tt, mm = np.meshgrid(np.arange(1, horizon + 1), np.arange(num_individuals), indexing="ij")
    return np.stack([tt.ravel(), mm.ravel()], axis=1)


def score_cells(
    scores: Union[IndividualPosterior, np.ndarray],
    truth: Optional[np.ndarray],
    ledger: np.ndarray,
    state: int = INFECTIOUS,
) -> List[ScoredCell]:
    """Pair the score and true label of every ledger cell.

    Args:
        scores: posterior, or a T × M grid of P(x = state)
        truth: T × M hidden states; None leaves the cells unlabeled
        ledger: K × 2 rows of (t, m), t 1-based
    """
    grid = scores.infected_scores(state) if isinstance(scores, IndividualPosterior) else np.asarray(scores, float)
    truth = None if truth is None else np.asarray(truth)
    cells = []
    for t, m in np.asarray(ledger, dtype=np.int64).reshape(-1, 2):
        score = float(np.clip(grid[t - 1, m], 0.0, 1.0))
        label = None if truth is None else int(truth[t - 1, m] == state)
        cells.append(ScoredCell(int(t), int(m), score, label))
    return cells


def collective_curve(
    source: Union[IndividualPosterior, np.ndarray],
    state: int = INFECTIOUS,
    scale: float = 1.0,
) -> np.ndarray:
    """Per-t expected number of individuals in `state`.

    `source` may be a posterior, an M × T × S marginal grid or a T × M
    truth grid (hard counts). `scale` multiplies the curve, e.g. to project
    a sampled sub-population onto the whole one.
    """
    if isinstance(source, IndividualPosterior):
        curve = source.gamma[:, :, state].sum(axis=0)
    else:
        arr = np.asarray(source)
        if arr.ndim == 3:
            curve = arr[:, :, state].sum(axis=0)
        elif arr.ndim == 2:
            curve = (arr == state).sum(axis=1).astype(float)
        else:
            raise EvaluationError("expected a posterior, an M × T × S grid or a T × M truth grid")
    return curve * scale


class BenchmarkFixture(BaseModel):
    """Synthetic SIS workload used for timing runs."""

    model_config = ConfigDict(frozen=True)

    horizon: int = Field(100, ge=2)
    contact_density: float = Field(2.0, ge=0.0)
    params: EpidemicParams = EpidemicParams(c1=0.01, c2=0.002, c3=0.0005)
    repeats: int = Field(3, ge=1)
    seed: int = 0

    @field_validator("params")
    @classmethod
    def _rates_positive(cls, value: EpidemicParams):
        if value.c1 <= 0.0:
            raise ValueError("benchmark recovery rate must be positive")
        return value


class BaselineSpec(BaseModel):
    """Sampler budgets the VI run is compared against."""

    model_config = ConfigDict(frozen=True)

    sweeps: int = Field(1000, ge=1)             # Gibbs sweeps being priced
    particles: int = Field(1000, ge=1)
    timed_sweeps: int = Field(20, ge=1)         # Gibbs sweeps actually run, scaled up to `sweeps`

    @model_validator(mode="after")
    def _timed_within_budget(self):
        if self.timed_sweeps > self.sweeps:
            raise ValueError("timed_sweeps cannot exceed sweeps")
        return self


@dataclass
class ScalingResult:
    """Timing table with a least-squares fit of seconds against M.

    `seconds` holds the pinned-iteration VI timings the fit is made on;
    `vi_total` and `baselines` hold full-run timings for the comparison.
    """
    sizes: List[int]
    seconds: List[float]
    slope: Optional[float] = None
    intercept: Optional[float] = None
    r_squared: Optional[float] = None
    ratios: List[float] = field(default_factory=list)
    vi_total: List[float] = field(default_factory=list)
    baselines: Dict[str, List[float]] = field(default_factory=dict)

    def speedups(self) -> Dict[str, List[float]]:
        """Baseline seconds over full VI seconds, per size."""
        return {
            name: [b / v if v > 0 else math.inf for b, v in zip(times, self.vi_total)]
            for name, times in self.baselines.items()
        }

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"M": self.sizes, "seconds": self.seconds})
        if self.vi_total:
            frame["vi_total_seconds"] = self.vi_total
        for name, times in self.baselines.items():
            frame[f"{name}_seconds"] = times
        for name, ratios in self.speedups().items():
            frame[f"{name}_speedup"] = ratios
        return frame


def fit_line(sizes: Sequence[float], seconds: Sequence[float]):
    """(slope, intercept, R²) of a least-squares line."""
    x = np.asarray(sizes, dtype=float)
    y = np.asarray(seconds, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    residual = y - (slope * x + intercept)
    total = ((y - y.mean()) ** 2).sum()
    r_squared = 1.0 - (residual ** 2).sum() / total if total > 0 else 1.0
    return float(slope), float(intercept), float(r_squared)


def _best_of(call: Callable[[], object], repeats: int, warmup: bool = True) -> float:
    if warmup:
        call()
    best = math.inf
    for _ in range(repeats):
        started = time.perf_counter()
        call()
        best = min(best, time.perf_counter() - started)
    return best


def _benchmark_workload(fixture: BenchmarkFixture, size: int):
    contacts, bundle = generate_benchmark(size, fixture.horizon, fixture.contact_density, fixture.params, fixture.seed)
    system = compile_system(contacts, fixture.params)
    return system, fixture.params.observation_model(), bundle.observations


def _time_vi(fixture: BenchmarkFixture, size: int, iterations: int) -> Callable[[], None]:
    """Pinned sweeps from precomputed initial messages."""
    system, obsmodel, observations = _benchmark_workload(fixture, size)
    config = ViConfig(track_energy=False).pinned(iterations)
    init = initial_messages(system, obsmodel, observations, config)
    return lambda: infer(system, obsmodel, observations, config, init=init)


def _time_vi_total(fixture: BenchmarkFixture, size: int) -> float:
    system, obsmodel, observations = _benchmark_workload(fixture, size)
    config = ViConfig(track_energy=False)
    return _best_of(lambda: infer(system, obsmodel, observations, config), fixture.repeats)


def _time_gibbs(fixture: BenchmarkFixture, size: int, spec: BaselineSpec) -> float:
    system, obsmodel, observations = _benchmark_workload(fixture, size)
    config = SamplerConfig(iterations=spec.timed_sweeps, burn_in=0, seed=fixture.seed)
    seconds = _best_of(lambda: gibbs_infer(system, obsmodel, observations, config), 1, warmup=False)
    return seconds * spec.sweeps / spec.timed_sweeps


def _time_pf(fixture: BenchmarkFixture, size: int, spec: BaselineSpec) -> float:
    system, obsmodel, observations = _benchmark_workload(fixture, size)
    config = SamplerConfig(particles=spec.particles, seed=fixture.seed)
    return _best_of(lambda: pf_infer(system, obsmodel, observations, config), 1, warmup=False)


BASELINE_RUNNERS: Dict[str, Callable[[BenchmarkFixture, int, BaselineSpec], float]] = {
    "gibbs": _time_gibbs,
    "pf": _time_pf,
}


def scaling_benchmark(
    sizes: Sequence[int],
    fixture: Optional[BenchmarkFixture] = None,
    pinned_iterations: int = 10,
    runner: Optional[Callable[[BenchmarkFixture, int, int], Callable[[], None]]] = None,
    baselines: Sequence[str] = (),
    spec: Optional[BaselineSpec] = None,
) -> ScalingResult:
    """Time inference at each population size with a warmup run discarded.

    Args:
        sizes: strictly increasing population sizes
        fixture: workload definition
        pinned_iterations: sweeps per timed run
        runner: builds a zero-argument timed call for (fixture, size, iterations)
        baselines: names from BASELINE_RUNNERS to time against a full VI run
        spec: sampler budgets for the baselines

    Returns:
        ScalingResult; the fit is omitted for a single size
    """
    fixture = fixture or BenchmarkFixture()
    runner = runner or _time_vi
    spec = spec or BaselineSpec()
    sizes = [int(s) for s in sizes]
    if not sizes or any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise EvaluationError("sizes must be a non-empty strictly increasing list")
    unknown = sorted(set(baselines) - set(BASELINE_RUNNERS))
    if unknown:
        raise EvaluationError(f"unknown baselines {unknown}; choose from {sorted(BASELINE_RUNNERS)}")

    result = ScalingResult(sizes=sizes, seconds=[])
    result.baselines = {name: [] for name in baselines}
    for size in sizes:
        best = _best_of(runner(fixture, size, pinned_iterations), fixture.repeats)
        result.seconds.append(best)
        logger.info(f"benchmark M={size}: {best:.4f}s")
        if not baselines:
            continue
        result.vi_total.append(_time_vi_total(fixture, size))
        for name in baselines:
            seconds = BASELINE_RUNNERS[name](fixture, size, spec)
            result.baselines[name].append(seconds)
            logger.info(f"benchmark M={size}: {name} {seconds:.4f}s, VI {result.vi_total[-1]:.4f}s")

    result.ratios = [b / a if a > 0 else math.inf for a, b in zip(result.seconds, result.seconds[1:])]
    if len(sizes) >= 2:
        result.slope, result.intercept, result.r_squared = fit_line(sizes, result.seconds)
        logger.info(f"scaling fit: slope={result.slope:.3e}s per individual, R²={result.r_squared:.4f}")
    return result


# ---------------------------------------------------------------------------
# CSV outputs
# ---------------------------------------------------------------------------

def _prepare_path(path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_roc_csv(path: PathLike, roc: RocCurve) -> None:
    roc.to_frame().to_csv(_prepare_path(path), index=False)


def write_counts_csv(path: PathLike, expected: np.ndarray, truth: Optional[np.ndarray] = None) -> None:
    frame = pd.DataFrame({"t": np.arange(1, len(expected) + 1), "expected": expected})
    frame["truth"] = truth if truth is not None else np.nan
    frame.to_csv(_prepare_path(path), index=False)


def write_bench_csv(path: PathLike, result: ScalingResult) -> None:
    result.to_frame().to_csv(_prepare_path(path), index=False)


def write_scores_csv(path: PathLike, cells: Sequence[ScoredCell]) -> None:
    frame = pd.DataFrame(
        {"t": [c.t for c in cells], "m": [c.m for c in cells], "score": [c.score for c in cells]},
        columns=["t", "m", "score"],
    )
    frame.to_csv(_prepare_path(path), index=False)


def load_scores_csv(path: PathLike) -> pd.DataFrame:
    """Read scores.csv (t, m, score)."""
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataFormatError(f"cannot read scores: {e}", path=str(path)) from e
    missing = {"t", "m", "score"} - set(frame.columns)
    if missing:
        raise DataFormatError(f"scores file lacks columns {sorted(missing)}", path=str(path))
    return frame
