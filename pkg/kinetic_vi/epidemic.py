"""
SIS epidemic layer - contact graphs compiled into kinetic events
SIS 传染病模型：接触网络到动力学事件的编译与模拟

States: 0 = susceptible, 1 = infectious. Three event families share one
rate each when learning: "recovery" (c1), "contact" (c2), "outside" (c3).
"""

from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from .errors import HazardOverflowError, ModelValidationError
from .model import Competition, EventSpec, ObservationModel, Participant, SkmSystem, TrajectoryBundle, sample_path

SUSCEPTIBLE = 0
INFECTIOUS = 1
NUM_STATES = 2

RECOVERY = "recovery"
CONTACT = "contact"
OUTSIDE = "outside"

_IS_S = (1.0, 0.0)
_IS_I = (0.0, 1.0)


@dataclass(frozen=True, eq=False)
class ContactGraph:
    """Dynamic undirected contact network; edges are stored as (u, v) with u < v."""
    num_individuals: int
    horizon: int
    edges_at: Mapping[int, FrozenSet[Tuple[int, int]]]
    ids: Optional[Tuple[str, ...]] = None       # external id of each dense index

    def __post_init__(self):
        M, T = self.num_individuals, self.horizon
        if M < 0 or T < 0:
            raise ModelValidationError("num_individuals and horizon must be non-negative")
        edges_at: Dict[int, FrozenSet[Tuple[int, int]]] = {}
        for t, edges in self.edges_at.items():
            t = int(t)
            if not 1 <= t <= T:
                raise ModelValidationError(f"edge timestep {t} outside 1..{T}")
            canonical = set()
            for u, v in edges:
                u, v = int(u), int(v)
                if u == v:
                    raise ModelValidationError(f"self-loop on individual {u} at t={t}")
                if not (0 <= u < M and 0 <= v < M):
                    raise ModelValidationError(f"edge ({u}, {v}) at t={t} references an unknown individual")
                canonical.add((min(u, v), max(u, v)))
            if canonical:
                edges_at[t] = frozenset(canonical)
        object.__setattr__(self, "edges_at", edges_at)
        if self.ids is not None:
            ids = tuple(str(i) for i in self.ids)
            if len(ids) != M or len(set(ids)) != M:
                raise ModelValidationError("ids must list one distinct external id per individual")
            object.__setattr__(self, "ids", ids)

    @classmethod
    def from_edges(
        cls,
        num_individuals: int,
        horizon: int,
        edges: Iterable[Tuple[int, int, int]],
        ids: Optional[Sequence[str]] = None,
    ) -> "ContactGraph":
        """Build from (t, u, v) triples."""
        grouped: Dict[int, Set[Tuple[int, int]]] = {}
        for t, u, v in edges:
            grouped.setdefault(int(t), set()).add((int(u), int(v)))
        return cls(num_individuals, horizon, {t: frozenset(e) for t, e in grouped.items()}, tuple(ids) if ids else None)

    def edges(self, t: int) -> FrozenSet[Tuple[int, int]]:
        return self.edges_at.get(t, frozenset())

    def edge_array(self, t: int) -> np.ndarray:
        """Sorted (E, 2) array of the edges at t."""
        edges = sorted(self.edges(t))
        return np.asarray(edges, dtype=np.int64).reshape(-1, 2)

    def degree(self, t: int) -> np.ndarray:
        pairs = self.edge_array(t)
        return np.bincount(pairs.ravel(), minlength=self.num_individuals)

    @property
    def num_edges(self) -> int:
        return sum(len(e) for e in self.edges_at.values())


class EpidemicParams(BaseModel):
    """SIS rates per step and symptom observation noise."""

    model_config = ConfigDict(frozen=True)

    c1: float = Field(..., ge=0.0, le=1.0)      # recovery
    c2: float = Field(..., ge=0.0, le=1.0)      # per-contact infection
    c3: float = Field(..., ge=0.0, le=1.0)      # outside infection
    obs_sensitivity: float = Field(0.95, ge=0.0, le=1.0)
    obs_specificity: float = Field(0.95, ge=0.0, le=1.0)
    initial_prevalence: float = Field(0.1, ge=0.0, le=1.0)

    def observation_model(self) -> ObservationModel:
        spec, sens = self.obs_specificity, self.obs_sensitivity
        return ObservationModel(np.array([[spec, 1.0 - spec], [1.0 - sens, sens]]))

    def rates(self) -> Dict[str, float]:
        return {RECOVERY: self.c1, CONTACT: self.c2, OUTSIDE: self.c3}


def check_hazards(contacts: ContactGraph, params: EpidemicParams, hint: str = "") -> None:
    """Reject rates whose susceptible owner total c3 + degree·c2 exceeds 1 at some step."""
    worst_t, worst_m, worst_total = None, None, -1.0
    for t in range(2, contacts.horizon + 1):
        degree = contacts.degree(t)
        if degree.size == 0:
            continue
        m = int(np.argmax(degree))
        total = params.c3 + degree[m] * params.c2
        if total > worst_total:
            worst_t, worst_m, worst_total = t, m, total
    if worst_total > 1.0 + 1e-12:
        raise HazardOverflowError(worst_t, total=worst_total, individual=worst_m, hint=hint)


def compile_system(
    contacts: ContactGraph,
    params: EpidemicParams,
    initial_infected: Optional[Iterable[int]] = None,
) -> SkmSystem:
    """Turn a contact graph into per-timestep SKM events.

    Every event is owned by the individual whose state it flips; a contact
    event lists its susceptible target first and the infectious source as
    catalyst. Events compete per individual, so m's no-event branch only
    competes with the events that change m.

    Args:
        contacts: dynamic contact network
        params: SIS rates
        initial_infected: pin x_1 to this infected set instead of the prevalence prior

    Returns:
        SkmSystem over S = 2 states with events at t = 2..T
    """
    M, T = contacts.num_individuals, contacts.horizon
    if M < 1 or T < 1:
        raise ModelValidationError("cannot compile an empty contact graph")
    check_hazards(contacts, params)

    events_at: Dict[int, Tuple[EventSpec, ...]] = {}
    for t in range(2, T + 1):
        events = []
        for m in range(M):
            events.append(EventSpec(
                id=m,
                rate_constant=params.c1,
                participants=(Participant(m, _IS_I, delta=-1),),
                rate_group=RECOVERY,
            ))
        for m in range(M):
            events.append(EventSpec(
                id=M + m,
                rate_constant=params.c3,
                participants=(Participant(m, _IS_S, delta=+1),),
                rate_group=OUTSIDE,
            ))
        next_id = 2 * M
        for u, v in contacts.edge_array(t):
            for target, source in ((u, v), (v, u)):
                events.append(EventSpec(
                    id=next_id,
                    rate_constant=params.c2,
                    participants=(
                        Participant(int(target), _IS_S, delta=+1),
                        Participant(int(source), _IS_I, delta=0, reactants=1, products=1),
                    ),
                    rate_group=CONTACT,
                ))
                next_id += 1
        events_at[t] = tuple(events)

    if initial_infected is None:
        initial = np.tile([1.0 - params.initial_prevalence, params.initial_prevalence], (M, 1))
    else:
        initial = np.tile([1.0, 0.0], (M, 1))
        for m in initial_infected:
            initial[m] = [0.0, 1.0]
    logger.debug(f"compiled SIS system: M={M}, T={T}, edges={contacts.num_edges}")
    return SkmSystem(M, NUM_STATES, T, events_at, initial, Competition.INDIVIDUAL)


def closed_form_kernel(params: EpidemicParams, infectious_neighbors: int, linearized: bool = False) -> np.ndarray:
    """2 × 2 per-individual SIS kernel given C infectious contacts.

    The product form treats every source as independent; the linearized
    form c3 + c2·C is what the compiled per-individual model produces.
    """
    if infectious_neighbors < 0:
        raise ModelValidationError("infectious neighbour count must be non-negative")
    C = infectious_neighbors
    if linearized:
        infect = min(1.0, params.c3 + params.c2 * C)
    else:
        infect = 1.0 - (1.0 - params.c3) * (1.0 - params.c2) ** C
    return np.array([
        [1.0 - infect, infect],
        [params.c1, 1.0 - params.c1],
    ])


def infectious_contacts(contacts: ContactGraph, t: int, x_prev: np.ndarray) -> np.ndarray:
    """Number of infectious neighbours of every individual over the edges at t."""
    pairs = contacts.edge_array(t)
    M = contacts.num_individuals
    if pairs.size == 0:
        return np.zeros(M, dtype=np.int64)
    u, v = pairs[:, 0], pairs[:, 1]
    counts = np.bincount(u, weights=x_prev[v], minlength=M) + np.bincount(v, weights=x_prev[u], minlength=M)
    return counts.astype(np.int64)


def simulate(
    contacts: ContactGraph,
    params: EpidemicParams,
    initial_infected: Optional[Iterable[int]] = None,
    seed: Union[int, np.random.Generator, None] = None,
    strict: bool = False,
) -> TrajectoryBundle:
    """Sample an outbreak and its noisy symptom reports.

    Individuals update independently from the t-1 snapshot under the
    product-form kernel. With strict=True the compiled per-individual
    (linearized) model is sampled instead, which also records the fired events.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    obsmodel = params.observation_model()
    if strict:
        system = compile_system(contacts, params, initial_infected)
        return sample_path(system, obsmodel, rng)

    check_hazards(contacts, params)
    M, T = contacts.num_individuals, contacts.horizon
    states = np.zeros((T, M), dtype=np.int64)
    if initial_infected is None:
        states[0] = (rng.random(M) < params.initial_prevalence).astype(np.int64)
    else:
        states[0, list(initial_infected)] = INFECTIOUS

    for t in range(2, T + 1):
        x = states[t - 2]
        count = infectious_contacts(contacts, t, x)
        infect = 1.0 - (1.0 - params.c3) * (1.0 - params.c2) ** count
        u = rng.random(M)
        states[t - 1] = np.where(x == INFECTIOUS, (u >= params.c1).astype(np.int64), (u < infect).astype(np.int64))

    sens_flip = rng.random((T, M))
    report_infected = np.where(
        states == INFECTIOUS,
        sens_flip < obsmodel.emission[INFECTIOUS, INFECTIOUS],
        sens_flip < obsmodel.emission[SUSCEPTIBLE, INFECTIOUS],
    )
    observations = report_infected.astype(np.int64)
    logger.debug(f"simulated SIS outbreak: M={M}, T={T}, final prevalence={states[-1].mean():.3f}")
    return TrajectoryBundle(states, observations)
