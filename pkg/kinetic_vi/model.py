"""
Stochastic Kinetic Model - events, transition kernel and path likelihood
随机动力学模型：事件、转移核与路径似然

States of individual m are integers 0..S-1. x_1 is drawn from the
per-individual ``initial_dist``. The transition x_{t-1} -> x_t (t = 2..T)
fires events from ``events_at[t]`` under one of two competition scopes:

- SYSTEM: at most one event per step across the whole population.
- INDIVIDUAL: every event has an owner (its first participant, the only
  one whose state changes). At most one event per owner fires, owners
  transition independently given x_{t-1}, and an owner's no-event branch
  competes only with its own events.
"""

from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from typing import Collection, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from .errors import HazardOverflowError, ModelValidationError, UnknownEventError

# Slack allowed on probability sums before they count as violations
HAZARD_TOL = 1e-12
ROW_TOL = 1e-9

MISSING = -1

# Event label of one step: None, a single event id, or the fired ids (one per owner)
EventLabel = Union[None, int, Collection[int]]


class Competition(str, Enum):
    """事件竞争范围"""
    SYSTEM = "system"
    INDIVIDUAL = "individual"


@dataclass(frozen=True)
class Participant:
    """One individual's role in an event."""
    individual: int                     # index m
    g: Tuple[float, ...]                # g_k^{(m)} lookup, one entry per state
    delta: int = 0                      # state change Δ_k^{(m)}
    reactants: Optional[int] = None     # r_m (metadata)
    products: Optional[int] = None      # p_m (metadata)

    def __post_init__(self):
        g = tuple(float(v) for v in self.g)
        if any(v < 0 or not np.isfinite(v) for v in g):
            raise ModelValidationError(f"g factor of individual {self.individual} must be finite and non-negative")
        object.__setattr__(self, "g", g)
        reactants = self.reactants if self.reactants is not None else max(-self.delta, 0)
        products = self.products if self.products is not None else reactants + self.delta
        if reactants < 0 or products < 0 or products - reactants != self.delta:
            raise ModelValidationError(
                f"participant {self.individual}: products - reactants must equal delta {self.delta}"
            )
        object.__setattr__(self, "reactants", reactants)
        object.__setattr__(self, "products", products)

    @property
    def is_catalyst(self) -> bool:
        return self.delta == 0 and self.reactants > 0


@dataclass(frozen=True)
class EventSpec:
    """A reaction with rate constant c_k and product-form hazard."""
    id: int
    rate_constant: float
    participants: Tuple[Participant, ...]
    rate_group: Optional[str] = None    # events sharing a group share c_k when learning

    def __post_init__(self):
        if not 0.0 <= self.rate_constant <= 1.0:
            raise ModelValidationError(f"event {self.id}: rate constant {self.rate_constant} outside [0, 1]")
        participants = tuple(self.participants)
        if not participants:
            raise ModelValidationError(f"event {self.id} has no participants")
        seen = set()
        for p in participants:
            if p.individual in seen:
                raise ModelValidationError(f"event {self.id} lists individual {p.individual} twice")
            seen.add(p.individual)
            for state, value in enumerate(p.g):
                if value > 0 and not 0 <= state + p.delta < len(p.g):
                    raise ModelValidationError(
                        f"event {self.id}: individual {p.individual} leaves the state space from state {state}"
                    )
        object.__setattr__(self, "participants", participants)
        if self.rate_group is None:
            object.__setattr__(self, "rate_group", str(self.id))

    @property
    def owner(self) -> int:
        return self.participants[0].individual

    def hazard(self, x: Sequence[int]) -> float:
        """c_k · Π_m g_k^{(m)}(x^{(m)}) over participants only."""
        h = self.rate_constant
        for p in self.participants:
            h *= p.g[int(x[p.individual])]
        return h

    def apply(self, x: np.ndarray) -> np.ndarray:
        out = np.array(x, copy=True)
        for p in self.participants:
            out[p.individual] += p.delta
        return out


@dataclass(frozen=True, eq=False)
class EventTable:
    """Flat array view of every event instance, sorted by timestep.

    Step indices are 0-based positions of x_curr, so transitions live at
    steps 1..T-1. Participants of one event are contiguous, owner first.
    """
    num_individuals: int
    num_states: int
    horizon: int
    event_step: np.ndarray
    event_id: np.ndarray
    event_group: np.ndarray
    groups: Tuple[str, ...]
    event_rate: np.ndarray
    event_offsets: np.ndarray       # (T+1,)
    event_first_part: np.ndarray    # (E,)
    event_owner: np.ndarray         # (E,) individual of the first participant
    part_event: np.ndarray
    part_ind: np.ndarray
    part_g: np.ndarray              # (P, S)
    part_delta: np.ndarray
    part_step: np.ndarray
    part_owner: np.ndarray          # (P,) bool, entry is its event's owner
    part_offsets: np.ndarray        # (T+1,)
    competition: Competition = Competition.SYSTEM

    @property
    def num_events(self) -> int:
        return len(self.event_id)

    @property
    def num_participants(self) -> int:
        return len(self.part_event)

    @property
    def per_individual(self) -> bool:
        return self.competition == Competition.INDIVIDUAL

    @property
    def event_delta(self) -> np.ndarray:
        """State change of each event's owner."""
        return self.part_delta[self.event_first_part]

    def events_slice(self, step: int) -> slice:
        return slice(int(self.event_offsets[step]), int(self.event_offsets[step + 1]))

    def participants_slice(self, step: int) -> slice:
        return slice(int(self.part_offsets[step]), int(self.part_offsets[step + 1]))

    def group_rates(self) -> Dict[str, float]:
        rates: Dict[str, float] = {}
        for e in range(self.num_events):
            rates.setdefault(self.groups[self.event_group[e]], float(self.event_rate[e]))
        return rates

    def with_rates(self, rates: Mapping[str, float]) -> "EventTable":
        event_rate = self.event_rate.copy()
        for gi, group in enumerate(self.groups):
            if group in rates:
                event_rate[self.event_group == gi] = float(rates[group])
        return replace(self, event_rate=event_rate)


@dataclass(frozen=True, eq=False)
class SkmSystem:
    """M individuals, S states per individual, T timesteps, time-indexed events."""
    num_individuals: int
    num_states: int
    horizon: int
    events_at: Mapping[int, Sequence[EventSpec]]
    initial_dist: np.ndarray
    competition: Competition = Competition.SYSTEM

    def __post_init__(self):
        object.__setattr__(self, "competition", Competition(self.competition))
        M, S, T = self.num_individuals, self.num_states, self.horizon
        if M < 1 or S < 1 or T < 1:
            raise ModelValidationError("num_individuals, num_states and horizon must be positive")
        init = np.array(self.initial_dist, dtype=float)
        if init.ndim == 1:
            init = np.tile(init, (M, 1))
        if init.shape != (M, S):
            raise ModelValidationError(f"initial_dist must have shape ({M}, {S}), got {init.shape}")
        if (init < 0).any() or np.abs(init.sum(axis=1) - 1.0).max() > ROW_TOL:
            raise ModelValidationError("every initial_dist row must be a probability vector")
        init.setflags(write=False)
        object.__setattr__(self, "initial_dist", init)

        events_at: Dict[int, Tuple[EventSpec, ...]] = {}
        for t, events in self.events_at.items():
            t = int(t)
            events = tuple(events)
            if not events:
                continue
            if not 2 <= t <= T:
                raise ModelValidationError(f"events may only be attached to t in 2..{T}, got t={t}")
            ids = [e.id for e in events]
            if len(set(ids)) != len(ids):
                raise ModelValidationError(f"duplicate event ids at t={t}")
            for e in events:
                for p in e.participants:
                    if not 0 <= p.individual < M:
                        raise ModelValidationError(f"event {e.id} at t={t} references individual {p.individual}")
                    if len(p.g) != S:
                        raise ModelValidationError(f"event {e.id} at t={t}: g table must have {S} entries")
                if self.competition == Competition.INDIVIDUAL:
                    head, *rest = e.participants
                    if head.delta == 0 or any(p.delta != 0 for p in rest):
                        raise ModelValidationError(
                            f"event {e.id} at t={t}: under per-individual competition the first participant "
                            f"must change state and the others must not"
                        )
            events_at[t] = events
        object.__setattr__(self, "events_at", events_at)

    def events(self, t: int) -> Tuple[EventSpec, ...]:
        return self.events_at.get(t, ())

    @cached_property
    def _event_index(self) -> Dict[int, Dict[int, EventSpec]]:
        return {t: {e.id: e for e in events} for t, events in self.events_at.items()}

    def event(self, t: int, k: int) -> EventSpec:
        try:
            return self._event_index[t][k]
        except KeyError:
            raise UnknownEventError(t, k) from None

    @property
    def rate_groups(self) -> Tuple[str, ...]:
        return self.event_table.groups

    def rates(self) -> Dict[str, float]:
        return self.event_table.group_rates()

    def with_rates(self, rates: Mapping[str, float]) -> "SkmSystem":
        """New system with every event of a listed group set to that rate."""
        events_at = {
            t: tuple(
                replace(e, rate_constant=float(rates[e.rate_group])) if e.rate_group in rates else e
                for e in events
            )
            for t, events in self.events_at.items()
        }
        return SkmSystem(
            self.num_individuals, self.num_states, self.horizon, events_at, self.initial_dist, self.competition
        )

    @cached_property
    def event_table(self) -> EventTable:
        return build_event_table(self)


def build_event_table(system: SkmSystem) -> EventTable:
    T, S = system.horizon, system.num_states
    groups: List[str] = []
    group_index: Dict[str, int] = {}
    ev_step, ev_id, ev_group, ev_rate, ev_first, ev_owner = [], [], [], [], [], []
    p_event, p_ind, p_g, p_delta, p_step, p_owner = [], [], [], [], [], []
    ev_counts = np.zeros(T, dtype=np.int64)
    part_counts = np.zeros(T, dtype=np.int64)

    for t in sorted(system.events_at):
        step = t - 1
        for e in system.events_at[t]:
            if e.rate_group not in group_index:
                group_index[e.rate_group] = len(groups)
                groups.append(e.rate_group)
            eidx = len(ev_id)
            ev_step.append(step)
            ev_id.append(e.id)
            ev_group.append(group_index[e.rate_group])
            ev_rate.append(e.rate_constant)
            ev_first.append(len(p_event))
            ev_owner.append(e.owner)
            ev_counts[step] += 1
            for i, p in enumerate(e.participants):
                p_event.append(eidx)
                p_ind.append(p.individual)
                p_g.append(p.g)
                p_delta.append(p.delta)
                p_step.append(step)
                p_owner.append(i == 0)
                part_counts[step] += 1

    def offsets(counts):
        out = np.zeros(T + 1, dtype=np.int64)
        np.cumsum(counts, out=out[1:])
        return out

    return EventTable(
        num_individuals=system.num_individuals,
        num_states=S,
        horizon=T,
        event_step=np.asarray(ev_step, dtype=np.int64),
        event_id=np.asarray(ev_id, dtype=np.int64),
        event_group=np.asarray(ev_group, dtype=np.int64),
        groups=tuple(groups),
        event_rate=np.asarray(ev_rate, dtype=float),
        event_offsets=offsets(ev_counts),
        event_first_part=np.asarray(ev_first, dtype=np.int64),
        event_owner=np.asarray(ev_owner, dtype=np.int64),
        part_event=np.asarray(p_event, dtype=np.int64),
        part_ind=np.asarray(p_ind, dtype=np.int64),
        part_g=np.asarray(p_g, dtype=float).reshape(-1, S),
        part_delta=np.asarray(p_delta, dtype=np.int64),
        part_step=np.asarray(p_step, dtype=np.int64),
        part_owner=np.asarray(p_owner, dtype=bool),
        part_offsets=offsets(part_counts),
        competition=system.competition,
    )


@dataclass(frozen=True, eq=False)
class ObservationModel:
    """Per-individual emission P(y | x); missing observations contribute 1."""
    emission: np.ndarray

    def __post_init__(self):
        em = np.array(self.emission, dtype=float)
        if em.ndim != 2:
            raise ModelValidationError("emission must be a 2-D matrix")
        if (em < 0).any() or np.abs(em.sum(axis=1) - 1.0).max() > ROW_TOL:
            raise ModelValidationError("emission rows must be probability vectors")
        em.setflags(write=False)
        object.__setattr__(self, "emission", em)

    @classmethod
    def identity(cls, num_states: int) -> "ObservationModel":
        return cls(np.eye(num_states))

    @classmethod
    def uniform(cls, num_states: int) -> "ObservationModel":
        return cls(np.full((num_states, num_states), 1.0 / num_states))

    @property
    def num_states(self) -> int:
        return self.emission.shape[0]

    def likelihoods(self, observations: np.ndarray) -> np.ndarray:
        """Evidence grid e[m, t, x] = P(y_t^{(m)} | x), 1 where y is missing.

        Args:
            observations: T × M integer grid, MISSING (-1) for absent cells

        Returns:
            M × T × S array
        """
        obs = np.asarray(observations, dtype=np.int64)
        if obs.ndim != 2:
            raise ModelValidationError("observations must be a T × M grid")
        if (obs >= self.emission.shape[1]).any() or (obs < MISSING).any():
            raise ModelValidationError("observation value outside the emission alphabet")
        ys = obs.T
        vals = np.moveaxis(self.emission[:, np.clip(ys, 0, None)], 0, -1)
        return np.where((ys >= 0)[..., None], vals, 1.0)


@dataclass(frozen=True, eq=False)
class TrajectoryBundle:
    """Hidden path, observations (MISSING where absent) and fired events."""
    states: np.ndarray                      # T × M
    observations: np.ndarray                # T × M
    events: Tuple[EventLabel, ...] = field(default=())

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.int64)
        obs = np.asarray(self.observations, dtype=np.int64)
        if states.shape != obs.shape or states.ndim != 2:
            raise ModelValidationError("states and observations must be T × M grids of equal shape")
        events = tuple(self.events) if self.events else (None,) * states.shape[0]
        if len(events) != states.shape[0]:
            raise ModelValidationError("events must have one entry per timestep")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "events", events)

    @property
    def horizon(self) -> int:
        return self.states.shape[0]

    @property
    def num_individuals(self) -> int:
        return self.states.shape[1]

    def validate(self, system: SkmSystem) -> None:
        if self.states.shape != (system.horizon, system.num_individuals):
            raise ModelValidationError("bundle dimensions do not match the system")
        S = system.num_states
        if (self.states < 0).any() or (self.states >= S).any():
            raise ModelValidationError("state value outside 0..S-1")
        if (self.observations < MISSING).any() or (self.observations >= S).any():
            raise ModelValidationError("observation value outside 0..S-1")

    def with_observations(self, observations: np.ndarray) -> "TrajectoryBundle":
        return TrajectoryBundle(self.states, observations, self.events)


@dataclass(frozen=True)
class PathScore:
    """Log-likelihood of a path; zero_step names the first impossible step."""
    log_prob: float
    zero_step: Optional[int] = None

    def __float__(self) -> float:
        return self.log_prob


def _fired_ids(v: EventLabel) -> Tuple[int, ...]:
    if v is None:
        return ()
    if isinstance(v, (int, np.integer)):
        return (int(v),)
    return tuple(int(k) for k in v)


def _owner_totals(system: SkmSystem, events: Sequence[EventSpec], hazards: np.ndarray) -> np.ndarray:
    owners = np.array([e.owner for e in events], dtype=np.int64)
    return np.bincount(owners, weights=hazards, minlength=system.num_individuals)


def _hazards(system: SkmSystem, t: int, x: Sequence[int]) -> np.ndarray:
    events = system.events(t)
    hazards = np.array([e.hazard(x) for e in events], dtype=float)
    if not hazards.size:
        return hazards
    if system.competition == Competition.INDIVIDUAL:
        totals = _owner_totals(system, events, hazards)
        worst = int(np.argmax(totals))
        if totals[worst] > 1.0 + HAZARD_TOL:
            raise HazardOverflowError(t, total=float(totals[worst]), individual=worst)
    elif hazards.sum() > 1.0 + HAZARD_TOL:
        worst = events[int(np.argmax(hazards))].id
        raise HazardOverflowError(t, event_id=worst, total=float(hazards.sum()))
    return hazards


def event_hazard(system: SkmSystem, t: int, x: Sequence[int], k: int) -> float:
    """Probability that event k fires at step t from joint state x."""
    h = system.event(t, k).hazard(x)
    if h > 1.0 + HAZARD_TOL:
        raise HazardOverflowError(t, event_id=k, total=h)
    return h


def transition_prob(
    system: SkmSystem,
    t: int,
    x_prev: Sequence[int],
    x_curr: Sequence[int],
    v: EventLabel,
) -> float:
    """Event-based kernel P(x_t, v_t | x_{t-1}).

    v is None for the no-event branch, one event id, or under
    per-individual competition the collection of ids fired at this step.
    """
    x_prev = np.asarray(x_prev, dtype=np.int64)
    x_curr = np.asarray(x_curr, dtype=np.int64)
    hazards = _hazards(system, t, x_prev)
    fired = _fired_ids(v)
    events = [system.event(t, k) for k in fired]

    if system.competition == Competition.SYSTEM:
        if len(events) > 1:
            return 0.0
        if not events:
            if not np.array_equal(x_prev, x_curr):
                return 0.0
            return max(0.0, 1.0 - float(hazards.sum()))
        if not np.array_equal(events[0].apply(x_prev), x_curr):
            return 0.0
        return events[0].hazard(x_prev)

    owners = [e.owner for e in events]
    if len(set(owners)) != len(owners):
        return 0.0
    x = x_prev
    for e in events:
        x = e.apply(x)
    if not np.array_equal(x, x_curr):
        return 0.0
    totals = _owner_totals(system, system.events(t), hazards)
    idle = np.ones(system.num_individuals, dtype=bool)
    idle[owners] = False
    prob = float(np.prod([e.hazard(x_prev) for e in events]))
    return prob * float(np.prod(np.clip(1.0 - totals[idle], 0.0, None)))


def transition_marginal(system: SkmSystem, t: int, x_prev: Sequence[int], x_curr: Sequence[int]) -> float:
    """P(x_t | x_{t-1}) with the event label summed out."""
    x_prev = np.asarray(x_prev, dtype=np.int64)
    x_curr = np.asarray(x_curr, dtype=np.int64)
    events = system.events(t)
    hazards = _hazards(system, t, x_prev)

    if system.competition == Competition.SYSTEM:
        total = max(0.0, 1.0 - float(hazards.sum())) if np.array_equal(x_prev, x_curr) else 0.0
        for e, h in zip(events, hazards):
            if np.array_equal(e.apply(x_prev), x_curr):
                total += float(h)
        return total

    stay = np.clip(1.0 - _owner_totals(system, events, hazards), 0.0, None)
    kernel = np.where(x_prev == x_curr, stay, 0.0)
    for e, h in zip(events, hazards):
        n = e.owner
        if x_prev[n] + e.participants[0].delta == x_curr[n]:
            kernel[n] += h
    return float(np.prod(kernel))


def path_log_likelihood(
    system: SkmSystem,
    obsmodel: ObservationModel,
    bundle: TrajectoryBundle,
) -> PathScore:
    """log P(x_{1..T}, y_{1..T}, v_{1..T}); missing observations add 0."""
    bundle.validate(system)
    x = bundle.states
    evidence = obsmodel.likelihoods(bundle.observations)   # M × T × S
    M = system.num_individuals
    rows = np.arange(M)

    with np.errstate(divide="ignore"):
        total = float(np.log(system.initial_dist[rows, x[0]]).sum())
        total += float(np.log(evidence[rows, 0, x[0]]).sum())
    if not np.isfinite(total):
        return PathScore(-np.inf, 1)

    for t in range(2, system.horizon + 1):
        p = transition_prob(system, t, x[t - 2], x[t - 1], bundle.events[t - 1])
        e = evidence[rows, t - 1, x[t - 1]]
        if p <= 0.0 or (e <= 0.0).any():
            logger.debug(f"path has zero probability at t={t}")
            return PathScore(-np.inf, t)
        total += float(np.log(p) + np.log(e).sum())
    return PathScore(total)


def sample_path(
    system: SkmSystem,
    obsmodel: ObservationModel,
    seed: Union[int, np.random.Generator, None] = None,
) -> TrajectoryBundle:
    """Draw one path from the event-based model, recording the fired events."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    M, T = system.num_individuals, system.horizon
    per_individual = system.competition == Competition.INDIVIDUAL
    states = np.zeros((T, M), dtype=np.int64)
    events: List[EventLabel] = [None] * T
    cum_init = np.cumsum(system.initial_dist, axis=1)
    states[0] = (rng.random(M)[:, None] > cum_init).sum(axis=1)

    for t in range(2, T + 1):
        x = states[t - 2]
        hazards = _hazards(system, t, x)
        step_events = system.events(t)
        if per_individual:
            # each owner picks one of its events, or none, from its own uniform
            u = rng.random(M)
            acc = np.zeros(M)
            nxt = x.copy()
            fired = []
            for e, h in zip(step_events, hazards):
                n = e.owner
                if acc[n] <= u[n] < acc[n] + h:
                    fired.append(e.id)
                    nxt[n] += e.participants[0].delta
                acc[n] += h
            states[t - 1] = nxt
            events[t - 1] = tuple(sorted(fired)) if fired else None
            continue
        probs = np.append(hazards, max(0.0, 1.0 - hazards.sum()))
        choice = int(rng.choice(len(probs), p=probs / probs.sum()))
        if choice < len(hazards):
            event = step_events[choice]
            states[t - 1] = event.apply(x)
            events[t - 1] = event.id
        else:
            states[t - 1] = x

    cum_em = np.cumsum(obsmodel.emission, axis=1)
    u = rng.random((T, M))
    observations = (u[..., None] > cum_em[states]).sum(axis=2)
    return TrajectoryBundle(states, observations, tuple(events))
