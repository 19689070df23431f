"""
Shared fixtures: random small kinetic models and brute-force oracles
测试公共夹具
"""

import itertools
from typing import Dict, List, Optional, Tuple

import numpy as np
import pytest

from kinetic_vi.epidemic import ContactGraph, EpidemicParams
from kinetic_vi.model import (
    MISSING,
    Competition,
    EventLabel,
    EventSpec,
    ObservationModel,
    Participant,
    SkmSystem,
    sample_path,
    transition_prob,
)

UP = (1.0, 0.0)
DOWN = (0.0, 1.0)


def noisy_emission(accuracy: float = 0.9) -> ObservationModel:
    return ObservationModel(np.array([[accuracy, 1.0 - accuracy], [1.0 - accuracy, accuracy]]))


def random_system(
    seed: int,
    num_individuals: int = 3,
    horizon: int = 10,
    max_events: int = 3,
    rate_range: Tuple[float, float] = (0.02, 0.1),
    catalysts: bool = True,
    competition: Competition = Competition.SYSTEM,
) -> SkmSystem:
    """Binary-state system with flip events, some gated by a catalyst individual."""
    rng = np.random.default_rng(seed)
    M = num_individuals
    events_at = {}
    for t in range(2, horizon + 1):
        events = []
        for k in range(int(rng.integers(0, max_events + 1))):
            m = int(rng.integers(M))
            g, delta = (UP, 1) if rng.random() < 0.5 else (DOWN, -1)
            participants = [Participant(m, g, delta=delta)]
            if catalysts and M > 1 and rng.random() < 0.6:
                n = int(rng.choice([i for i in range(M) if i != m]))
                gate = tuple(float(v) for v in rng.uniform(0.2, 1.0, size=2))
                participants.append(Participant(n, gate, delta=0, reactants=1, products=1))
            events.append(EventSpec(
                id=k,
                rate_constant=float(rng.uniform(*rate_range)),
                participants=tuple(participants),
                rate_group="up" if delta > 0 else "down",
            ))
        events_at[t] = events
    initial = rng.dirichlet(np.ones(2), size=M)
    return SkmSystem(M, 2, horizon, events_at, initial, competition)


def random_observations(system: SkmSystem, obsmodel: ObservationModel, seed: int, missing: float = 0.2) -> np.ndarray:
    rng = np.random.default_rng(seed)
    obs = sample_path(system, obsmodel, rng).observations.copy()
    obs[rng.random(obs.shape) < missing] = MISSING
    return obs


def step_labels(system: SkmSystem, t: int, prev: Tuple[int, ...]) -> List[EventLabel]:
    """Every event label with positive hazard at t; owners fire at most once under per-individual competition."""
    events = [e for e in system.events(t) if e.hazard(prev) > 0]
    if system.competition == Competition.SYSTEM:
        return [None] + [e.id for e in events]
    by_owner: Dict[int, List[Optional[int]]] = {}
    for e in events:
        by_owner.setdefault(e.owner, [None]).append(e.id)
    labels: List[EventLabel] = []
    for combo in itertools.product(*by_owner.values()):
        fired = tuple(sorted(k for k in combo if k is not None))
        labels.append(fired or None)
    return labels


def apply_label(system: SkmSystem, t: int, prev: Tuple[int, ...], v: EventLabel) -> Tuple[int, ...]:
    x = np.array(prev)
    for k in ([] if v is None else [v] if isinstance(v, int) else v):
        x = system.event(t, k).apply(x)
    return tuple(int(a) for a in x)


def brute_force(
    system: SkmSystem,
    obsmodel: ObservationModel,
    observations: np.ndarray,
) -> Tuple[float, np.ndarray, List[Dict]]:
    """Enumerate every (state, event) path; only for a handful of steps.

    Returns:
        (log evidence, M × T × S smoothed marginals, per-t posteriors over event labels)
    """
    M, S, T = system.num_individuals, system.num_states, system.horizon
    evidence = obsmodel.likelihoods(observations)
    rows = np.arange(M)
    paths: Dict[Tuple, float] = {}
    for x1 in itertools.product(range(S), repeat=M):
        w = float(np.prod(system.initial_dist[rows, x1]) * np.prod(evidence[rows, 0, x1]))
        if w > 0:
            paths[((x1,), ())] = w
    for t in range(2, T + 1):
        grown: Dict[Tuple, float] = {}
        for (xs, vs), w in paths.items():
            prev = xs[-1]
            for v in step_labels(system, t, prev):
                nxt = apply_label(system, t, prev, v)
                p = transition_prob(system, t, prev, nxt, v)
                p *= float(np.prod(evidence[rows, t - 1, nxt]))
                if p > 0:
                    grown[(xs + (nxt,), vs + (v,))] = w * p
        paths = grown

    z = sum(paths.values())
    marginals = np.zeros((M, T, S))
    event_post: List[Dict] = [dict() for _ in range(T)]
    for (xs, vs), w in paths.items():
        for t, x in enumerate(xs):
            marginals[rows, t, x] += w / z
        for s, v in enumerate(vs, start=1):
            event_post[s][v] = event_post[s].get(v, 0.0) + w / z
    return float(np.log(z)), marginals, event_post


def pair_count_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """AUC by comparing every positive with every negative; ties count 1/2."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins) / (len(pos) * len(neg))


@pytest.fixture
def emission() -> ObservationModel:
    return noisy_emission()


@pytest.fixture
def small_system() -> SkmSystem:
    return random_system(7)


@pytest.fixture
def sis_params() -> EpidemicParams:
    return EpidemicParams(c1=0.1, c2=0.05, c3=0.01, obs_sensitivity=0.9, obs_specificity=0.9)


@pytest.fixture
def triangle_contacts() -> ContactGraph:
    """Three individuals, T=8, a rotating set of contacts."""
    edges = [(t, t % 3, (t + 1) % 3) for t in range(1, 9)] + [(4, 0, 2), (6, 0, 1)]
    return ContactGraph.from_edges(3, 8, edges)
