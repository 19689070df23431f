"""
Sampling baselines: blocked Gibbs and bootstrap particle filter
采样基线：分块吉布斯采样与自举粒子滤波
"""

import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from loguru import logger

from .config import InferenceMode, SamplerConfig
from .engine import IndividualPosterior, evidence_grid
from .errors import HazardOverflowError, WeightCollapseError
from .model import HAZARD_TOL, EventTable, ObservationModel, SkmSystem, sample_path


@dataclass
class SamplerDiagnostics:
    """采样诊断"""
    method: str
    iterations: int = 0
    burn_in: int = 0
    stuck_updates: int = 0              # Gibbs: blocks whose conditional had no mass
    resample_count: int = 0             # PF
    change_trace: List[int] = field(default_factory=list)      # Gibbs: cells changed per sweep
    ess_trace: List[float] = field(default_factory=list)       # PF: ESS before resampling
    wall_time: float = 0.0
    converged: bool = True

    def to_dict(self) -> Dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Gibbs
# ---------------------------------------------------------------------------

def _owner_conditional_kernel(table: EventTable, paths: np.ndarray, m: int) -> np.ndarray:
    """Per-individual competition: m's own factor times the factors of the owners m gates.

    Entry [s, a, b] = K_m(b | a, others) · Π_n K_n(x_s^{(n)} | x_{s-1} with x^{(m)} = a),
    n running over owners with an event at s that m catalyses.
    """
    T, M = paths.shape
    S = table.num_states
    kernel = np.zeros((T, S, S))
    E = table.num_events
    if T < 2 or E == 0:
        kernel[1:] = np.eye(S)
        return kernel
    ind, step = table.part_ind, table.part_step
    is_m = ind == m
    prev = paths[step - 1, ind]
    values = np.where(is_m, 1.0, table.part_g[np.arange(len(ind)), prev])
    base = table.event_rate * np.multiply.reduceat(values, table.event_first_part)
    g_m = np.ones((E, S))
    g_m[table.part_event[is_m]] = table.part_g[is_m]
    hazard = base[:, None] * g_m                                # E × S, as a function of x_prev^{(m)}

    owner, es, delta = table.event_owner, table.event_step, table.event_delta
    x = np.arange(S)
    mine = owner == m
    own_total = np.zeros((T, S))
    np.add.at(own_total, es[mine], hazard[mine])
    if (own_total > 1.0 + HAZARD_TOL).any():
        s, _ = np.unravel_index(int(np.argmax(own_total)), own_total.shape)
        raise HazardOverflowError(int(s) + 1, total=float(own_total.max()), individual=m)
    kernel[:, x, x] = np.clip(1.0 - own_total, 0.0, None)
    kernel[0] = 0.0
    target = x[None, :] + delta[mine][:, None]
    valid = (target >= 0) & (target < S) & (g_m[mine] > 0)
    s_idx, x_idx, y_idx = np.broadcast_arrays(es[mine][:, None], x[None, :], np.clip(target, 0, S - 1))
    np.add.at(kernel, (s_idx, x_idx, y_idx), np.where(valid, hazard[mine], 0.0))

    gates = np.zeros(E, dtype=bool)
    gates[table.part_event[is_m & ~table.part_owner]] = True
    if not gates.any():
        return kernel
    key = es * M + owner
    wanted = np.unique(key[gates])
    related = np.isin(key, wanted)
    group = np.searchsorted(wanted, key[related])
    o, s_rel = owner[related], es[related]
    h = hazard[related]
    landed = (paths[s_rel - 1, o] + delta[related]) == paths[s_rel, o]
    G = len(wanted)
    total = np.zeros((G, S))
    hits = np.zeros((G, S))
    np.add.at(total, group, h)
    np.add.at(hits, group, np.where(landed[:, None], h, 0.0))
    g_step, g_owner = wanted // M, wanted % M
    if (total > 1.0 + HAZARD_TOL).any():
        worst = int(np.argmax(total.max(axis=1)))
        raise HazardOverflowError(int(g_step[worst]) + 1, total=float(total[worst].max()), individual=int(g_owner[worst]))
    stayed = paths[g_step, g_owner] == paths[g_step - 1, g_owner]
    factor = np.where(stayed[:, None], np.clip(1.0 - total, 0.0, None), 0.0) + hits
    phi = np.ones((T, S))
    np.multiply.at(phi, g_step, factor)
    return kernel * phi[:, :, None]


def conditional_kernel(table: EventTable, paths: np.ndarray, m: int) -> np.ndarray:
    """Kernel of individual m with every other path held fixed.

    Args:
        table: event table of the system
        paths: T × M current joint path
        m: individual being resampled

    Returns:
        T × S × S array; entry [s, a, b] = P(x_s^{(m)} = b, others as given | x_{s-1}^{(m)} = a, others)
    """
    if table.per_individual:
        return _owner_conditional_kernel(table, paths, m)
    T, M = paths.shape
    S = table.num_states
    kernel = np.zeros((T, S, S))
    if T < 2:
        return kernel
    E = table.num_events
    ind, step, delta = table.part_ind, table.part_step, table.part_delta
    is_m = ind == m

    prev_other = paths[step - 1, ind]
    others = np.where(is_m, 1.0, table.part_g[np.arange(len(ind)), prev_other])
    factor = np.ones(E)
    np.multiply.at(factor, table.part_event, others)
    weight = table.event_rate * factor

    g_m = np.ones((E, S))
    delta_m = np.zeros(E, dtype=np.int64)
    g_m[table.part_event[is_m]] = table.part_g[is_m]
    delta_m[table.part_event[is_m]] = delta[is_m]

    moved = paths[step, ind] - prev_other
    bad = (~is_m) & (moved != delta)
    inconsistent = np.bincount(table.part_event, weights=bad.astype(float), minlength=E)
    moving = np.bincount(table.part_event, weights=((~is_m) & (delta != 0)).astype(float), minlength=E)

    changes = paths[1:] != paths[:-1]
    changed_others = np.zeros(T, dtype=np.int64)
    changed_others[1:] = changes.sum(axis=1) - changes[:, m]
    ok = (inconsistent == 0) & (moving == changed_others[table.event_step])

    hazard = np.zeros((T, S))
    np.add.at(hazard, table.event_step, weight[:, None] * g_m)
    if (hazard > 1.0 + HAZARD_TOL).any():
        s, _ = np.unravel_index(int(np.argmax(hazard)), hazard.shape)
        raise HazardOverflowError(int(s) + 1, total=float(hazard.max()), individual=m)

    x = np.arange(S)
    stay = np.where(changed_others[:, None] == 0, np.clip(1.0 - hazard, 0.0, None), 0.0)
    stay[0] = 0.0
    kernel[:, x, x] += stay

    target = x[None, :] + delta_m[:, None]
    valid = (target >= 0) & (target < S) & (g_m > 0) & ok[:, None]
    s_idx, x_idx, y_idx = np.broadcast_arrays(table.event_step[:, None], x[None, :], np.clip(target, 0, S - 1))
    np.add.at(kernel, (s_idx, x_idx, y_idx), np.where(valid, weight[:, None] * g_m, 0.0))
    return kernel


def _draw(weights: np.ndarray, u: float) -> int:
    cdf = np.cumsum(weights)
    return min(int(np.searchsorted(cdf, u * cdf[-1], side="right")), len(weights) - 1)


def _ffbs(
    kernel: np.ndarray,
    initial: np.ndarray,
    evidence: np.ndarray,
    rng: np.random.Generator,
) -> Optional[np.ndarray]:
    """Forward-filter backward-sample one chain; None when the evidence has no support."""
    T, S = evidence.shape
    filt = np.zeros((T, S))
    f = initial * evidence[0]
    for s in range(T):
        if s > 0:
            f = (filt[s - 1] @ kernel[s]) * evidence[s]
        z = f.sum()
        if not z > 0:
            return None
        filt[s] = f / z

    u = rng.random(T)
    path = np.zeros(T, dtype=np.int64)
    path[T - 1] = _draw(filt[T - 1], u[T - 1])
    for s in range(T - 1, 0, -1):
        w = filt[s - 1] * kernel[s][:, path[s]]
        if not w.sum() > 0:
            return None
        path[s - 1] = _draw(w, u[s - 1])
    return path


def gibbs_infer(
    system: SkmSystem,
    obsmodel: ObservationModel,
    observations: np.ndarray,
    config: Optional[SamplerConfig] = None,
) -> Tuple[IndividualPosterior, SamplerDiagnostics]:
    """Blocked Gibbs: resample each individual's whole path given all the others.

    Rate constants are held fixed. Marginals are visit frequencies after burn-in.
    """
    config = config or SamplerConfig()
    started = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    evidence = evidence_grid(system, obsmodel, observations)
    table = system.event_table
    M, T, S = evidence.shape
    burn_in = config.effective_burn_in
    diag = SamplerDiagnostics(method="gibbs", iterations=config.iterations, burn_in=burn_in)

    paths = sample_path(system, obsmodel, rng).states.copy()
    counts = np.zeros((M, T, S))
    rows = np.arange(T)
    for sweep in range(config.iterations):
        changed = 0
        for m in range(M):
            kernel = conditional_kernel(table, paths, m)
            path = _ffbs(kernel, system.initial_dist[m], evidence[m], rng)
            if path is None:
                diag.stuck_updates += 1
                continue
            changed += int((path != paths[:, m]).sum())
            paths[:, m] = path
        diag.change_trace.append(changed)
        if sweep >= burn_in:
            counts[np.arange(M)[:, None], rows[None, :], paths.T] += 1.0

    kept = config.iterations - burn_in
    gamma = counts / kept
    diag.wall_time = time.perf_counter() - started
    if diag.stuck_updates:
        logger.warning(f"Gibbs: {diag.stuck_updates} block updates had no support and kept the current path")
    logger.info(f"Gibbs finished: {config.iterations} sweeps, burn-in {burn_in}, {diag.wall_time:.3f}s")
    return IndividualPosterior(gamma=gamma, table=table, mode=InferenceMode.SMOOTHING), diag


# ---------------------------------------------------------------------------
# Particle filter
# ---------------------------------------------------------------------------

def _step_hazards(table: EventTable, s: int, particles: np.ndarray) -> Tuple[np.ndarray, slice]:
    ev, ps = table.events_slice(s), table.participants_slice(s)
    if ev.stop == ev.start:
        return np.zeros((particles.shape[0], 0)), ev
    local = np.arange(ps.stop - ps.start)
    values = table.part_g[ps][local[None, :], particles[:, table.part_ind[ps]]]
    starts = table.event_first_part[ev] - ps.start
    hazards = table.event_rate[ev][None, :] * np.multiply.reduceat(values, starts, axis=1)
    return hazards, ev


def _delta_matrix(table: EventTable, ev: slice, s: int) -> np.ndarray:
    """(K+1) × M state changes per branch; the last row is no event."""
    K = ev.stop - ev.start
    out = np.zeros((K + 1, table.num_individuals), dtype=np.int64)
    ps = table.participants_slice(s)
    out[table.part_event[ps] - ev.start, table.part_ind[ps]] = table.part_delta[ps]
    return out


def _owner_step(
    table: EventTable, ev: slice, s: int, particles: np.ndarray, hazards: np.ndarray, rng: np.random.Generator,
) -> np.ndarray:
    """Per-individual competition: every owner fires at most one of its events, independently."""
    if hazards.shape[1] == 0:
        return particles
    owner = table.event_owner[ev]
    order = np.argsort(owner, kind="stable")
    owner = owner[order]
    delta = table.event_delta[ev][order]
    hazards = hazards[:, order]
    starts = np.flatnonzero(np.r_[True, owner[1:] != owner[:-1]])
    owners = owner[starts]
    sizes = np.diff(np.r_[starts, len(owner)])

    totals = np.add.reduceat(hazards, starts, axis=1)
    if (totals > 1.0 + HAZARD_TOL).any():
        col = int(np.argmax(totals.max(axis=0)))
        raise HazardOverflowError(s + 1, total=float(totals[:, col].max()), individual=int(owners[col]))
    cum = np.cumsum(hazards, axis=1)
    before = np.hstack([np.zeros((len(particles), 1)), cum[:, starts[1:] - 1]])
    group = np.repeat(np.arange(len(starts)), sizes)
    local = cum - before[:, group]
    u = rng.random((len(particles), len(starts)))
    chosen = np.add.reduceat((local <= u[:, group]).astype(np.int64), starts, axis=1)
    fired = chosen < sizes
    change = np.where(fired, delta[np.minimum(starts + chosen, len(owner) - 1)], 0)
    out = particles.copy()
    out[:, owners] += change
    return out


def _weighted_marginals(states: np.ndarray, weights: np.ndarray, S: int) -> np.ndarray:
    """M × S marginal of weighted particles (N × M)."""
    return np.einsum("n,nms->ms", weights, np.eye(S)[states])


def _systematic(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Systematic resampling: one uniform offset, N evenly spaced positions."""
    N = len(weights)
    positions = (rng.random() + np.arange(N)) / N
    return np.minimum(np.searchsorted(np.cumsum(weights), positions, side="right"), N - 1)


def pf_infer(
    system: SkmSystem,
    obsmodel: ObservationModel,
    observations: np.ndarray,
    config: Optional[SamplerConfig] = None,
) -> Tuple[IndividualPosterior, SamplerDiagnostics]:
    """Bootstrap filter over joint states with systematic resampling at an ESS threshold.

    Smoothed marginals follow surviving ancestral paths.
    """
    config = config or SamplerConfig()
    started = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    evidence = evidence_grid(system, obsmodel, observations)
    table = system.event_table
    M, T, S = evidence.shape
    N = config.particles
    diag = SamplerDiagnostics(method="pf", iterations=N)

    history = np.zeros((T, N, M), dtype=np.int64)
    parents = np.tile(np.arange(N), (T, 1))
    filtered = np.zeros((M, T, S))
    log_w = np.zeros(N)

    cum_init = np.cumsum(system.initial_dist, axis=1)
    particles = (rng.random((N, M))[..., None] > cum_init[None]).sum(axis=2)
    cols = np.arange(M)

    for s in range(T):
        if s > 0:
            hazards, ev = _step_hazards(table, s, particles)
            if table.per_individual:
                particles = _owner_step(table, ev, s, particles, hazards, rng)
            else:
                total = hazards.sum(axis=1)
                if (total > 1.0 + HAZARD_TOL).any():
                    raise HazardOverflowError(s + 1, total=float(total.max()))
                probs = np.hstack([hazards, np.clip(1.0 - total, 0.0, None)[:, None]])
                cum = np.cumsum(probs, axis=1)
                u = rng.random(N)[:, None] * cum[:, -1:]
                choice = np.minimum((u >= cum).sum(axis=1), probs.shape[1] - 1)
                particles = particles + _delta_matrix(table, ev, s)[choice]

        with np.errstate(divide="ignore"):
            log_w = log_w + np.log(evidence[cols[None, :], s, particles]).sum(axis=1)
        top = log_w.max()
        if not np.isfinite(top):
            raise WeightCollapseError(s + 1)
        w = np.exp(log_w - top)
        w /= w.sum()
        history[s] = particles
        filtered[:, s] = _weighted_marginals(particles, w, S)

        ess = 1.0 / float((w ** 2).sum())
        diag.ess_trace.append(ess)
        if ess < config.resample_threshold * N:
            idx = _systematic(w, rng)
            particles = particles[idx]
            history[s] = particles
            parents[s] = parents[s][idx]
            log_w = np.zeros(N)
            diag.resample_count += 1
        else:
            log_w = log_w - top

    w = np.exp(log_w - log_w.max())
    w /= w.sum()
    smoothed = np.zeros((M, T, S))
    lineage = np.arange(N)
    for s in range(T - 1, -1, -1):
        smoothed[:, s] = _weighted_marginals(history[s][lineage], w, S)
        lineage = parents[s][lineage]

    gamma = smoothed if config.mode == InferenceMode.SMOOTHING else filtered
    diag.wall_time = time.perf_counter() - started
    if diag.resample_count:
        logger.warning(f"PF resampled {diag.resample_count} times; ancestral paths may be degenerate")
    logger.info(f"PF finished: {N} particles, {diag.wall_time:.3f}s")
    posterior = IndividualPosterior(gamma=gamma, table=table, filtered=filtered, mode=config.mode)
    return posterior, diag
