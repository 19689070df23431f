"""
Exact joint-state forward-backward
精确联合状态前向后向推断

Joint states are mixed-radix integers: individual m contributes
digit x^{(m)} with weight S^m. Used as ground truth on small systems.

Under system-wide competition each step has K+1 sparse branches per joint
state. Under per-individual competition owners move independently, so a
step is a dense N × N kernel built from per-owner factors K_n(b | x_prev);
that path is capped at DENSE_STATE_CAP joint states.
"""

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from loguru import logger

from .errors import HazardOverflowError, ModelValidationError, StateSpaceTooLargeError
from .model import HAZARD_TOL, Competition, ObservationModel, SkmSystem

DEFAULT_STATE_CAP = 2 ** 20
DENSE_STATE_CAP = 2 ** 10


def joint_digits(num_individuals: int, num_states: int) -> np.ndarray:
    """(S^M, M) table of per-individual states for every joint index."""
    n = num_states ** num_individuals
    idx = np.arange(n, dtype=np.int64)
    weights = num_states ** np.arange(num_individuals, dtype=np.int64)
    return (idx[:, None] // weights[None, :]) % num_states


@dataclass(frozen=True, eq=False)
class JointPosterior:
    """Exact one- and two-slice statistics over the joint state space.

    System-wide competition: xi[s] has shape (K+1, N) for internal step
    s >= 1, row 0 the no-event branch, row r >= 1 event event_ids[s][r-1];
    targets[s] holds the joint index reached along each branch.

    Per-individual competition: xi and targets are None. kernels[s] holds
    K_n(b | x_prev) as M × N × S and own_pairs[s][i, n, b] is
    P(x_{t-1} = i, x_t^{(n)} = b | y).
    """
    num_individuals: int
    num_states: int
    digits: np.ndarray                          # N × M
    gamma: np.ndarray                           # T × N, smoothed
    alpha: np.ndarray                           # T × N, filtered P(x_t | y_1..t)
    beta: np.ndarray                            # T × N, scaled backward
    xi: Tuple[Optional[np.ndarray], ...]
    targets: Tuple[Optional[np.ndarray], ...]
    event_ids: Tuple[np.ndarray, ...]
    event_prob: Tuple[np.ndarray, ...]          # per step, P(event fires | y)
    no_event_prob: np.ndarray                   # T, P(nothing fires | y)
    log_norm: np.ndarray                        # T, log c_t
    log_evidence: float
    competition: Competition = Competition.SYSTEM
    hazards: Tuple[Optional[np.ndarray], ...] = ()      # K × N per step
    kernels: Tuple[Optional[np.ndarray], ...] = ()
    own_pairs: Tuple[Optional[np.ndarray], ...] = ()
    event_owner: Tuple[np.ndarray, ...] = ()
    event_delta: Tuple[np.ndarray, ...] = ()

    @property
    def horizon(self) -> int:
        return self.gamma.shape[0]

    def decode(self, index: int) -> Tuple[int, ...]:
        return tuple(int(v) for v in self.digits[index])

    def _check_step(self, t: int) -> int:
        if not 2 <= t <= self.horizon:
            raise ModelValidationError(f"two-slice statistics exist for t in 2..{self.horizon}")
        return t - 1

    def xi_map(self, t: int) -> Dict[Tuple[Tuple[int, ...], Tuple[int, ...], Optional[int]], float]:
        """Non-zero entries of ξ_t keyed by (x_prev, x_curr, v); v=None is no event."""
        s = self._check_step(t)
        if self.competition == Competition.INDIVIDUAL:
            raise ModelValidationError("per-individual competition keeps no joint ξ table; use event_probs")
        xi, targets, ids = self.xi[s], self.targets[s], self.event_ids[s]
        out = {}
        rows, cols = np.nonzero(xi)
        for r, i in zip(rows, cols):
            v = None if r == 0 else int(ids[r - 1])
            out[(self.decode(i), self.decode(targets[r, i]), v)] = float(xi[r, i])
        return out

    def event_probs(self, t: int) -> Dict[Optional[int], float]:
        """P(v fires at t | y) per event id; None is the step with no event at all."""
        s = self._check_step(t)
        out: Dict[Optional[int], float] = {None: float(self.no_event_prob[s])}
        for k, p in zip(self.event_ids[s], self.event_prob[s]):
            out[int(k)] = float(p)
        return out


def _step_hazards(table, s: int, digits: np.ndarray, radix: np.ndarray):
    """Per-event hazards K × N and joint-index shifts at step s."""
    N = digits.shape[0]
    ev = table.events_slice(s)
    h = np.repeat(table.event_rate[ev][:, None], N, axis=1)
    shift = np.zeros((h.shape[0], N), dtype=np.int64)
    for p in range(table.part_offsets[s], table.part_offsets[s + 1]):
        e = table.part_event[p] - ev.start
        m = table.part_ind[p]
        h[e] *= table.part_g[p][digits[:, m]]
        shift[e] += table.part_delta[p] * radix[m]
    return ev, h, shift


def _owner_kernels(table, ev: slice, h: np.ndarray, digits: np.ndarray, reachable: np.ndarray, t: int) -> np.ndarray:
    """K_n(b | x_prev) as M × N × S; raises when an owner's total exceeds 1 on a reachable state."""
    N, M = digits.shape
    S = table.num_states
    owner = table.event_owner[ev]
    delta = table.event_delta[ev]
    totals = np.zeros((M, N))
    np.add.at(totals, owner, h)
    over = (totals > 1.0 + HAZARD_TOL) & reachable[None, :]
    if over.any():
        n, i = np.unravel_index(int(np.argmax(np.where(over, totals, -np.inf))), totals.shape)
        raise HazardOverflowError(t, total=float(totals[n, i]), individual=int(n))
    kernel = np.zeros((M, N, S))
    cols = np.arange(N)
    kernel[np.arange(M)[:, None], cols[None, :], digits.T] = np.clip(1.0 - totals, 0.0, None)
    for e in range(len(owner)):
        n = owner[e]
        target = np.clip(digits[:, n] + delta[e], 0, S - 1)
        kernel[n, cols, target] += h[e]
    return kernel


def _dense_transition(kernel: np.ndarray, digits: np.ndarray) -> np.ndarray:
    """N × N joint kernel Π_n K_n(x_curr^{(n)} | x_prev)."""
    N, M = digits.shape
    trans = np.ones((N, N))
    for n in range(M):
        trans *= kernel[n][:, digits[:, n]]
    return trans


def exact_forward_backward(
    system: SkmSystem,
    obsmodel: ObservationModel,
    observations: np.ndarray,
    cap: int = DEFAULT_STATE_CAP,
) -> JointPosterior:
    """Scaled forward-backward over all S^M joint states.

    Args:
        system: the kinetic model
        obsmodel: per-individual emission model
        observations: T × M grid, -1 for missing
        cap: largest joint state space accepted

    Returns:
        JointPosterior with smoothed and filtered grids and log P(y_1..T)
    """
    M, S, T = system.num_individuals, system.num_states, system.horizon
    dense = system.competition == Competition.INDIVIDUAL
    size = S ** M
    limit = min(cap, DENSE_STATE_CAP) if dense else cap
    if size > limit:
        raise StateSpaceTooLargeError(size, limit)

    digits = joint_digits(M, S)
    N = size
    radix = S ** np.arange(M, dtype=np.int64)
    table = system.event_table
    evidence_m = obsmodel.likelihoods(observations)      # M × T × S
    if evidence_m.shape[:2] != (M, T):
        raise ModelValidationError("observations do not match the system dimensions")

    evidence = np.ones((T, N))
    prior = np.ones(N)
    for m in range(M):
        evidence *= evidence_m[m][:, digits[:, m]]
        prior *= system.initial_dist[m, digits[:, m]]

    alpha = np.zeros((T, N))
    log_norm = np.zeros(T)
    hazards = [None] * T
    targets = [None] * T
    kernels = [None] * T
    event_ids = [np.zeros(0, dtype=np.int64)] * T
    event_owner = [np.zeros(0, dtype=np.int64)] * T
    event_delta = [np.zeros(0, dtype=np.int64)] * T

    def normalize(vec, s):
        c = vec.sum()
        if c <= 0.0:
            raise ModelValidationError(f"observations have zero probability at t={s + 1}")
        log_norm[s] = np.log(c)
        return vec / c

    alpha[0] = normalize(prior * evidence[0], 0)
    for s in range(1, T):
        ev, h, shift = _step_hazards(table, s, digits, radix)
        reachable = alpha[s - 1] > 0
        event_ids[s] = table.event_id[ev].copy()
        if dense:
            kernels[s] = _owner_kernels(table, ev, h, digits, reachable, s + 1)
            hazards[s] = h
            event_owner[s] = table.event_owner[ev].copy()
            event_delta[s] = table.event_delta[ev].copy()
            pred = alpha[s - 1] @ _dense_transition(kernels[s], digits)
            alpha[s] = normalize(pred * evidence[s], s)
            continue
        total = h.sum(axis=0)
        if (total[reachable] > 1.0 + HAZARD_TOL).any():
            worst = int(np.argmax(np.where(reachable, total, -np.inf)))
            k = int(table.event_id[ev][np.argmax(h[:, worst])])
            raise HazardOverflowError(s + 1, event_id=k, total=float(total[worst]))
        stay = np.clip(1.0 - total, 0.0, None)
        base = np.arange(N, dtype=np.int64)
        tgt = np.where(h > 0, base[None, :] + shift, base[None, :])
        hazards[s] = np.vstack([stay[None, :], h])
        targets[s] = np.vstack([base[None, :], tgt])

        flow = alpha[s - 1][None, :] * hazards[s]
        pred = np.bincount(targets[s].ravel(), weights=flow.ravel(), minlength=N)
        alpha[s] = normalize(pred * evidence[s], s)

    beta = np.ones((T, N))
    gamma = np.zeros((T, N))
    xi = [None] * T
    own_pairs = [None] * T
    event_prob = [np.zeros(0)] * T
    no_event_prob = np.ones(T)
    gamma[T - 1] = alpha[T - 1]
    c = np.exp(log_norm)
    if dense:
        onehot = (digits[:, :, None] == np.arange(S)[None, None, :]).reshape(N, M * S).astype(float)
        cols = np.arange(N)
    for s in range(T - 1, 0, -1):
        eb = evidence[s] * beta[s]
        if dense:
            weighted = _dense_transition(kernels[s], digits) * eb[None, :]
            beta[s - 1] = weighted.sum(axis=1) / c[s]
            joint = alpha[s - 1][:, None] * weighted / c[s]
            pairs = (joint @ onehot).reshape(N, M, S)
            own_pairs[s] = pairs
            no_event_prob[s] = float(np.trace(joint))
            probs = np.zeros(len(event_ids[s]))
            for e, (n, d) in enumerate(zip(event_owner[s], event_delta[s])):
                target = np.clip(digits[:, n] + d, 0, S - 1)
                k_val = kernels[s][n, cols, target]
                share = np.divide(hazards[s][e], k_val, out=np.zeros(N), where=k_val > 0)
                probs[e] = float((pairs[cols, n, target] * share).sum())
            event_prob[s] = probs
        else:
            weighted = hazards[s] * eb[targets[s]]
            beta[s - 1] = weighted.sum(axis=0) / c[s]
            xi[s] = alpha[s - 1][None, :] * weighted / c[s]
            no_event_prob[s] = float(xi[s][0].sum())
            event_prob[s] = xi[s][1:].sum(axis=1)
        gamma[s - 1] = alpha[s - 1] * beta[s - 1]

    log_evidence = float(log_norm.sum())
    logger.debug(f"exact forward-backward: N={N}, T={T}, dense={dense}, log_evidence={log_evidence:.6f}")
    return JointPosterior(
        num_individuals=M,
        num_states=S,
        digits=digits,
        gamma=gamma,
        alpha=alpha,
        beta=beta,
        xi=tuple(xi),
        targets=tuple(targets),
        event_ids=tuple(event_ids),
        event_prob=tuple(event_prob),
        no_event_prob=no_event_prob,
        log_norm=log_norm,
        log_evidence=log_evidence,
        competition=system.competition,
        hazards=tuple(hazards),
        kernels=tuple(kernels),
        own_pairs=tuple(own_pairs),
        event_owner=tuple(event_owner),
        event_delta=tuple(event_delta),
    )


def exact_individual_marginals(post: JointPosterior, m: int, filtered: bool = False) -> np.ndarray:
    """T × S marginal of individual m (smoothed, or filtered when asked)."""
    if not 0 <= m < post.num_individuals:
        raise ModelValidationError(f"individual {m} out of range")
    grid = post.alpha if filtered else post.gamma
    onehot = np.eye(post.num_states)[post.digits[:, m]]
    return grid @ onehot


def exact_individual_two_slice(post: JointPosterior, t: int, m: int) -> Tuple[np.ndarray, np.ndarray]:
    """Joint ξ_t projected onto individual m.

    Under per-individual competition only the events m owns get a branch;
    everything else is folded into r=0.

    Returns:
        (event_ids, table) with table[x_prev, x_curr, r]; r=0 is no event
    """
    s = t - 1
    S = post.num_states
    if post.competition == Competition.INDIVIDUAL:
        own = np.flatnonzero(post.event_owner[s] == m)
        pairs, kernel = post.own_pairs[s], post.kernels[s][m]
        N = pairs.shape[0]
        cols = np.arange(N)
        prev = post.digits[:, m]
        table = np.zeros((S, S, len(own) + 1))
        np.add.at(table, (prev, prev, 0), pairs[cols, m, prev])
        for r, e in enumerate(own, start=1):
            target = np.clip(prev + post.event_delta[s][e], 0, S - 1)
            k_val = kernel[cols, target]
            share = np.divide(post.hazards[s][e], k_val, out=np.zeros(N), where=k_val > 0)
            np.add.at(table, (prev, target, r), pairs[cols, m, target] * share)
        return post.event_ids[s][own], table

    xi, targets = post.xi[s], post.targets[s]
    prev = np.broadcast_to(post.digits[:, m][None, :], xi.shape)
    curr = post.digits[targets, m]
    branch = np.broadcast_to(np.arange(xi.shape[0])[:, None], xi.shape)
    table = np.zeros((S, S, xi.shape[0]))
    np.add.at(table, (prev, curr, branch), xi)
    return post.event_ids[s], table
