"""
Variational message passing for stochastic kinetic models
随机动力学模型的变分消息传递推断

Each individual keeps its own forward/backward messages. The coupling to
other individuals enters only through expected gating factors of event
participants (neighbour summaries), which turn the joint event kernel into
one S × S kernel per (individual, timestep).

Under per-individual competition an individual's kernel holds only its own
events; the events it gates for others reach it as a factor psi on x_{t-1}
built from the owners' beliefs.

Internal arrays are indexed by step s = t - 1; the transition into step s
uses events compiled at t = s + 1.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np
from loguru import logger

from .config import InferenceMode, ViConfig
from .errors import ModelValidationError
from .model import Competition, EventTable, ObservationModel, SkmSystem


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Messages:
    """Per-individual normalized forward/backward messages."""
    alpha: np.ndarray                   # M × T × S
    beta: np.ndarray                    # M × T × S
    log_z: np.ndarray                   # M × T forward normalizers
    beta_log_z: Optional[np.ndarray] = None

    def gamma(self) -> np.ndarray:
        return _normalize(self.alpha * self.beta)[0]


@dataclass(frozen=True, eq=False)
class NeighborSummaries:
    """Expected gating factors per participant entry of the event table.

    Entries cover participants start..start+len; individuals that do not
    take part in an event have g_tilde = g_hat = 1 implicitly.
    """
    table: EventTable
    start: int
    g_tilde: np.ndarray
    g_hat: np.ndarray
    degenerate: int = 0

    def lookup(self, t: int, event_id: int, individual: int) -> Tuple[float, float]:
        """(g_tilde, g_hat) of `individual` for event `event_id` at t."""
        table = self.table
        ev = table.events_slice(t - 1)
        hits = np.nonzero(table.event_id[ev] == event_id)[0]
        if hits.size == 0:
            raise ModelValidationError(f"no event {event_id} at t={t}")
        e = ev.start + int(hits[0])
        first = table.event_first_part[e]
        last = table.event_first_part[e + 1] if e + 1 < table.num_events else table.num_participants
        for p in range(first, last):
            if table.part_ind[p] == individual:
                q = p - self.start
                if not 0 <= q < len(self.g_tilde):
                    raise ModelValidationError(f"summaries were not computed for t={t}")
                return float(self.g_tilde[q]), float(self.g_hat[q])
        return 1.0, 1.0


@dataclass(frozen=True, eq=False)
class MarginalKernel:
    """Per-individual kernel at one step; table[x_prev, x_curr, r], r=0 is no event."""
    event_ids: np.ndarray
    table: np.ndarray
    clamped: bool = False

    def collapsed(self) -> np.ndarray:
        return self.table.sum(axis=2)


@dataclass(frozen=True, eq=False)
class KernelParts:
    """Marginal kernels for a block of steps plus the pieces they are built from."""
    first_step: int
    kernel: np.ndarray          # n × M × S × S
    no_event: np.ndarray        # n × M × S
    other_tilde: np.ndarray     # n × M, pooled weight of events m does not take part in
    move: np.ndarray            # P_block × S, participant branch weight by x_prev
    event_tilde: np.ndarray     # E_block, c_k · Π g_tilde
    clamped: int = 0
    psi: Optional[np.ndarray] = None    # n × M × S catalysis factor on x_prev, per-individual only

    def unscaled(self) -> np.ndarray:
        """Kernel without the catalysis factor."""
        if self.psi is None:
            return self.kernel
        return self.kernel / self.psi[..., None]


@dataclass
class Diagnostics:
    """Run report of one inference call."""
    iterations: int = 0
    converged: bool = False
    residuals: List[float] = field(default_factory=list)
    energies: List[float] = field(default_factory=list)
    zero_denominators: int = 0
    clamped_no_event: int = 0
    zero_rows: int = 0
    wall_time: float = 0.0
    threads: int = 1
    method: str = "viskm"

    @property
    def residual(self) -> float:
        return self.residuals[-1] if self.residuals else float("nan")

    def degeneracies(self) -> int:
        return self.zero_denominators + self.clamped_no_event + self.zero_rows

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["residual"] = self.residual
        return data


@dataclass(frozen=True, eq=False)
class IndividualPosterior:
    """Per-individual one-slice marginals with compact two-slice statistics.

    xi_part[p, x] is the mass on (x, x + Δ_p, v = event of p) for the
    individual of participant entry p; xi_stay is the no-event branch and
    xi_other pools events the individual does not take part in. Sampling
    baselines leave the two-slice fields empty.
    """
    gamma: np.ndarray                               # M × T × S
    table: Optional[EventTable] = None
    messages: Optional[Messages] = None
    predictive: Optional[np.ndarray] = None         # M × T × S one-step-ahead
    filtered: Optional[np.ndarray] = None           # M × T × S
    xi_part: Optional[np.ndarray] = None            # P × S
    xi_stay: Optional[np.ndarray] = None            # M × T × S
    xi_other: Optional[np.ndarray] = None           # M × T × S
    event_prob: Optional[np.ndarray] = None         # E
    no_event_prob: Optional[np.ndarray] = None      # T
    kernel: Optional[KernelParts] = None
    mode: InferenceMode = InferenceMode.SMOOTHING

    @property
    def num_individuals(self) -> int:
        return self.gamma.shape[0]

    @property
    def horizon(self) -> int:
        return self.gamma.shape[1]

    def infected_scores(self, state: int = 1) -> np.ndarray:
        """T × M grid of P(x_t^{(m)} = state)."""
        return self.gamma[:, :, state].T

    def _require_xi(self):
        if self.xi_part is None:
            raise ModelValidationError("posterior carries no two-slice statistics")

    def two_slice(self, t: int, m: int) -> Tuple[np.ndarray, np.ndarray]:
        """(event_ids, table[x_prev, x_curr, r]) with r=0 the no-event branch."""
        self._require_xi()
        table = self.table
        s = t - 1
        if not 1 <= s < self.horizon:
            raise ModelValidationError(f"two-slice statistics exist for t in 2..{self.horizon}")
        S = self.gamma.shape[2]
        ev = table.events_slice(s)
        ids = table.event_id[ev]
        # per-individual competition: only the events m owns get a branch
        keep = table.event_owner[ev] == m if table.per_individual else np.ones(len(ids), dtype=bool)
        column = np.cumsum(keep)
        out = np.zeros((S, S, int(keep.sum()) + 1))
        x = np.arange(S)
        out[x, x, 0] = self.xi_stay[m, s]

        ps = table.participants_slice(s)
        mine = np.zeros(len(ids), dtype=bool)
        for p in range(ps.start, ps.stop):
            r = table.part_event[p] - ev.start
            if table.part_ind[p] != m or not keep[r]:
                continue
            mine[r] = True
            nxt = x + table.part_delta[p]
            ok = (nxt >= 0) & (nxt < S)
            out[x[ok], nxt[ok], column[r]] = self.xi_part[p, ok]
        if table.per_individual:
            return ids[keep], out

        weights = np.where(mine, 0.0, self.kernel.event_tilde[ev])
        total = weights.sum()
        if total > 0:
            share = weights / total
            for r in np.nonzero(share)[0]:
                out[x, x, r + 1] += self.xi_other[m, s] * share[r]
        return ids, out

    def xi(self, t: int, m: int) -> Dict[Tuple[int, int, Optional[int]], float]:
        """Non-zero ξ̂ entries of individual m at t keyed by (x_prev, x_curr, v)."""
        ids, table = self.two_slice(t, m)
        out = {}
        for a, b, r in zip(*np.nonzero(table)):
            v = None if r == 0 else int(ids[r - 1])
            out[(int(a), int(b), v)] = float(table[a, b, r])
        return out

    def event_probs(self, t: int) -> Dict[Optional[int], float]:
        """Posterior probability of each event id at t; None is no event."""
        self._require_xi()
        ev = self.table.events_slice(t - 1)
        out: Dict[Optional[int], float] = {None: float(self.no_event_prob[t - 1])}
        for e in range(ev.start, ev.stop):
            out[int(self.table.event_id[e])] = float(self.event_prob[e])
        return out


# ---------------------------------------------------------------------------
# Array helpers
# ---------------------------------------------------------------------------

def _normalize(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, int]:
    """Normalize along the last axis; zero rows become uniform."""
    total = x.sum(axis=-1)
    bad = ~(total > 0) | ~np.isfinite(total)
    safe = np.where(bad, 1.0, total)
    out = np.where(bad[..., None], 1.0 / x.shape[-1], x / safe[..., None])
    with np.errstate(divide="ignore"):
        log_total = np.where(bad, 0.0, np.log(safe))
    return out, log_total, int(bad.sum())


def _shift(values: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """out[p, x] = values[p, x + delta[p]], zero where that leaves 0..S-1."""
    S = values.shape[1]
    idx = np.arange(S)[None, :] + delta[:, None]
    valid = (idx >= 0) & (idx < S)
    taken = np.take_along_axis(values, np.clip(idx, 0, S - 1), axis=1)
    return np.where(valid, taken, 0.0)


def _leave_one_out(values: np.ndarray, owner: np.ndarray, starts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-event product and, per entry, the product of the other entries of its event.

    Entries of one event are contiguous; starts[e] is the first entry of event e.
    """
    if values.size == 0:
        return np.ones(len(starts)), values.copy()
    nonzero = values != 0
    safe = np.where(nonzero, values, 1.0)
    prod = np.multiply.reduceat(safe, starts)
    zeros = np.add.reduceat((~nonzero).astype(np.int64), starts)
    full = np.where(zeros > 0, 0.0, prod)
    z, pe = zeros[owner], prod[owner]
    others = np.where(nonzero, np.where(z == 0, pe / safe, 0.0), np.where(z == 1, pe, 0.0))
    return full, others


def _chunks(count: int, threads: int) -> List[slice]:
    n = max(1, min(threads, count))
    bounds = np.linspace(0, count, n + 1).astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _run_chunked(fn: Callable[[slice], int], count: int, threads: int) -> int:
    """Run fn over row chunks; each row is reduced in the same order either way."""
    parts = _chunks(count, threads)
    if len(parts) <= 1:
        return sum(fn(rows) for rows in parts)
    with ThreadPoolExecutor(max_workers=len(parts)) as pool:
        return sum(pool.map(fn, parts))


# ---------------------------------------------------------------------------
# Core computations
# ---------------------------------------------------------------------------

def _summaries(
    table: EventTable,
    alpha: np.ndarray,
    beta: np.ndarray,
    evidence: np.ndarray,
    parts: slice,
    eps: float,
) -> Tuple[np.ndarray, np.ndarray, int]:
    ind = table.part_ind[parts]
    step = table.part_step[parts]
    g = table.part_g[parts]
    a = alpha[ind, step - 1]
    eb = evidence[ind, step] * beta[ind, step]

    denom = (a * eb).sum(axis=1)
    degenerate = denom < eps
    denom = np.where(degenerate, eps, denom)
    g_hat = (a * g * eb).sum(axis=1) / denom
    g_tilde = (a * g * _shift(eb, table.part_delta[parts])).sum(axis=1) / denom
    return g_tilde, g_hat, int(degenerate.sum())


def _assemble(
    table: EventTable,
    g_tilde: np.ndarray,
    g_hat: np.ndarray,
    parts: slice,
    events: slice,
    first_step: int,
    num_steps: int,
    eps: float,
) -> KernelParts:
    M, S = table.num_individuals, table.num_states
    n = num_steps
    per_individual = table.per_individual
    local_event = table.part_event[parts] - events.start
    starts = table.event_first_part[events] - parts.start
    rate = table.event_rate[events]

    full_tilde, loo_tilde = _leave_one_out(g_tilde, local_event, starts)
    full_hat, loo_hat = _leave_one_out(g_hat, local_event, starts)

    ind = table.part_ind[parts]
    step = table.part_step[parts] - first_step
    g = table.part_g[parts]
    delta = table.part_delta[parts]
    part_rate = rate[local_event]
    row = step * M + ind

    move = part_rate[:, None] * g * loo_tilde[:, None]
    own_hat = part_rate[:, None] * g * loo_hat[:, None]
    event_tilde = rate * full_tilde
    event_hat = rate * full_hat
    if per_individual:
        # catalysts never move; their coupling enters through psi
        owner = table.part_owner[parts][:, None]
        move = np.where(owner, move, 0.0)
        own_hat = np.where(owner, own_hat, 0.0)

    x = np.arange(S)
    nxt = x[None, :] + delta[:, None]
    valid = (nxt >= 0) & (nxt < S)
    cell = (row[:, None] * S + x[None, :]) * S + np.clip(nxt, 0, S - 1)
    kernel = np.bincount(
        cell.ravel(), weights=np.where(valid, move, 0.0).ravel(), minlength=n * M * S * S
    ).astype(np.float64).reshape(n, M, S, S)
    own_hat_mass = np.bincount(
        (row[:, None] * S + x[None, :]).ravel(), weights=own_hat.ravel(), minlength=n * M * S
    ).reshape(n, M, S)

    if per_individual:
        other_tilde = np.zeros((n, M))
        no_event = 1.0 - own_hat_mass
    else:
        own_tilde_total = np.bincount(row, weights=event_tilde[local_event], minlength=n * M).reshape(n, M)
        own_hat_total = np.bincount(row, weights=event_hat[local_event], minlength=n * M).reshape(n, M)
        event_step = table.event_step[events] - first_step
        step_tilde = np.bincount(event_step, weights=event_tilde, minlength=n)
        step_hat = np.bincount(event_step, weights=event_hat, minlength=n)
        other_tilde = np.clip(step_tilde[:, None] - own_tilde_total, 0.0, None)
        other_hat = np.clip(step_hat[:, None] - own_hat_total, 0.0, None)
        no_event = 1.0 - own_hat_mass - other_hat[..., None]

    negative = no_event < 0
    no_event = np.where(negative, eps, no_event)
    clamped = int(negative.sum())
    kernel[:, :, x, x] += no_event + other_tilde[..., None]

    psi = None
    if per_individual:
        catalyst = ~table.part_owner[parts]
        psi, low = _catalysis(
            table, events, first_step, n,
            local_event[catalyst], ind[catalyst],
            part_rate[catalyst, None] * g[catalyst] * (loo_tilde - loo_hat)[catalyst, None],
            event_tilde - event_hat, eps,
        )
        clamped += low
        kernel *= psi[..., None]
        no_event = no_event * psi
        move = move * psi.reshape(n * M, S)[row]

    return KernelParts(
        first_step=first_step,
        kernel=kernel,
        no_event=no_event,
        other_tilde=other_tilde,
        move=move,
        event_tilde=event_tilde,
        clamped=clamped,
        psi=psi,
    )


def _catalysis(
    table: EventTable,
    events: slice,
    first_step: int,
    num_steps: int,
    cat_event: np.ndarray,
    cat_ind: np.ndarray,
    gated: np.ndarray,
    drift: np.ndarray,
    eps: float,
) -> Tuple[np.ndarray, int]:
    """Factor on a catalyst's x_prev from the transitions of the owners it gates.

    With d_k = c_k(Πg̃ - Πĝ) and D_n the sum of d_k over owner n's events
    at one step, catalyst j of n's events gets
    1 + Σ_k [c_k g_k^j(a)(Π_{-j}g̃ - Π_{-j}ĝ) - d_k] / (1 + D_n).

    Args:
        cat_event: block-local event of every catalyst entry
        cat_ind: individual of every catalyst entry
        gated: c_k g_k^j(a)(Π_{-j}g̃ - Π_{-j}ĝ) per catalyst entry, C × S
        drift: d_k per block-local event

    Returns:
        (psi n × M × S, number of factors clamped at eps)
    """
    M, S = table.num_individuals, table.num_states
    n = num_steps
    if cat_event.size == 0:
        return np.ones((n, M, S)), 0
    x = np.arange(S)
    ev_owner = table.event_owner[events]
    ev_step = table.event_step[events] - first_step
    owner_row = ev_step * M + ev_owner
    D = np.bincount(owner_row, weights=drift, minlength=n * M)

    key = owner_row[cat_event] * M + cat_ind
    groups, inverse = np.unique(key, return_inverse=True)
    inverse = inverse.reshape(-1)
    numer = np.bincount(
        (inverse[:, None] * S + x[None, :]).ravel(),
        weights=(gated - drift[cat_event][:, None]).ravel(),
        minlength=len(groups) * S,
    ).reshape(-1, S)
    factor = 1.0 + numer / np.maximum(1.0 + D[groups // M], eps)[:, None]
    low = factor < eps
    factor = np.where(low, eps, factor)

    target = (groups // M // M) * M + groups % M
    log_psi = np.bincount(
        (target[:, None] * S + x[None, :]).ravel(), weights=np.log(factor).ravel(), minlength=n * M * S
    ).reshape(n, M, S)
    return np.exp(log_psi), int(low.sum())


def _full_kernel(table: EventTable, g_tilde, g_hat, eps: float) -> KernelParts:
    return _assemble(
        table, g_tilde, g_hat,
        slice(0, table.num_participants), slice(0, table.num_events),
        0, table.horizon, eps,
    )


def _prefix_products(ops: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Inclusive left-to-right products along axis 1 in log2(T) doubling rounds.

    Every product is rescaled to unit sum; log_scale carries the dropped factors.
    """
    ops = ops.copy()
    log_scale = np.zeros(ops.shape[:2])
    T = ops.shape[1]
    d = 1
    while d < T:
        prod = (ops[:, :-d, :, :, None] * ops[:, d:, None, :, :]).sum(axis=-2)
        total = prod.sum(axis=(-2, -1))
        safe = np.where(total > 0, total, 1.0)
        log_scale[:, d:] = log_scale[:, :-d] + log_scale[:, d:] + np.log(safe)
        ops[:, d:] = prod / safe[..., None, None]
        d *= 2
    return ops, log_scale


def _step_operators(kernel: np.ndarray, evidence: np.ndarray, rows: slice) -> np.ndarray:
    """A_s = K_s · diag(e_s) for s = 1..T-1 as rows × (T-1) × S × S."""
    return np.moveaxis(kernel[1:, rows], 0, 1) * evidence[rows, 1:, None, :]


def _forward(
    kernel: np.ndarray,
    initial: np.ndarray,
    evidence: np.ndarray,
    threads: int,
) -> Tuple[np.ndarray, np.ndarray, int]:
    M, T, S = evidence.shape
    alpha = np.zeros((M, T, S))
    log_z = np.zeros((M, T))

    def run(rows: slice) -> int:
        a0, lz0, bad0 = _normalize(initial[rows] * evidence[rows, 0])
        ops = np.empty((a0.shape[0], T, S, S))
        ops[:, 0] = np.eye(S)
        ops[:, 1:] = _step_operators(kernel, evidence, rows)
        prefix, log_scale = _prefix_products(ops)
        a, lz, bad = _normalize((a0[:, None, :, None] * prefix).sum(axis=2))
        total = log_scale + lz
        alpha[rows] = a
        log_z[rows, 0] = lz0
        log_z[rows, 1:] = np.diff(total, axis=1)
        return bad0 + bad

    zero_rows = _run_chunked(run, M, threads)
    return alpha, log_z, zero_rows


def _backward(
    kernel: np.ndarray,
    evidence: np.ndarray,
    threads: int,
) -> Tuple[np.ndarray, np.ndarray, int]:
    M, T, S = evidence.shape
    beta = np.full((M, T, S), 1.0 / S)
    log_z = np.zeros((M, T))

    def run(rows: slice) -> int:
        n = rows.stop - rows.start
        # reversed, transposed operators turn the suffix products into a prefix scan
        ops = np.empty((n, T, S, S))
        ops[:, 0] = np.eye(S)
        ops[:, 1:] = np.swapaxes(_step_operators(kernel, evidence, rows)[:, ::-1], -1, -2)
        prefix, log_scale = _prefix_products(ops)
        b, lz, bad = _normalize(prefix.sum(axis=-2)[:, ::-1] / S)
        total = log_scale[:, ::-1] + lz
        beta[rows] = b
        log_z[rows, :-1] = total[:, :-1] - total[:, 1:]
        return bad

    zero_rows = _run_chunked(run, M, threads)
    return beta, log_z, zero_rows


def _predictive(kernel: np.ndarray, alpha: np.ndarray, initial: np.ndarray) -> np.ndarray:
    pred = np.empty_like(alpha)
    pred[:, 0] = initial
    pred[:, 1:] = (alpha[:, :-1, :, None] * np.moveaxis(kernel[1:], 0, 1)).sum(axis=2)
    return _normalize(pred)[0]


def _two_slice_arrays(
    table: EventTable,
    parts: KernelParts,
    alpha: np.ndarray,
    beta: np.ndarray,
    evidence: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    M, T, S = alpha.shape
    eb = evidence * beta
    kernel = np.moveaxis(parts.kernel, 0, 1)                  # M × T × S × S
    prev = alpha[:, :-1]
    reach = (kernel[:, 1:] * eb[:, 1:, None, :]).sum(axis=3)
    z = np.zeros((M, T))
    z[:, 1:] = (prev * reach).sum(axis=2)
    z = np.where(z > 0, z, 1.0)

    xi_stay = np.zeros((M, T, S))
    xi_other = np.zeros((M, T, S))
    no_event = np.moveaxis(parts.no_event, 0, 1)
    other = np.moveaxis(parts.other_tilde, 0, 1)
    xi_stay[:, 1:] = prev * no_event[:, 1:] * eb[:, 1:] / z[:, 1:, None]
    xi_other[:, 1:] = prev * other[:, 1:, None] * eb[:, 1:] / z[:, 1:, None]

    ind, step = table.part_ind, table.part_step
    shifted = _shift(eb[ind, step], table.part_delta)
    xi_part = alpha[ind, step - 1] * parts.move * shifted / z[ind, step][:, None]
    return xi_part, xi_stay, xi_other


def _event_probabilities(
    table: EventTable,
    xi_part: np.ndarray,
    xi_stay: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    E, T = table.num_events, table.horizon
    if table.per_individual:
        # owner entries carry the whole branch; nothing fires when every chain stays
        event_prob = xi_part[table.event_first_part].sum(axis=1) if E else np.zeros(0)
        no_event = np.prod(xi_stay.sum(axis=2), axis=0)
        no_event[0] = 1.0
        return event_prob, no_event
    counts = np.bincount(table.part_event, minlength=E)
    mass = np.bincount(table.part_event, weights=xi_part.sum(axis=1), minlength=E)
    event_prob = mass / np.maximum(counts, 1)
    fired = np.bincount(table.event_step, weights=event_prob, minlength=T)
    no_event = np.clip(1.0 - fired, 0.0, 1.0)
    no_event[0] = 1.0
    return event_prob, no_event


def _entropy_term(p: np.ndarray, q: np.ndarray, eps: float) -> float:
    """Σ p log(p / q) with ε-floored q; cells with p = 0 contribute 0."""
    mask = p > 0
    return float((p[mask] * (np.log(p[mask]) - np.log(np.maximum(q[mask], eps)))).sum())


def _bethe(
    table: EventTable,
    parts: KernelParts,
    initial: np.ndarray,
    evidence: np.ndarray,
    gamma: np.ndarray,
    xi_part: np.ndarray,
    xi_stay: np.ndarray,
    xi_other: np.ndarray,
    eps: float,
) -> float:
    M, T, S = gamma.shape
    energy = _entropy_term(gamma[:, 0], initial * evidence[:, 0], eps)
    if T > 1:
        no_event = np.moveaxis(parts.no_event, 0, 1)
        other = np.moveaxis(parts.other_tilde, 0, 1)
        energy += _entropy_term(xi_stay[:, 1:], no_event[:, 1:] * evidence[:, 1:], eps)
        energy += _entropy_term(xi_other[:, 1:], other[:, 1:, None] * evidence[:, 1:], eps)
        target = _shift(evidence[table.part_ind, table.part_step], table.part_delta)
        energy += _entropy_term(xi_part, parts.move * target, eps)
        inner = gamma[:, : T - 1]
        mask = inner > 0
        energy -= float((inner[mask] * np.log(inner[mask])).sum())
    return energy


def evidence_grid(system: SkmSystem, obsmodel: ObservationModel, observations: np.ndarray) -> np.ndarray:
    obs = np.asarray(observations)
    if obs.shape != (system.horizon, system.num_individuals):
        raise ModelValidationError(
            f"observations must have shape ({system.horizon}, {system.num_individuals}), got {obs.shape}"
        )
    if obsmodel.num_states != system.num_states:
        raise ModelValidationError("emission matrix does not match the number of states")
    return obsmodel.likelihoods(obs)


def _table_for(system: SkmSystem, rates: Optional[Mapping[str, float]]) -> EventTable:
    table = system.event_table
    return table.with_rates(rates) if rates else table


# ---------------------------------------------------------------------------
# Public per-step API
# ---------------------------------------------------------------------------

def initial_messages(
    system: SkmSystem,
    obsmodel: ObservationModel,
    observations: np.ndarray,
    config: Optional[ViConfig] = None,
    rates: Optional[Mapping[str, float]] = None,
) -> Messages:
    """Prior-propagated start: one filtering pass, summaries refreshed per step, β uniform."""
    config = config or ViConfig()
    evidence = evidence_grid(system, obsmodel, observations)
    table = _table_for(system, rates)
    M, T, S = evidence.shape
    alpha = np.zeros((M, T, S))
    log_z = np.zeros((M, T))
    beta = np.full((M, T, S), 1.0 / S)
    alpha[:, 0], log_z[:, 0], _ = _normalize(system.initial_dist * evidence[:, 0])
    for s in range(1, T):
        parts, events = table.participants_slice(s), table.events_slice(s)
        g_tilde, g_hat, _ = _summaries(table, alpha, beta, evidence, parts, config.eps)
        block = _assemble(table, g_tilde, g_hat, parts, events, s, 1, config.eps)
        pred = (alpha[:, s - 1, :, None] * block.kernel[0]).sum(axis=1)
        alpha[:, s], log_z[:, s], _ = _normalize(pred * evidence[:, s])
    return Messages(alpha=alpha, beta=beta, log_z=log_z)


def neighbor_summaries(
    system: SkmSystem,
    obsmodel: ObservationModel,
    observations: np.ndarray,
    messages: Messages,
    t: Optional[int] = None,
    eps: float = 1e-12,
) -> NeighborSummaries:
    """Expected g factors of every participant, for one step t or for all steps."""
    evidence = evidence_grid(system, obsmodel, observations)
    table = system.event_table
    if t is None:
        parts = slice(0, table.num_participants)
    else:
        if not 2 <= t <= system.horizon:
            raise ModelValidationError(f"summaries exist for t in 2..{system.horizon}")
        parts = table.participants_slice(t - 1)
    g_tilde, g_hat, degenerate = _summaries(table, messages.alpha, messages.beta, evidence, parts, eps)
    if degenerate:
        logger.warning(f"{degenerate} neighbour summaries had a zero denominator")
    return NeighborSummaries(table=table, start=parts.start, g_tilde=g_tilde, g_hat=g_hat, degenerate=degenerate)


def marginal_kernel(
    system: SkmSystem,
    summaries: NeighborSummaries,
    t: int,
    m: int,
    eps: float = 1e-12,
) -> MarginalKernel:
    """Kernel of individual m at t with every other participant replaced by its summary.

    Args:
        system: the kinetic model
        summaries: neighbour summaries covering step t
        t: timestep in 2..T
        m: individual index

    Returns:
        MarginalKernel with table[x_prev, x_curr, r] (r=0 is no event)
    """
    if system.competition == Competition.INDIVIDUAL:
        return _owner_marginal_kernel(system, summaries, t, m, eps)
    S = system.num_states
    events = system.events(t)
    table = np.zeros((S, S, len(events) + 1))
    own_hat = np.zeros(S)
    other_hat = 0.0
    for r, spec in enumerate(events, start=1):
        tilde = hat = spec.rate_constant
        mine = None
        for p in spec.participants:
            if p.individual == m:
                mine = p
                continue
            gt, gh = summaries.lookup(t, spec.id, p.individual)
            tilde *= gt
            hat *= gh
        if mine is None:
            for x in range(S):
                table[x, x, r] = tilde
            other_hat += hat
            continue
        for x in range(S):
            if mine.g[x] > 0:
                table[x, x + mine.delta, r] = tilde * mine.g[x]
                own_hat[x] += hat * mine.g[x]

    no_event = 1.0 - own_hat - other_hat
    clamped = bool((no_event < 0).any())
    no_event = np.where(no_event < 0, eps, no_event)
    for x in range(S):
        table[x, x, 0] = no_event[x]
    ids = np.array([e.id for e in events], dtype=np.int64)
    return MarginalKernel(event_ids=ids, table=table, clamped=clamped)


def _owner_marginal_kernel(
    system: SkmSystem,
    summaries: NeighborSummaries,
    t: int,
    m: int,
    eps: float,
) -> MarginalKernel:
    """Per-individual competition: m's own events, then the catalysis factor on x_prev."""
    S = system.num_states
    events = system.events(t)
    own = [e for e in events if e.owner == m]
    table = np.zeros((S, S, len(own) + 1))
    own_hat = np.zeros(S)
    for r, spec in enumerate(own, start=1):
        tilde = hat = spec.rate_constant
        for p in spec.participants[1:]:
            gt, gh = summaries.lookup(t, spec.id, p.individual)
            tilde *= gt
            hat *= gh
        head = spec.participants[0]
        for x in range(S):
            if head.g[x] > 0:
                table[x, x + head.delta, r] = tilde * head.g[x]
                own_hat[x] += hat * head.g[x]

    no_event = 1.0 - own_hat
    clamped = bool((no_event < 0).any())
    no_event = np.where(no_event < 0, eps, no_event)
    for x in range(S):
        table[x, x, 0] = no_event[x]

    drift: Dict[int, float] = {}
    gated: Dict[int, np.ndarray] = {}
    for spec in events:
        pairs = [summaries.lookup(t, spec.id, p.individual) for p in spec.participants]
        d = spec.rate_constant * (np.prod([gt for gt, _ in pairs]) - np.prod([gh for _, gh in pairs]))
        drift[spec.owner] = drift.get(spec.owner, 0.0) + d
        for i, p in enumerate(spec.participants[1:], start=1):
            if p.individual != m:
                continue
            rest = pairs[:i] + pairs[i + 1:]
            gap = spec.rate_constant * (np.prod([gt for gt, _ in rest]) - np.prod([gh for _, gh in rest]))
            gated[spec.owner] = gated.get(spec.owner, np.zeros(S)) + gap * np.asarray(p.g) - d

    psi = np.ones(S)
    for owner, numer in gated.items():
        factor = 1.0 + numer / max(1.0 + drift[owner], eps)
        clamped = clamped or bool((factor < eps).any())
        psi *= np.where(factor < eps, eps, factor)
    table *= psi[:, None, None]
    ids = np.array([e.id for e in own], dtype=np.int64)
    return MarginalKernel(event_ids=ids, table=table, clamped=clamped)


def forward_sweep(
    system: SkmSystem,
    obsmodel: ObservationModel,
    observations: np.ndarray,
    messages: Messages,
    summaries: NeighborSummaries,
    config: Optional[ViConfig] = None,
) -> Messages:
    """Recompute every α̂ under kernels built from `summaries`."""
    config = config or ViConfig()
    evidence = evidence_grid(system, obsmodel, observations)
    parts = _full_kernel(system.event_table, summaries.g_tilde, summaries.g_hat, config.eps)
    alpha, log_z, _ = _forward(parts.kernel, system.initial_dist, evidence, config.threads)
    return replace(messages, alpha=alpha, log_z=log_z)


def backward_sweep(
    system: SkmSystem,
    obsmodel: ObservationModel,
    observations: np.ndarray,
    messages: Messages,
    summaries: NeighborSummaries,
    config: Optional[ViConfig] = None,
) -> Messages:
    """Recompute every β̂ (uniform at T) under kernels built from `summaries`."""
    config = config or ViConfig()
    evidence = evidence_grid(system, obsmodel, observations)
    parts = _full_kernel(system.event_table, summaries.g_tilde, summaries.g_hat, config.eps)
    beta, beta_log_z, _ = _backward(parts.kernel, evidence, config.threads)
    return replace(messages, beta=beta, beta_log_z=beta_log_z)


def two_slice_stats(
    system: SkmSystem,
    obsmodel: ObservationModel,
    observations: np.ndarray,
    summaries: NeighborSummaries,
    messages: Messages,
    t: int,
    m: int,
) -> MarginalKernel:
    """Normalized ξ̂ of individual m at t, laid out like its marginal kernel."""
    evidence = evidence_grid(system, obsmodel, observations)
    kern = marginal_kernel(system, summaries, t, m)
    s = t - 1
    eb = evidence[m, s] * messages.beta[m, s]
    xi = messages.alpha[m, s - 1][:, None, None] * kern.table * eb[None, :, None]
    z = xi.sum()
    if z > 0:
        xi = xi / z
    return MarginalKernel(event_ids=kern.event_ids, table=xi, clamped=kern.clamped)


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

def infer(
    system: SkmSystem,
    obsmodel: ObservationModel,
    observations: np.ndarray,
    config: Optional[ViConfig] = None,
    init: Optional[Messages] = None,
    rates: Optional[Mapping[str, float]] = None,
) -> Tuple[IndividualPosterior, Diagnostics]:
    """Run Jacobi sweeps until the largest change in γ̂ falls below tol.

    Args:
        system: the kinetic model
        obsmodel: per-individual emission model
        observations: T × M grid, -1 for missing
        config: engine settings
        init: messages to warm-start from
        rates: per-group rate overrides

    Returns:
        (IndividualPosterior, Diagnostics); non-convergence is reported, not raised
    """
    config = config or ViConfig()
    started = time.perf_counter()
    evidence = evidence_grid(system, obsmodel, observations)
    table = _table_for(system, rates)
    M, T, S = evidence.shape
    eps = config.eps
    smoothing = config.mode == InferenceMode.SMOOTHING
    diag = Diagnostics(threads=config.threads)

    messages = init if init is not None else initial_messages(system, obsmodel, observations, config, rates)
    alpha, beta = messages.alpha, messages.beta
    if not smoothing:
        beta = np.full((M, T, S), 1.0 / S)
    gamma = _normalize(alpha * beta)[0]
    log_z = messages.log_z
    beta_log_z = np.zeros((M, T))
    parts = None

    for iteration in range(1, config.max_iters + 1):
        g_tilde, g_hat, degenerate = _summaries(
            table, alpha, beta, evidence, slice(0, table.num_participants), eps
        )
        parts = _full_kernel(table, g_tilde, g_hat, eps)
        new_alpha, log_z, zero_a = _forward(parts.kernel, system.initial_dist, evidence, config.threads)
        zero_b = 0
        if smoothing:
            new_beta, beta_log_z, zero_b = _backward(parts.kernel, evidence, config.threads)
        else:
            new_beta = beta
        if config.damping > 0:
            new_alpha = (1.0 - config.damping) * new_alpha + config.damping * alpha
            new_beta = (1.0 - config.damping) * new_beta + config.damping * beta
        alpha, beta = new_alpha, new_beta

        new_gamma = _normalize(alpha * beta)[0]
        residual = float(np.abs(new_gamma - gamma).max()) if gamma.size else 0.0
        gamma = new_gamma

        diag.iterations = iteration
        diag.residuals.append(residual)
        diag.zero_denominators += degenerate
        diag.clamped_no_event += parts.clamped
        diag.zero_rows += zero_a + zero_b
        if config.track_energy:
            xi_part, xi_stay, xi_other = _two_slice_arrays(table, parts, alpha, beta, evidence)
            energy = _bethe(table, parts, system.initial_dist, evidence, gamma, xi_part, xi_stay, xi_other, eps)
            diag.energies.append(energy)
            logger.debug(f"iteration {iteration}: residual={residual:.3e}, energy={energy:.6f}")
        else:
            logger.debug(f"iteration {iteration}: residual={residual:.3e}")

        if iteration >= config.min_iters and residual < config.tol:
            diag.converged = True
            break

    xi_part, xi_stay, xi_other = _two_slice_arrays(table, parts, alpha, beta, evidence)
    event_prob, no_event_prob = _event_probabilities(table, xi_part, xi_stay)
    final = Messages(alpha=alpha, beta=beta, log_z=log_z, beta_log_z=beta_log_z)
    posterior = IndividualPosterior(
        gamma=gamma,
        table=table,
        messages=final,
        predictive=_predictive(parts.unscaled(), alpha, system.initial_dist),
        filtered=alpha,
        xi_part=xi_part,
        xi_stay=xi_stay,
        xi_other=xi_other,
        event_prob=event_prob,
        no_event_prob=no_event_prob,
        kernel=parts,
        mode=config.mode,
    )

    diag.wall_time = time.perf_counter() - started
    if diag.degeneracies():
        logger.warning(
            f"degeneracies: zero denominators={diag.zero_denominators}, "
            f"clamped no-event={diag.clamped_no_event}, zero rows={diag.zero_rows}"
        )
    if not diag.converged:
        logger.warning(f"not converged after {diag.iterations} iterations (residual {diag.residual:.3e})")
    logger.info(
        f"VI finished: M={M}, T={T}, iterations={diag.iterations}, "
        f"residual={diag.residual:.3e}, {diag.wall_time:.3f}s"
    )
    return posterior, diag


def bethe_free_energy(
    system: SkmSystem,
    obsmodel: ObservationModel,
    observations: np.ndarray,
    posterior: IndividualPosterior,
    eps: float = 1e-12,
) -> float:
    """Sum of per-individual chain Bethe energies under the posterior's kernels."""
    if posterior.kernel is None or posterior.xi_part is None:
        raise ModelValidationError("Bethe free energy needs a variational posterior")
    evidence = evidence_grid(system, obsmodel, observations)
    return _bethe(
        posterior.table, posterior.kernel, system.initial_dist, evidence, posterior.gamma,
        posterior.xi_part, posterior.xi_stay, posterior.xi_other, eps,
    )
