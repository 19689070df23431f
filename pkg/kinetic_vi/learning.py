"""
Rate-constant learning
事件速率常数的期望最大化学习

Alternates variational inference with the closed-form update
c = expected event count / expected opportunity, one constant per rate group.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from loguru import logger

from .config import LearnConfig
from .engine import Diagnostics, IndividualPosterior, infer
from .errors import ModelValidationError
from .model import EventTable, ObservationModel, SkmSystem


@dataclass
class LearnResult:
    """学习结果"""
    rates: Dict[str, float]
    trace: List[Dict[str, float]] = field(default_factory=list)     # trace[0] is the starting point
    iterations: int = 0
    converged: bool = False
    flagged: List[str] = field(default_factory=list)                # groups with zero opportunity
    system: Optional[SkmSystem] = None
    posterior: Optional[IndividualPosterior] = None
    diagnostics: Optional[Diagnostics] = None


def expected_counts(
    table: EventTable,
    posterior: IndividualPosterior,
    exact_form: bool = False,
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-group expected event counts and expected opportunities.

    Args:
        table: event table the posterior was computed with
        posterior: variational posterior with two-slice statistics
        exact_form: weight opportunities by the no-event branch instead of γ̂_{t-1};
            under per-individual competition that is the owner's own no-event branch

    Returns:
        (numerator, denominator), one entry per rate group
    """
    G = len(table.groups)
    E = table.num_events
    ind, step, g = table.part_ind, table.part_step, table.part_g
    numerator = np.bincount(table.event_group, weights=posterior.event_prob, minlength=G)

    if exact_form:
        stay = posterior.xi_stay[ind, step]
        mass = stay.sum(axis=1)
        factor = np.where(mass > 0, (stay * g).sum(axis=1) / np.where(mass > 0, mass, 1.0), 0.0)
        if table.per_individual:
            # catalysts are free to move while the owner waits
            factor = np.where(table.part_owner, factor, (posterior.gamma[ind, step - 1] * g).sum(axis=1))
    else:
        factor = (posterior.gamma[ind, step - 1] * g).sum(axis=1)

    if E == 0:
        return numerator, np.zeros(G)
    opportunity = np.multiply.reduceat(factor, table.event_first_part)
    if exact_form and table.per_individual:
        opportunity *= posterior.xi_stay[table.event_owner, table.event_step].sum(axis=1)
    elif exact_form:
        opportunity *= posterior.no_event_prob[table.event_step]
    denominator = np.bincount(table.event_group, weights=opportunity, minlength=G)
    return numerator, denominator


def learn_rates(
    system: SkmSystem,
    obsmodel: ObservationModel,
    observations: np.ndarray,
    config: Optional[LearnConfig] = None,
) -> LearnResult:
    """Estimate one rate constant per rate group.

    Args:
        system: model whose event structure is kept; its rates seed the search
            unless config.init_rates is given
        obsmodel: per-individual emission model
        observations: T × M grid, -1 for missing
        config: learning settings

    Returns:
        LearnResult with the final rates and the per-iteration trace
    """
    config = config or LearnConfig()
    table = system.event_table
    groups = table.groups
    if not groups:
        raise ModelValidationError("system has no events to learn rates for")

    rates = dict(system.rates())
    if config.init_rates:
        unknown = set(config.init_rates) - set(groups)
        if unknown:
            raise ModelValidationError(f"unknown rate groups: {sorted(unknown)}")
        rates.update(config.init_rates)
    for group, rate in rates.items():
        if not 0.0 < rate < 1.0:
            raise ModelValidationError(f"initial rate of {group!r} must lie strictly inside (0, 1), got {rate}")

    result = LearnResult(rates=dict(rates), trace=[dict(rates)])
    messages = None
    flagged = set()

    for iteration in range(1, config.max_em_iters + 1):
        posterior, diag = infer(system, obsmodel, observations, config.vi, init=messages, rates=rates)
        messages = posterior.messages
        numerator, denominator = expected_counts(posterior.table, posterior, config.vi.exact_rate_form)

        updated = dict(rates)
        for gi, group in enumerate(groups):
            if denominator[gi] <= 0:
                flagged.add(group)
                continue
            updated[group] = float(np.clip(numerator[gi] / denominator[gi], 0.0, 1.0))

        change = max(
            abs(updated[gr] - rates[gr]) / max(abs(rates[gr]), 1e-300) for gr in groups
        )
        rates = updated
        result.trace.append(dict(rates))
        result.iterations = iteration
        result.posterior, result.diagnostics = posterior, diag
        logger.debug(f"EM iteration {iteration}: max relative change {change:.3e}, rates={rates}")
        if change < config.rel_tol:
            result.converged = True
            break

    if flagged:
        logger.warning(f"rate groups with zero opportunity kept their prior value: {sorted(flagged)}")
    if not result.converged:
        logger.warning(f"rate learning stopped after {result.iterations} iterations without converging")
    result.rates = rates
    result.flagged = sorted(flagged)
    result.system = system.with_rates(rates)
    logger.info(f"learned rates after {result.iterations} EM iterations: {rates}")
    return result
