"""
SIS epidemic layer tests
SIS 传染病层测试
"""

import numpy as np
import pytest

from kinetic_vi.engine import infer, initial_messages, marginal_kernel, neighbor_summaries
from kinetic_vi.epidemic import (
    CONTACT,
    INFECTIOUS,
    OUTSIDE,
    RECOVERY,
    SUSCEPTIBLE,
    ContactGraph,
    EpidemicParams,
    check_hazards,
    closed_form_kernel,
    compile_system,
    infectious_contacts,
    simulate,
)
from kinetic_vi.errors import HazardOverflowError, ModelValidationError
from kinetic_vi.exact import exact_forward_backward, exact_individual_marginals
from kinetic_vi.model import MISSING, ObservationModel


def test_closed_form_kernel_values():
    """测试闭式核：乘积形式与线性化形式"""
    params = EpidemicParams(c1=0.2, c2=0.1, c3=0.01)
    product = closed_form_kernel(params, 2)
    linear = closed_form_kernel(params, 2, linearized=True)
    assert product[SUSCEPTIBLE, INFECTIOUS] == pytest.approx(1 - 0.99 * 0.81)
    assert linear[SUSCEPTIBLE, INFECTIOUS] == pytest.approx(0.21)
    assert np.allclose(product.sum(axis=1), 1.0)
    assert product[INFECTIOUS, SUSCEPTIBLE] == pytest.approx(0.2)
    # no infectious contacts: outside infection only
    assert closed_form_kernel(params, 0)[0, 1] == pytest.approx(0.01)
    with pytest.raises(ModelValidationError):
        closed_form_kernel(params, -1)


def test_contact_graph_canonicalizes_edges():
    """测试接触图边的规范化"""
    graph = ContactGraph.from_edges(3, 4, [(2, 2, 0), (2, 0, 2), (3, 1, 2)])
    assert graph.edges(2) == frozenset({(0, 2)})
    assert graph.num_edges == 2
    assert list(graph.degree(2)) == [1, 0, 1]
    with pytest.raises(ModelValidationError):
        ContactGraph.from_edges(3, 4, [(2, 1, 1)])
    with pytest.raises(ModelValidationError):
        ContactGraph.from_edges(3, 4, [(5, 0, 1)])


def test_compile_builds_one_event_per_mechanism(triangle_contacts, sis_params):
    """测试编译出的事件集合"""
    system = compile_system(triangle_contacts, sis_params)
    M = 3
    for t in range(2, triangle_contacts.horizon + 1):
        events = system.events(t)
        edges = len(triangle_contacts.edges(t))
        assert len(events) == 2 * M + 2 * edges
        groups = [e.rate_group for e in events]
        assert groups.count(RECOVERY) == M and groups.count(OUTSIDE) == M
        assert groups.count(CONTACT) == 2 * edges
        assert len({e.id for e in events}) == len(events)
    assert system.event(2, 0).participants[0].delta == -1
    assert system.event(2, M).participants[0].delta == 1
    assert system.rates() == pytest.approx({RECOVERY: 0.1, CONTACT: 0.05, OUTSIDE: 0.01})


def test_compile_hazard_matches_linearized_kernel(triangle_contacts, sis_params):
    """测试编译后的感染风险等于线性化形式"""
    system = compile_system(triangle_contacts, sis_params)
    x = np.array([0, 1, 1])
    for t in range(2, triangle_contacts.horizon + 1):
        count = int(infectious_contacts(triangle_contacts, t, x)[0])
        hazard = sum(
            e.hazard(x) for e in system.events(t)
            if e.participants[0].individual == 0 and e.participants[0].delta == 1
        )
        expected = closed_form_kernel(sis_params, count, linearized=True)[0, 1]
        assert hazard == pytest.approx(expected)


def test_one_hot_neighbours_give_closed_form_infection():
    """测试邻居状态确定时边际核即为闭式线性化核"""
    params = EpidemicParams(c1=0.1, c2=0.1, c3=0.01)
    contacts = ContactGraph.from_edges(3, 2, [(2, 0, 1), (2, 0, 2)])
    system = compile_system(contacts, params, initial_infected=[1, 2])
    obsmodel = ObservationModel.identity(2)
    obs = np.array([[MISSING, 1, 1], [MISSING, 1, 1]])
    messages = initial_messages(system, obsmodel, obs)
    summaries = neighbor_summaries(system, obsmodel, obs, messages, t=2)
    kernel = marginal_kernel(system, summaries, 2, 0).collapsed()
    assert np.allclose(kernel, [[0.79, 0.21], [0.1, 0.9]])
    assert np.allclose(kernel, closed_form_kernel(params, 2, linearized=True))


def test_pair_infection_matches_exact():
    """测试两人传播与精确解一致"""
    params = EpidemicParams(c1=0.1, c2=0.2, c3=0.0, initial_prevalence=0.0)
    contacts = ContactGraph.from_edges(2, 3, [(2, 0, 1), (3, 0, 1)])
    system = compile_system(contacts, params, initial_infected=[1])
    obsmodel = params.observation_model()
    obs = np.full((3, 2), MISSING)
    posterior, _ = infer(system, obsmodel, obs)
    exact = exact_forward_backward(system, obsmodel, obs)
    for m in range(2):
        l1 = np.abs(posterior.gamma[m] - exact_individual_marginals(exact, m)).sum(axis=1)
        assert l1.max() < 0.05


def test_check_hazards_names_step_and_individual():
    """测试风险检查报告时间步与个体"""
    edges = [(3, 0, m) for m in range(1, 6)]
    contacts = ContactGraph.from_edges(6, 4, edges)
    params = EpidemicParams(c1=0.1, c2=0.25, c3=0.01)
    with pytest.raises(HazardOverflowError) as info:
        check_hazards(contacts, params, hint="lower c2")
    assert info.value.t == 3 and info.value.individual == 0
    assert "lower c2" in str(info.value)
    with pytest.raises(HazardOverflowError):
        compile_system(contacts, params)


def test_simulate_is_seeded(triangle_contacts, sis_params):
    """测试模拟可复现"""
    a = simulate(triangle_contacts, sis_params, seed=4)
    b = simulate(triangle_contacts, sis_params, seed=4)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.observations, b.observations)
    assert a.states.shape == (8, 3)
    assert set(np.unique(a.states)) <= {0, 1}


def test_simulate_without_contacts_never_spreads():
    """测试无外部感染与接触时无人被感染"""
    contacts = ContactGraph(5, 30, {})
    params = EpidemicParams(c1=0.2, c2=0.5, c3=0.0)
    bundle = simulate(contacts, params, initial_infected=[], seed=1)
    assert bundle.states.sum() == 0


def test_strict_simulation_records_events(triangle_contacts):
    """测试严格模拟记录事件"""
    params = EpidemicParams(c1=0.05, c2=0.05, c3=0.01)
    bundle = simulate(triangle_contacts, params, seed=2, strict=True)
    system = compile_system(triangle_contacts, params)
    for t in range(2, triangle_contacts.horizon + 1):
        fired = bundle.events[t - 1] or ()
        owners = [system.event(t, k).owner for k in fired]
        assert len(set(owners)) == len(owners)
        x = bundle.states[t - 2]
        for k in fired:
            x = system.event(t, k).apply(x)
        assert np.array_equal(x, bundle.states[t - 1])


def test_observation_model_from_params():
    """测试症状观测模型"""
    params = EpidemicParams(c1=0.1, c2=0.1, c3=0.1, obs_sensitivity=0.8, obs_specificity=0.7)
    emission = params.observation_model().emission
    assert emission[SUSCEPTIBLE, 0] == pytest.approx(0.7)
    assert emission[INFECTIOUS, 1] == pytest.approx(0.8)
    with pytest.raises(ValueError):
        EpidemicParams(c1=1.5, c2=0.1, c3=0.1)


def test_simulated_frequencies_match_closed_form():
    """测试长时间模拟的转移频率与闭式核一致（3 个标准误内）"""
    params = EpidemicParams(c1=0.3, c2=0.2, c3=0.05, initial_prevalence=0.5)
    T = 100_001
    edges = [(t, 0, m) for t in range(2, T + 1) for m in (1, 2)]
    contacts = ContactGraph.from_edges(3, T, edges)
    states = simulate(contacts, params, seed=9).states
    prev, curr = states[:-1], states[1:]
    centre_count = prev[:, 1] + prev[:, 2]

    checks, expected = [], []
    for c in (0, 1, 2):
        mask = np.zeros(prev.shape, dtype=bool)
        mask[:, 0] = (prev[:, 0] == SUSCEPTIBLE) & (centre_count == c)
        checks.append(mask)
        expected.append(closed_form_kernel(params, c)[SUSCEPTIBLE, INFECTIOUS])
    checks.append(prev == INFECTIOUS)
    expected.append(params.c1)
    for mask, p in zip(checks, expected):
        n = int(mask.sum())
        assert n > 1000
        moved = curr[mask] != prev[mask]
        se = np.sqrt(p * (1.0 - p) / n)
        assert abs(moved.mean() - p) <= 3.0 * se


@pytest.mark.parametrize("strict", [False, True])
def test_certain_outside_infection_infects_everyone(strict):
    """测试外部感染率为 1 且不康复时第 2 步起全部感染"""
    contacts = ContactGraph.from_edges(4, 6, [(3, 0, 1), (4, 2, 3)])
    params = EpidemicParams(c1=0.0, c2=0.0, c3=1.0)
    bundle = simulate(contacts, params, initial_infected=[], seed=3, strict=strict)
    assert bundle.states[0].sum() == 0
    assert (bundle.states[1:] == INFECTIOUS).all()
