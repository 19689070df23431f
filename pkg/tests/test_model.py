"""
core-skm tests
随机动力学模型核心测试
"""

import numpy as np
import pytest

from conftest import DOWN, UP, noisy_emission, random_system
from kinetic_vi.errors import HazardOverflowError, ModelValidationError, UnknownEventError
from kinetic_vi.model import (
    MISSING,
    Competition,
    EventSpec,
    ObservationModel,
    Participant,
    SkmSystem,
    TrajectoryBundle,
    event_hazard,
    path_log_likelihood,
    sample_path,
    transition_marginal,
    transition_prob,
)


def two_person_system(rate=0.3, gate=(0.5, 1.0), competition=Competition.SYSTEM):
    """Individual 0 flips up, gated by the state of individual 1."""
    infect = EventSpec(
        id=7,
        rate_constant=rate,
        participants=(Participant(0, UP, delta=1), Participant(1, gate, delta=0, reactants=1, products=1)),
    )
    recover = EventSpec(id=9, rate_constant=0.2, participants=(Participant(1, DOWN, delta=-1),))
    return SkmSystem(2, 2, 3, {2: [infect, recover], 3: [recover]}, np.array([0.5, 0.5]), competition)


def test_participant_defaults_and_balance():
    """测试参与者的反应物/产物默认值"""
    p = Participant(0, UP, delta=1)
    assert (p.reactants, p.products) == (0, 1)
    catalyst = Participant(1, (0.0, 1.0), delta=0, reactants=1, products=1)
    assert catalyst.is_catalyst
    with pytest.raises(ModelValidationError):
        Participant(0, UP, delta=1, reactants=1, products=1)


def test_event_rejects_bad_definitions():
    """测试事件定义校验"""
    with pytest.raises(ModelValidationError):
        EventSpec(id=0, rate_constant=1.5, participants=(Participant(0, UP, delta=1),))
    with pytest.raises(ModelValidationError):
        EventSpec(id=0, rate_constant=0.1, participants=())
    with pytest.raises(ModelValidationError):
        EventSpec(id=0, rate_constant=0.1, participants=(Participant(0, UP, 1), Participant(0, DOWN, -1)))
    # moving up from the top state would leave 0..S-1
    with pytest.raises(ModelValidationError):
        EventSpec(id=0, rate_constant=0.1, participants=(Participant(0, (1.0, 1.0), delta=1),))


def test_system_validation():
    """测试系统构造校验"""
    event = EventSpec(id=0, rate_constant=0.1, participants=(Participant(0, UP, 1),))
    with pytest.raises(ModelValidationError):
        SkmSystem(1, 2, 3, {1: [event]}, np.array([1.0, 0.0]))
    with pytest.raises(ModelValidationError):
        SkmSystem(1, 2, 3, {2: [event, event]}, np.array([1.0, 0.0]))
    with pytest.raises(ModelValidationError):
        SkmSystem(1, 2, 3, {2: [event]}, np.array([0.7, 0.7]))
    stranger = EventSpec(id=1, rate_constant=0.1, participants=(Participant(4, UP, 1),))
    with pytest.raises(ModelValidationError):
        SkmSystem(1, 2, 3, {2: [stranger]}, np.array([1.0, 0.0]))


def test_event_hazard_product_form():
    """测试乘积形式的风险函数"""
    system = two_person_system()
    assert event_hazard(system, 2, [0, 0], 7) == pytest.approx(0.3 * 1.0 * 0.5)
    assert event_hazard(system, 2, [0, 1], 7) == pytest.approx(0.3)
    assert event_hazard(system, 2, [1, 1], 7) == 0.0
    with pytest.raises(UnknownEventError):
        event_hazard(system, 3, [0, 1], 7)


def test_transition_prob_branches():
    """测试转移概率的三种情形"""
    system = two_person_system()
    x = [0, 1]
    assert transition_prob(system, 2, x, [1, 1], 7) == pytest.approx(0.3)
    assert transition_prob(system, 2, x, [0, 0], 9) == pytest.approx(0.2)
    assert transition_prob(system, 2, x, x, None) == pytest.approx(0.5)
    # inconsistent with the named event
    assert transition_prob(system, 2, x, [1, 0], 7) == 0.0
    assert transition_prob(system, 2, x, [1, 1], None) == 0.0


def test_transition_rows_sum_to_one():
    """测试转移核按行归一"""
    system = random_system(3)
    for t in range(2, system.horizon + 1):
        for x in [(0, 0, 0), (1, 0, 1), (1, 1, 1)]:
            total = transition_prob(system, t, x, x, None)
            for e in system.events(t):
                if e.hazard(x) > 0:
                    total += transition_prob(system, t, x, e.apply(np.array(x)), e.id)
            assert total == pytest.approx(1.0, abs=1e-12)


def test_hazard_overflow_names_the_step():
    """测试风险超过 1 时报告时间步"""
    a = EventSpec(id=0, rate_constant=0.7, participants=(Participant(0, UP, 1),))
    b = EventSpec(id=1, rate_constant=0.6, participants=(Participant(1, UP, 1),))
    system = SkmSystem(2, 2, 4, {3: [a, b]}, np.array([1.0, 0.0]))
    with pytest.raises(HazardOverflowError) as info:
        transition_prob(system, 3, [0, 0], [0, 0], None)
    assert info.value.t == 3


def test_path_log_likelihood_matches_hand_computation():
    """测试路径对数似然"""
    system = two_person_system()
    obsmodel = noisy_emission(0.9)
    states = np.array([[0, 1], [1, 1], [1, 0]])
    observations = np.array([[0, MISSING], [1, 1], [MISSING, 0]])
    bundle = TrajectoryBundle(states, observations, (None, 7, 9))
    expected = (
        np.log(0.5 * 0.5) + np.log(0.9)
        + np.log(0.3) + np.log(0.9 * 0.9)
        + np.log(0.2) + np.log(0.9)
    )
    score = path_log_likelihood(system, obsmodel, bundle)
    assert score.log_prob == pytest.approx(expected)
    assert score.zero_step is None


def test_path_log_likelihood_reports_impossible_step():
    """测试不可能路径返回 -inf 与时间步"""
    system = two_person_system()
    states = np.array([[0, 1], [1, 0], [1, 0]])
    bundle = TrajectoryBundle(states, np.full((3, 2), MISSING), (None, 7, None))
    score = path_log_likelihood(system, ObservationModel.identity(2), bundle)
    assert score.log_prob == -np.inf
    assert score.zero_step == 2


def test_sample_path_is_consistent_and_seeded():
    """测试模拟路径与记录事件一致"""
    system = random_system(11)
    obsmodel = noisy_emission()
    a = sample_path(system, obsmodel, 5)
    b = sample_path(system, obsmodel, 5)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.observations, b.observations)
    assert np.isfinite(path_log_likelihood(system, obsmodel, a).log_prob)


def test_observation_likelihoods_treat_missing_as_one():
    """测试缺失观测的似然为 1"""
    obsmodel = noisy_emission(0.8)
    grid = obsmodel.likelihoods(np.array([[0, MISSING], [1, 1]]))
    assert grid.shape == (2, 2, 2)
    assert np.allclose(grid[1, 0], [1.0, 1.0])
    assert np.allclose(grid[0, 0], [0.8, 0.2])
    with pytest.raises(ModelValidationError):
        obsmodel.likelihoods(np.array([[2]]))


def test_with_rates_updates_groups():
    """测试按速率组替换速率常数"""
    system = random_system(2)
    group = system.rate_groups[0]
    updated = system.with_rates({group: 0.05})
    rates = updated.rates()
    assert rates[group] == pytest.approx(0.05)
    for other in system.rate_groups[1:]:
        assert rates[other] == pytest.approx(system.rates()[other])
    table = updated.event_table
    assert np.allclose(table.event_rate[table.event_group == table.groups.index(group)], 0.05)


def test_individual_competition_lets_owners_fire_together():
    """测试按个体竞争时不同个体可同时发生事件"""
    system = two_person_system(competition=Competition.INDIVIDUAL)
    x = [0, 1]
    assert transition_prob(system, 2, x, [1, 0], (7, 9)) == pytest.approx(0.3 * 0.2)
    assert transition_prob(system, 2, x, [1, 1], 7) == pytest.approx(0.3 * 0.8)
    assert transition_prob(system, 2, x, [0, 0], 9) == pytest.approx(0.7 * 0.2)
    assert transition_prob(system, 2, x, x, None) == pytest.approx(0.7 * 0.8)
    # the global scope forbids two events in one step
    assert transition_prob(two_person_system(), 2, x, [1, 0], (7, 9)) == 0.0

    total = 0.0
    for y in [(0, 0), (0, 1), (1, 0), (1, 1)]:
        assert transition_marginal(system, 2, x, y) == pytest.approx(
            sum(transition_prob(system, 2, x, y, v) for v in (None, 7, 9, (7, 9)))
        )
        total += transition_marginal(system, 2, x, y)
    assert total == pytest.approx(1.0)


def test_transition_marginal_rows_sum_to_one():
    """测试边际转移核按行归一"""
    for competition in Competition:
        system = random_system(3, competition=competition)
        states = [(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)]
        for t in range(2, system.horizon + 1):
            for x in [(0, 0, 0), (1, 0, 1)]:
                total = sum(transition_marginal(system, t, x, y) for y in states)
                assert total == pytest.approx(1.0, abs=1e-12)


def test_individual_competition_validates_event_shape():
    """测试按个体竞争时事件必须由第一个参与者改变状态"""
    two_movers = EventSpec(id=0, rate_constant=0.1, participants=(Participant(0, UP, 1), Participant(1, DOWN, -1)))
    SkmSystem(2, 2, 3, {2: [two_movers]}, np.array([1.0, 0.0]))
    with pytest.raises(ModelValidationError, match="first participant"):
        SkmSystem(2, 2, 3, {2: [two_movers]}, np.array([1.0, 0.0]), Competition.INDIVIDUAL)
    static_head = EventSpec(
        id=0,
        rate_constant=0.1,
        participants=(Participant(1, (0.5, 1.0), delta=0, reactants=1, products=1), Participant(0, UP, 1)),
    )
    with pytest.raises(ModelValidationError):
        SkmSystem(2, 2, 3, {2: [static_head]}, np.array([1.0, 0.0]), "individual")


def test_individual_overflow_is_checked_per_owner():
    """测试按个体竞争时风险上限按个体检查"""
    a = EventSpec(id=0, rate_constant=0.7, participants=(Participant(0, UP, 1),))
    b = EventSpec(id=1, rate_constant=0.6, participants=(Participant(1, UP, 1),))
    c = EventSpec(id=2, rate_constant=0.5, participants=(Participant(1, UP, 1),))
    fine = SkmSystem(2, 2, 4, {3: [a, b]}, np.array([1.0, 0.0]), Competition.INDIVIDUAL)
    assert transition_prob(fine, 3, [0, 0], [1, 1], (0, 1)) == pytest.approx(0.42)
    crowded = SkmSystem(2, 2, 4, {3: [a, b, c]}, np.array([1.0, 0.0]), Competition.INDIVIDUAL)
    with pytest.raises(HazardOverflowError) as info:
        transition_prob(crowded, 3, [0, 0], [0, 0], None)
    assert info.value.t == 3 and info.value.individual == 1


def test_individual_sample_path_records_fired_sets():
    """测试按个体竞争的模拟记录事件集合"""
    system = random_system(11, competition=Competition.INDIVIDUAL)
    bundle = sample_path(system, noisy_emission(), 5)
    for t in range(2, system.horizon + 1):
        v = bundle.events[t - 1]
        assert v is None or isinstance(v, tuple)
        assert transition_prob(system, t, bundle.states[t - 2], bundle.states[t - 1], v) > 0
    assert np.isfinite(path_log_likelihood(system, noisy_emission(), bundle).log_prob)
