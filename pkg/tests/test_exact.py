"""
Exact joint forward-backward tests
精确前向后向算法测试
"""

import itertools

import numpy as np
import pytest

from conftest import brute_force, noisy_emission, random_observations, random_system
from kinetic_vi.errors import HazardOverflowError, ModelValidationError, StateSpaceTooLargeError
from kinetic_vi.exact import (
    exact_forward_backward,
    exact_individual_marginals,
    exact_individual_two_slice,
    joint_digits,
)
from kinetic_vi.model import MISSING, Competition, EventSpec, ObservationModel, Participant, SkmSystem, transition_marginal


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_matches_brute_force_enumeration(seed):
    """测试与穷举结果一致"""
    system = random_system(seed, num_individuals=2, horizon=5)
    obsmodel = noisy_emission()
    obs = random_observations(system, obsmodel, seed + 100)
    log_z, marginals, event_post = brute_force(system, obsmodel, obs)

    post = exact_forward_backward(system, obsmodel, obs)
    assert post.log_evidence == pytest.approx(log_z, abs=1e-10)
    for m in range(2):
        assert np.allclose(exact_individual_marginals(post, m), marginals[m], atol=1e-10)
    for t in range(2, 6):
        by_event = {}
        for (_, _, v), p in post.xi_map(t).items():
            by_event[v] = by_event.get(v, 0.0) + p
        for v, p in event_post[t - 1].items():
            assert by_event.get(v, 0.0) == pytest.approx(p, abs=1e-10)


def test_normalization_and_xi_consistency():
    """测试归一化与双片边际一致性"""
    system = random_system(4)
    obsmodel = noisy_emission()
    obs = random_observations(system, obsmodel, 9)
    post = exact_forward_backward(system, obsmodel, obs)
    assert np.allclose(post.gamma.sum(axis=1), 1.0, atol=1e-12)
    assert np.allclose(post.alpha.sum(axis=1), 1.0, atol=1e-12)
    N = post.gamma.shape[1]
    for s in range(1, post.horizon):
        xi, targets = post.xi[s], post.targets[s]
        assert xi.sum() == pytest.approx(1.0, abs=1e-10)
        assert np.allclose(xi.sum(axis=0), post.gamma[s - 1], atol=1e-10)
        arrived = np.bincount(targets.ravel(), weights=xi.ravel(), minlength=N)
        assert np.allclose(arrived, post.gamma[s], atol=1e-10)


def test_individual_two_slice_sums_to_marginals():
    """测试个体双片统计量的边际"""
    system = random_system(5)
    obsmodel = noisy_emission()
    obs = random_observations(system, obsmodel, 2)
    post = exact_forward_backward(system, obsmodel, obs)
    for m in range(3):
        gamma = exact_individual_marginals(post, m)
        for t in range(2, system.horizon + 1):
            ids, table = exact_individual_two_slice(post, t, m)
            assert table.shape[2] == len(ids) + 1
            assert np.allclose(table.sum(axis=(1, 2)), gamma[t - 2], atol=1e-10)
            assert np.allclose(table.sum(axis=(0, 2)), gamma[t - 1], atol=1e-10)


def test_filtered_marginals_use_past_observations_only():
    """测试滤波边际只依赖过去观测"""
    system = random_system(6)
    obsmodel = noisy_emission()
    obs = random_observations(system, obsmodel, 3, missing=0.0)
    full = exact_forward_backward(system, obsmodel, obs)
    cut = obs.copy()
    cut[5:] = MISSING
    partial = exact_forward_backward(system, obsmodel, cut)
    for m in range(3):
        a = exact_individual_marginals(full, m, filtered=True)[:5]
        b = exact_individual_marginals(partial, m, filtered=True)[:5]
        assert np.allclose(a, b, atol=1e-12)
        assert np.allclose(exact_individual_marginals(partial, m)[4], b[4], atol=1e-12)


def test_state_space_cap():
    """测试状态空间上限"""
    system = random_system(0, num_individuals=5, horizon=3)
    obs = np.full((3, 5), MISSING)
    with pytest.raises(StateSpaceTooLargeError) as info:
        exact_forward_backward(system, noisy_emission(), obs, cap=16)
    assert info.value.size == 32


def test_impossible_observations_are_rejected():
    """测试零概率观测报错"""
    stay = EventSpec(id=0, rate_constant=0.0, participants=(Participant(0, (1.0, 0.0), delta=1),))
    system = SkmSystem(1, 2, 2, {2: [stay]}, np.array([1.0, 0.0]))
    obs = np.array([[0], [1]])
    with pytest.raises(ModelValidationError):
        exact_forward_backward(system, ObservationModel.identity(2), obs)


def test_hazard_checked_on_reachable_states_only():
    """测试只在可达状态上检查风险"""
    a = EventSpec(id=0, rate_constant=0.8, participants=(Participant(0, (0.0, 1.0), delta=-1),))
    b = EventSpec(id=1, rate_constant=0.8, participants=(Participant(1, (0.0, 1.0), delta=-1),))
    # both individuals start susceptible, so the overflowing (1, 1) state is never reached
    safe = SkmSystem(2, 2, 3, {2: [a, b]}, np.array([1.0, 0.0]))
    obs = np.full((3, 2), MISSING)
    exact_forward_backward(safe, ObservationModel.identity(2), obs)
    risky = SkmSystem(2, 2, 3, {2: [a, b]}, np.array([0.0, 1.0]))
    with pytest.raises(HazardOverflowError):
        exact_forward_backward(risky, ObservationModel.identity(2), obs)


def test_joint_digits_layout():
    """测试混合进制编码"""
    digits = joint_digits(2, 3)
    assert digits.shape == (9, 2)
    assert tuple(digits[5]) == (2, 1)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_individual_competition_matches_brute_force(seed):
    """测试按个体竞争时与穷举结果一致"""
    system = random_system(seed, num_individuals=2, horizon=5, competition=Competition.INDIVIDUAL)
    obsmodel = noisy_emission()
    obs = random_observations(system, obsmodel, seed + 100)
    log_z, marginals, label_post = brute_force(system, obsmodel, obs)

    post = exact_forward_backward(system, obsmodel, obs)
    assert post.log_evidence == pytest.approx(log_z, abs=1e-10)
    for m in range(2):
        assert np.allclose(exact_individual_marginals(post, m), marginals[m], atol=1e-10)
    for t in range(2, 6):
        fired = {None: label_post[t - 1].get(None, 0.0)}
        for label, p in label_post[t - 1].items():
            for k in label or ():
                fired[k] = fired.get(k, 0.0) + p
        probs = post.event_probs(t)
        for v, p in fired.items():
            assert probs.get(v, 0.0) == pytest.approx(p, abs=1e-10)
    with pytest.raises(ModelValidationError):
        post.xi_map(2)


def test_individual_competition_two_slice_sums_to_marginals():
    """测试按个体竞争时个体双片统计量的边际"""
    system = random_system(5, competition=Competition.INDIVIDUAL)
    obsmodel = noisy_emission()
    obs = random_observations(system, obsmodel, 2)
    post = exact_forward_backward(system, obsmodel, obs)
    for m in range(3):
        gamma = exact_individual_marginals(post, m)
        for t in range(2, system.horizon + 1):
            ids, table = exact_individual_two_slice(post, t, m)
            assert table.shape[2] == len(ids) + 1
            assert np.allclose(table.sum(axis=(1, 2)), gamma[t - 2], atol=1e-10)
            assert np.allclose(table.sum(axis=(0, 2)), gamma[t - 1], atol=1e-10)


@pytest.mark.parametrize("competition", list(Competition))
def test_uniform_emission_gives_propagated_prior(competition):
    """测试无信息观测时后验等于按转移核传播的先验"""
    system = random_system(8, num_individuals=3, horizon=6, competition=competition)
    uniform = ObservationModel(np.full((2, 2), 0.5))
    obs = random_observations(system, uniform, 4, missing=0.0)
    post = exact_forward_backward(system, uniform, obs)

    states = list(itertools.product(range(2), repeat=3))
    rows = np.arange(3)
    prior = np.array([np.prod(system.initial_dist[rows, x]) for x in states])
    expected = [prior]
    for t in range(2, system.horizon + 1):
        kernel = np.array([[transition_marginal(system, t, x, y) for y in states] for x in states])
        expected.append(expected[-1] @ kernel)
    for m in range(3):
        marginal = np.array([
            [sum(p for x, p in zip(states, dist) if x[m] == a) for a in range(2)] for dist in expected
        ])
        assert np.allclose(exact_individual_marginals(post, m), marginal, atol=1e-10)
        assert np.allclose(exact_individual_marginals(post, m, filtered=True), marginal, atol=1e-10)
