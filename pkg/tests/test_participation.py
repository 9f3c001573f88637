import numpy as np
import pytest

from fedsim.core import RunConfig
from fedsim.participation import (
    CyclicScheduler,
    GroupedCyclicScheduler,
    IidScheduler,
    RegularizedScheduler,
    ScaScheduler,
    Scheduler,
    effective_window,
    make_scheduler,
)


def test_iid_samples_without_replacement():
    sch = IidScheduler(10, 4)
    part = sch.sample_round(0, seed=1)
    assert len(part.sampled) == 4
    assert len(set(part.sampled)) == 4
    assert all(part.weights[i] == 0.25 for i in part.sampled)


def test_cyclic_round_four_stays_in_its_group():
    sch = CyclicScheduler(6, 3, 1)
    part = sch.sample_round(4, seed=0)
    # round 4 activates group 4 mod 3 = 1, clients {2, 3}
    assert set(part.sampled) <= {2, 3}
    assert part.weights[part.sampled[0]] == 1.0


def test_grouped_cyclic_holds_each_group_for_g_rounds():
    sch = GroupedCyclicScheduler(6, 3, 2, avail_rounds_g=2)
    assert [sch.active_group(r) for r in range(8)] == [0, 0, 1, 1, 2, 2, 0, 0]
    part = sch.sample_round(4, seed=0)
    assert set(part.sampled) == {4, 5}


def test_regularized_is_deterministic_and_exact():
    sch = RegularizedScheduler(4, 2)
    first = sch.sample_round(0, seed=0)
    assert first.sampled == (0, 1)
    assert first.weights[0] == 0.5
    assert sch.sample_round(1, seed=99).sampled == (2, 3)
    # the window-averaged weight is 1/N for every client, any seed
    qbar = (np.stack([sch.sample_round(r, 7).weights for r in range(2)])).mean(axis=0)
    np.testing.assert_array_equal(qbar, np.full(4, 0.25))


@pytest.mark.parametrize("sch,expected", [
    (IidScheduler(12, 3), (1 / 3, 1, 0.25)),
    (CyclicScheduler(12, 3, 2), (0.5, 3, 0.5)),
    (GroupedCyclicScheduler(12, 3, 2, 4), (0.5, 12, 0.5)),
    (RegularizedScheduler(12, 4), (1 / 3, 4, 1.0)),
])
def test_pattern_constants(sch, expected):
    params = sch.params()
    assert (params.rho_sq, params.window, params.p_sample) == expected


@pytest.mark.parametrize("sch", [
    IidScheduler(9, 3),
    CyclicScheduler(8, 2, 3),
    GroupedCyclicScheduler(8, 2, 3, 5),
    RegularizedScheduler(9, 3),
    ScaScheduler(8, 2, 3, 5),
])
def test_weights_sum_to_one_and_respect_concentration(sch):
    rho_sq = sch.params().rho_sq
    is_sca = isinstance(sch, ScaScheduler)
    for r in range(25):
        part = sch.sample_round(r, seed=3)
        part.check()
        assert abs(part.weights.sum() - 1.0) <= 1e-12
        if not is_sca:
            assert float((part.weights ** 2).sum()) <= rho_sq + 1e-12


def test_sampling_is_seed_deterministic():
    sch = CyclicScheduler(20, 2, 4)
    assert sch.sample_round(5, seed=8).sampled == sch.sample_round(5, seed=8).sampled
    draws = {sch.sample_round(5, seed=s).sampled for s in range(20)}
    assert len(draws) > 1


def test_sca_full_availability_matches_group():
    sch = ScaScheduler(8, 2, 4, 1, p_active=1.0, p_inactive=0.0)
    part = sch.sample_round(0, seed=0)
    assert set(part.sampled) == {0, 1, 2, 3}


def test_sca_fallback_weights_when_few_available():
    sch = ScaScheduler(40, 2, 10, 1, p_active=0.05, p_inactive=0.0)
    saw_fallback = False
    for r in range(0, 200, 2):
        part = sch.sample_round(r, seed=1)
        if 0 < len(part.sampled) < 10:
            saw_fallback = True
            assert part.weights[part.sampled[0]] == 1.0 / len(part.sampled)
    assert saw_fallback


def test_sca_gives_up_when_nobody_can_show_up():
    sch = ScaScheduler(4, 2, 1, 1, p_active=0.0, p_inactive=0.0)
    with pytest.raises(ValueError, match="100 availability draws"):
        sch.sample_round(0, seed=0)


def test_constructor_validation():
    with pytest.raises(ValueError):
        IidScheduler(4, 5)
    with pytest.raises(ValueError, match="multiple of k_bar"):
        CyclicScheduler(5, 2, 1)
    with pytest.raises(ValueError, match="s_clients must be in"):
        CyclicScheduler(6, 3, 3)
    with pytest.raises(ValueError):
        GroupedCyclicScheduler(6, 3, 1, 0)
    with pytest.raises(ValueError, match="window_p"):
        RegularizedScheduler(5, 2)
    with pytest.raises(ValueError):
        ScaScheduler(6, 3, 1, 1, p_active=1.5)


def _cfg(**kw) -> RunConfig:
    base = dict(n_clients=12, rounds=1, algorithm="fedavg", eta=0.1,
                objective="quadratic", centers="0")
    base.update(kw)
    return RunConfig(**base)


def test_factory_builds_the_right_scheduler():
    assert isinstance(make_scheduler(_cfg(pattern="iid", s_clients=3)), IidScheduler)
    assert isinstance(make_scheduler(_cfg(pattern="cyclic", k_bar=3, s_clients=2)), CyclicScheduler)
    sca = make_scheduler(_cfg(pattern="sca", k_bar=3, s_clients=2, avail_rounds_g=2))
    assert isinstance(sca, ScaScheduler)
    reg = make_scheduler(_cfg(pattern="regularized", window_p=4, s_clients=3))
    assert isinstance(reg, RegularizedScheduler)


def test_effective_window_prefers_explicit_value():
    sch = GroupedCyclicScheduler(12, 3, 2, 4)
    assert effective_window(_cfg(), sch) == 12
    assert effective_window(_cfg(window_p=6), sch) == 6


def test_base_scheduler_is_abstract():
    with pytest.raises(NotImplementedError):
        Scheduler().sample_round(0, 0)
