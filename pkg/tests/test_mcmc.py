import math

import numpy as np
import pytest

from modelbridge.client import connect
from modelbridge.models import MultiFidelityGaussianPosterior
from modelbridge.uq import MldaHierarchy, chain_rng, mlda, model_log_density, rwm
from modelbridge.uq import io

from conftest import serving
from oracles import POSTERIOR_FINE_MEAN, POSTERIOR_FINE_VAR


def std_normal(theta):
    return -0.5 * float(theta @ theta)


def batch_means_stderr(x, batches=50):
    means = x[: x.size // batches * batches].reshape(batches, -1).mean(axis=1)
    return means.std(ddof=1) / math.sqrt(batches)


@pytest.mark.slow
def test_rwm_standard_normal():
    res = rwm(std_normal, [0.0], 2.4, 100_000, seed=1)
    x = res.samples[:, 0]
    assert x.size == 100_000
    assert abs(x.mean()) <= 3 * batch_means_stderr(x)
    assert abs(x.var() - 1.0) <= 0.1
    assert 0.2 < res.acceptance_rate[0] < 0.6


def test_flat_target_always_accepts():
    res = rwm(lambda t: 0.0, [1.0, 2.0], 0.7, 500, seed=2)
    assert res.acceptance_rate == [1.0]
    assert len(np.unique(res.samples, axis=0)) == 500


def test_zero_sigma_stays_put():
    res = rwm(std_normal, [0.3, -0.2], 0.0, 100, seed=3)
    assert np.all(res.samples == [0.3, -0.2])
    assert res.acceptance_rate == [1.0]


def test_chain_length_counts_initial_state():
    res = rwm(std_normal, [0.5], 1.0, 1, seed=0)
    assert res.samples.tolist() == [[0.5]]
    assert res.evaluations == [1]


def test_rwm_is_seed_deterministic():
    a = rwm(std_normal, [0.0], 1.0, 1000, seed=7)
    b = rwm(std_normal, [0.0], 1.0, 1000, seed=7)
    c = rwm(std_normal, [0.0], 1.0, 1000, seed=8)
    assert np.array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)


@pytest.mark.parametrize("bad", [-math.inf, math.nan, math.inf])
def test_rwm_rejects_bad_start(bad):
    with pytest.raises(ValueError):
        rwm(lambda t: bad, [0.0], 1.0, 10, seed=0)


def test_minus_infinity_is_a_rejection():
    res = rwm(lambda t: 0.0 if abs(t[0]) < 1 else -math.inf, [0.0], 3.0, 2000, seed=4)
    assert np.all(np.abs(res.samples) < 1)
    assert 0 < res.acceptance_rate[0] < 1


@pytest.mark.slow
def test_detailed_balance_on_three_states():
    weights = np.array([1.0, 2.0, 3.0])
    logw = np.log(weights)

    def log_post(theta):
        k = round(theta[0])
        return logw[k] if 0 <= k <= 2 else -math.inf

    res = rwm(log_post, [1.0], 1.0, 1_000_000, seed=5)
    states = np.rint(res.samples[:, 0]).astype(int)
    flux = np.zeros((3, 3))
    np.add.at(flux, (states[:-1], states[1:]), 1)
    for i in range(3):
        for j in range(i + 1, 3):
            assert abs(flux[i, j] - flux[j, i]) <= 0.03 * (flux[i, j] + flux[j, i])
    occupancy = np.bincount(states, minlength=3) / states.size
    assert np.allclose(occupancy, weights / weights.sum(), atol=0.01)


def test_chain_streams_are_distinct_and_stable():
    a = chain_rng(3, 0).random(4)
    assert np.array_equal(a, chain_rng(3, 0).random(4))
    assert not np.array_equal(a, chain_rng(3, 1).random(4))
    assert not np.array_equal(a, chain_rng(4, 0).random(4))


def test_identical_levels_reproduce_rwm():
    h = MldaHierarchy([std_normal, std_normal], [1], 1.3)
    [chain] = mlda(h, [0.2, -0.1], 2000, chains=1, seed=21)
    ref = rwm(std_normal, [0.2, -0.1], 1.3, 2001, seed=21)
    assert np.array_equal(chain.samples, ref.samples)
    assert chain.acceptance_rate[1] == 1.0


def test_identical_three_levels_reproduce_rwm():
    h = MldaHierarchy([std_normal] * 3, [1, 1], 0.8)
    [chain] = mlda(h, [0.0], 500, seed=2)
    assert np.array_equal(chain.samples, rwm(std_normal, [0.0], 0.8, 501, seed=2).samples)


def posterior_hierarchy(model, subsampling=(25, 2)):
    levels = [model_log_density(model, {"level": lvl}) for lvl in range(3)]
    return MldaHierarchy(levels, list(subsampling), 1.0)


def test_evaluation_counts_follow_subsampling():
    model = MultiFidelityGaussianPosterior()
    results = mlda(posterior_hierarchy(model), [0.0, 0.0], 40, chains=3, seed=1, parallelism=3)
    for r in results:
        assert r.evaluations == [40 * 2 * 25 + 1, 40 * 2 + 1, 40 + 1]
        assert len(r.samples) == 41
        assert [len(s) for s in r.level_samples] == [40 * 50 + 1, 40 * 2 + 1, 41]
        assert all(0.0 <= a <= 1.0 for a in r.acceptance_rate)


@pytest.mark.slow
def test_posterior_recovery():
    model = MultiFidelityGaussianPosterior()
    results = mlda(posterior_hierarchy(model), [0.0, 0.0], 500, chains=4, seed=2024, parallelism=4)
    assert all(r.ok for r in results)
    pooled = np.concatenate([r.samples for r in results])
    assert np.all(np.abs(pooled.mean(axis=0) - POSTERIOR_FINE_MEAN) <= 0.1)
    assert np.all(np.abs(pooled.var(axis=0, ddof=1) / POSTERIOR_FINE_VAR - 1) <= 0.2)


def test_parallel_chains_match_serial():
    h = posterior_hierarchy(MultiFidelityGaussianPosterior(), (5, 2))
    serial = mlda(h, [0.0, 0.0], 30, chains=3, seed=9)
    parallel = mlda(h, [0.0, 0.0], 30, chains=3, seed=9, parallelism=3)
    for a, b in zip(serial, parallel):
        assert np.array_equal(a.samples, b.samples)
    assert not np.array_equal(serial[0].samples, serial[1].samples)


def test_nan_aborts_only_the_affected_chain():
    calls = {"n": 0}

    def fine(theta):
        calls["n"] += 1
        return math.nan if theta[0] > 1.5 else std_normal(theta)

    h = MldaHierarchy([std_normal, fine], [3], 1.0)
    results = mlda(h, [0.0], 200, chains=4, seed=3)
    failed = [r for r in results if not r.ok]
    assert failed and "nan" in failed[0].error
    assert len(failed[0].samples) < 201
    summary = io.chain_summary(results)
    assert set(summary["failed_chains"]) == {r.chain for r in failed}


def test_hierarchy_validation():
    with pytest.raises(ValueError):
        MldaHierarchy([std_normal, std_normal], [], 1.0)
    with pytest.raises(ValueError):
        MldaHierarchy([std_normal, std_normal], [0], 1.0)
    with pytest.raises(ValueError):
        mlda(MldaHierarchy([std_normal], [], 1.0), [0.0], 5, chains=0)
    with pytest.raises(ValueError):
        mlda(MldaHierarchy([std_normal, lambda t: -math.inf], [1], 1.0), [0.0], 5)


def test_remote_mlda_and_csv_round_trip(tmp_path):
    with serving(MultiFidelityGaussianPosterior()) as srv:
        model = connect(srv.url, "posterior")
        remote = mlda(posterior_hierarchy(model, (4, 2)), [0.0, 0.0], 20, chains=2, seed=5, parallelism=2)
    local = mlda(posterior_hierarchy(MultiFidelityGaussianPosterior(), (4, 2)), [0.0, 0.0], 20, chains=2, seed=5)
    for a, b in zip(remote, local):
        assert np.array_equal(a.samples, b.samples)
    path = tmp_path / "chains.csv"
    io.write_chains_csv(path, remote)
    back = io.read_chains_csv(path)
    assert np.array_equal(back[(1, 2)], remote[1].samples)
    assert np.array_equal(back[(0, 0)], remote[0].level_samples[0])
