import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedegg.data import gen_gaussian_mixture
from fedegg.objectives import DatasetObjective, LogRegTask, QuadraticObjective, QuadraticTask
from fedegg.strategies import (
    DEFAULT_ETA,
    ClientUpdate,
    StrategyConfig,
    aggregate_fednova,
    aggregate_mean,
    local_update_prox,
    local_update_scaffold,
    local_update_sgd,
    sample_clients,
    scaffold_server_update,
)


def quad_1d(center):
    return QuadraticObjective(QuadraticTask.from_optimum(np.eye(1), [center]))


def cfg(**kw):
    return StrategyConfig(**{"local_steps": 1, **kw})


def rng(seed=0):
    return np.random.default_rng(seed)


def _client_objective(seed=0):
    ds = gen_gaussian_mixture(3, 4, 20, 1.0, 1.0, rng(seed))
    return DatasetObjective(LogRegTask(3, 4), ds.features, ds.labels)


def test_config_validation():
    for kw in (dict(kind="fedsgd"), dict(local_steps=0), dict(batch_size=0), dict(mu_prox=-1.0)):
        with pytest.raises(ValueError):
            StrategyConfig(**kw)


def test_default_schedule():
    assert StrategyConfig().local_steps == 5 and StrategyConfig().batch_size == 32
    assert (DEFAULT_ETA(1), DEFAULT_ETA(100), DEFAULT_ETA(300)) == (1e-2, 1e-3, 1e-4)


def test_sgd_zero_step_size():
    obj = _client_objective()
    w = rng(1).standard_normal(obj.dim)
    u = local_update_sgd(w, obj, cfg(local_steps=4), rng(), 0.0)
    assert u.new_params.tobytes() == w.tobytes()
    assert u.steps_taken == 4


@pytest.mark.parametrize("steps, expected", [(1, 0.5), (2, 0.75)])
def test_sgd_hand_arithmetic(steps, expected):
    u = local_update_sgd(np.zeros(1), quad_1d(1.0), cfg(local_steps=steps), rng(), 0.5)
    assert u.new_params[0] == expected
    assert u.final_local_loss == pytest.approx(0.5 * (1 - expected) ** 2)


def test_prox_zero_mu_is_sgd_bitwise():
    obj = _client_objective(2)
    w = rng(3).standard_normal(obj.dim)
    c = cfg(local_steps=5, batch_size=8)
    a = local_update_sgd(w, obj, c, rng(4), 0.1)
    b = local_update_prox(w, obj, c, rng(4), 0.1)
    assert a.new_params.tobytes() == b.new_params.tobytes()


def test_prox_hand_arithmetic():
    # two steps: the second sees the proximal pull
    c = cfg(local_steps=2, mu_prox=1.0)
    u = local_update_prox(np.zeros(1), quad_1d(1.0), c, rng(), 0.5)
    v1 = 0.5
    v2 = v1 - 0.5 * ((v1 - 1.0) + 1.0 * (v1 - 0.0))
    assert u.new_params[0] == pytest.approx(v2, abs=1e-15)


def test_scaffold_zero_controls_is_sgd_bitwise():
    obj = _client_objective(5)
    w = rng(6).standard_normal(obj.dim)
    c = cfg(local_steps=5, batch_size=8, kind="scaffold")
    z = np.zeros(obj.dim)
    a = local_update_sgd(w, obj, c, rng(7), 0.1)
    b = local_update_scaffold(w, obj, c, z, z, rng(7), 0.1)
    assert a.new_params.tobytes() == b.new_params.tobytes()


def test_scaffold_control_hand_arithmetic():
    c_g, c_k = np.array([0.2]), np.array([-0.1])
    u = local_update_scaffold(np.zeros(1), quad_1d(1.0), cfg(kind="scaffold"), c_g, c_k, rng(), 0.5)
    v = 0.0 - 0.5 * ((0.0 - 1.0) - c_k[0] + c_g[0])
    assert u.new_params[0] == pytest.approx(v, abs=1e-15)
    c_new = c_k[0] - c_g[0] + (0.0 - v) / 0.5
    assert u.control_delta[0] == pytest.approx(c_new - c_k[0], abs=1e-15)


def test_scaffold_symmetric_clients_fixed_point():
    objs = [quad_1d(1.0), quad_1d(-1.0)]
    c = cfg(local_steps=3, kind="scaffold")
    w = np.array([2.0])
    c_g = np.zeros(1)
    c_k = [np.zeros(1), np.zeros(1)]
    for _ in range(200):
        ups = [local_update_scaffold(w, o, c, c_g, c_k[i], rng(), 0.1, i) for i, o in enumerate(objs)]
        for u in ups:
            c_k[u.client_id] = c_k[u.client_id] + u.control_delta
        c_g = scaffold_server_update(c_g, [u.control_delta for u in ups], 2)
        w = aggregate_mean(ups)
    assert abs(w[0]) < 1e-10


def test_aggregate_mean_examples():
    ups = [ClientUpdate(0, np.array([1.0, 3.0]), 0.0, 1), ClientUpdate(1, np.array([3.0, 1.0]), 0.0, 1)]
    np.testing.assert_array_equal(aggregate_mean(ups), [2.0, 2.0])
    np.testing.assert_array_equal(aggregate_mean(ups[:1]), [1.0, 3.0])
    three = [ClientUpdate(i, np.array([v]), 0.0, 1) for i, v in enumerate([1.0, 2.0, 6.0])]
    np.testing.assert_array_equal(aggregate_mean(three), [3.0])
    with pytest.raises(ValueError):
        aggregate_mean([])


@settings(max_examples=30)
@given(st.integers(1, 6), st.integers(0, 2**31))
def test_aggregation_of_identical_models(m, seed):
    v = np.random.default_rng(seed).standard_normal(5)
    ups = [ClientUpdate(i, v.copy(), 0.0, 3) for i in range(m)]
    assert aggregate_mean(ups).tobytes() == v.tobytes()
    assert aggregate_fednova(ups, np.zeros(5), [3] * m).tobytes() == v.tobytes()


def test_fednova_examples():
    w = np.array([1.0])
    ups = [ClientUpdate(0, np.array([0.0]), 0.0, 1), ClientUpdate(1, np.array([-3.0]), 0.0, 2)]
    # deltas per step: 1 and 2; mean 1.5; effective steps 1.5
    np.testing.assert_allclose(aggregate_fednova(ups, w, [1, 2]), [1.0 - 1.5 * 1.5])
    one = [ClientUpdate(0, np.array([0.25]), 0.0, 7)]
    np.testing.assert_allclose(aggregate_fednova(one, w, [7]), [0.25], atol=1e-15)
    np.testing.assert_allclose(aggregate_fednova(one, w, [7], weights=[1.0]), [0.25], atol=1e-15)
    eq = [ClientUpdate(i, np.array([float(i)]), 0.0, 4) for i in range(3)]
    assert aggregate_fednova(eq, w, [4, 4, 4]).tobytes() == aggregate_mean(eq).tobytes()
    with pytest.raises(ValueError):
        aggregate_fednova(eq, w, [4, 0, 4])


def test_scaffold_server_update():
    out = scaffold_server_update(np.zeros(2), [np.array([1.0, 2.0]), np.array([3.0, 0.0])], 4)
    np.testing.assert_allclose(out, [1.0, 0.5])


def test_sample_clients():
    s = sample_clients(10, 4, rng(1))
    assert s == sorted(set(s)) and len(s) == 4 and all(0 <= k < 10 for k in s)
    assert sample_clients(10, 4, rng(1)) == s
    r = rng(2)
    before = r.bit_generator.state
    assert sample_clients(5, 5, r) == list(range(5))
    assert r.bit_generator.state == before
    with pytest.raises(ValueError):
        sample_clients(3, 4, rng())


@pytest.mark.parametrize("kind", ["fedavg", "fedprox", "scaffold", "fednova"])
def test_distance_to_optimum_nonincreasing(kind):
    # all clients share one quadratic, full gradients, eta below 1/L
    A = np.diag([0.5, 1.0, 2.0])
    task = QuadraticTask.from_optimum(A, [1.0, -2.0, 0.5])
    objs = [QuadraticObjective(task) for _ in range(3)]
    c = StrategyConfig(kind=kind, local_steps=3, mu_prox=0.1 if kind == "fedprox" else 0.0)
    eta = 0.4
    w = np.array([5.0, 5.0, -5.0])
    w_star = np.array([1.0, -2.0, 0.5])
    c_g = np.zeros(3)
    c_k = [np.zeros(3) for _ in objs]
    prev = np.linalg.norm(w - w_star)
    for _ in range(50):
        if kind == "scaffold":
            ups = [local_update_scaffold(w, o, c, c_g, c_k[i], rng(), eta, i) for i, o in enumerate(objs)]
            for u in ups:
                c_k[u.client_id] = c_k[u.client_id] + u.control_delta
            c_g = scaffold_server_update(c_g, [u.control_delta for u in ups], 3)
            w = aggregate_mean(ups)
        elif kind == "fedprox":
            w = aggregate_mean([local_update_prox(w, o, c, rng(), eta, i) for i, o in enumerate(objs)])
        else:
            ups = [local_update_sgd(w, o, c, rng(), eta, i) for i, o in enumerate(objs)]
            w = aggregate_fednova(ups, w, [3] * 3) if kind == "fednova" else aggregate_mean(ups)
        cur = np.linalg.norm(w - w_star)
        assert cur <= prev + 1e-12
        prev = cur
