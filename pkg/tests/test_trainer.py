import numpy as np
import pytest

from omac.cvf import CvfModel
from omac.dataset import generate
from omac.env import enumerate_model, make_grid_env, make_matrix_game
from omac.oracle import expectile_of_discrete, support_q_star
from omac.trainer import (AWR_CLIP, METRIC_COLUMNS, FingerprintMismatchError, FixedPolicy,
                          InSampleProbe, PolicyModel, TrainConfig, TrainingDivergedError,
                          UniformPolicy, awr_loss, awr_weights, evaluate, metrics_csv, run,
                          train_policy, train_values, value_step)

PAYOFF = [[1, 0], [0, 2]]


@pytest.fixture(scope="module")
def matrix_env():
    return make_matrix_game(PAYOFF)


@pytest.fixture(scope="module")
def poor_matrix(matrix_env):
    return generate(matrix_env, "poor", 1000, 0)


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.tau, cfg.beta, cfg.lr_value, cfg.batch_size, cfg.gamma, cfg.rho) == \
        (0.7, 1.0, 5e-4, 128, 0.99, 0.005)
    for bad in ({"tau": 1.0}, {"tau": 0.0}, {"beta": 0.0}, {"gamma": 1.0}, {"rho": 0.0},
                {"batch_size": 0}, {"variant": "qmix"}, {"log_interval": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    assert TrainConfig(variant="LINEAR").variant == "linear"
    assert TrainConfig.from_preset("paper").hidden == 256
    with pytest.raises(ValueError):
        TrainConfig.from_preset("huge")


def frozen_target_fit(tau, transitions, steps=3000):
    """Fit V_0 with the Q side barely moving its targets."""
    model = CvfModel(2, 2, 2, tau=tau, seed=0)
    cfg = TrainConfig(tau=tau, rho=1e-12, lr_value=1e-2)
    q_bar = model.q_values(0, transitions.obs[:1, 0], target=True)[0].copy()
    for _ in range(steps):
        value_step(model, transitions, cfg)
    np.testing.assert_allclose(model.q_values(0, transitions.obs[:1, 0], target=True)[0], q_bar,
                               atol=1e-8)
    return model, q_bar


def test_tau_half_gives_batch_mean(poor_matrix):
    tr = poor_matrix.transitions()
    model, q_bar = frozen_target_fit(0.5, tr)
    expected = q_bar[tr.act[:, 0]].mean()
    assert model.v_local(0, tr.obs[:1, 0])[0] == pytest.approx(expected, abs=1e-3)


def test_converged_v_matches_exact_expectile_and_is_monotone(poor_matrix):
    tr = poor_matrix.transitions()
    values = []
    for tau in (0.3, 0.8):
        model, q_bar = frozen_target_fit(tau, tr)
        counts = np.bincount(tr.act[:, 0], minlength=2)
        exact = expectile_of_discrete(q_bar, counts / counts.sum(), tau)
        v = model.v_local(0, tr.obs[:1, 0])[0]
        assert v == pytest.approx(exact, abs=1e-3)
        values.append(v)
    assert values[0] <= values[1] + 1e-3


def test_matrix_q_tot_fits_payoff(matrix_env, poor_matrix):
    model = train_values(TrainConfig(value_iters=2000, lr_value=1e-3, rho=1.0), poor_matrix,
                         matrix_env)
    obs = np.repeat(matrix_env.reset(0)[1][None], 4, axis=0)
    joint = np.array([[0, 0], [0, 1], [1, 0], [1, 1]])
    np.testing.assert_allclose(model.q_tot(obs, joint), [1, 0, 0, 2], atol=0.05)


def test_zero_reward_zero_init_losses_vanish():
    env = make_matrix_game(np.zeros((2, 2)))
    tr = generate(env, "poor", 20, 0).transitions()
    model = CvfModel(2, 2, env.obs_dim, init="zeros")
    loss_v, loss_q = value_step(model, tr, TrainConfig())
    assert np.all(loss_v == 0.0) and loss_q == 0.0


def test_empty_batch_rejected(poor_matrix):
    tr = poor_matrix.transitions().take(np.array([], dtype=int))
    with pytest.raises(ValueError):
        value_step(CvfModel(2, 2, 2), tr, TrainConfig())


def test_soft_update_follows_recurrence_exactly(poor_matrix):
    tr = poor_matrix.transitions().take(np.arange(64))
    model = CvfModel(2, 2, 2, seed=3)
    old = {k: s.theta.copy() for k, s in model.targets.items()}
    value_step(model, tr, TrainConfig(rho=0.005))
    for k, store in model.targets.items():
        expected = (1 - 0.005) * old[k] + 0.005 * model.nets[k].params.theta
        assert store.theta.tobytes() == expected.tobytes()


@pytest.mark.parametrize("variant", ["cvf", "no-cca", "linear"])
def test_value_phase_is_in_sample(variant):
    env = make_grid_env(3, 3, 2, 2, 4)
    data = generate(env, "poor", 30, 0)
    probe = InSampleProbe()
    train_values(TrainConfig(variant=variant, value_iters=20, batch_size=16), data, env, probe=probe)
    assert probe.evaluations > 0 and probe.violations == 0


def test_maxq_variant_is_not_in_sample(matrix_env, poor_matrix):
    probe = InSampleProbe()
    train_values(TrainConfig(variant="maxq", value_iters=5), poor_matrix, matrix_env, probe=probe)
    assert probe.violations > 0


def test_awr_weights():
    np.testing.assert_array_equal(awr_weights(np.zeros(3), 1.0), 1.0)
    np.testing.assert_allclose(awr_weights(np.array([-2.0, 3.0]), 1e-9), 1.0, atol=1e-8)
    assert awr_weights(np.array([1e6]), 1.0)[0] == AWR_CLIP
    assert awr_weights(np.array([1.0]), 2.0)[0] == pytest.approx(np.exp(2.0))


def test_awr_loss_with_unit_weights_is_behavior_cloning():
    policy = PolicyModel(1, 3, 2, seed=0)
    obs = np.random.default_rng(0).standard_normal((5, 2))
    act = np.array([0, 2, 1, 1, 0])
    loss, grad = awr_loss(policy, 0, obs, act, None, np.ones(5))
    logp = policy.log_probs(0, obs)
    assert loss == pytest.approx(-logp[np.arange(5), act].mean())
    # gradient of the mean NLL, checked by central differences on a few coordinates
    net = policy.nets[0]
    theta = net.params.theta
    for j in (0, 7, theta.size - 1):
        old = theta[j]
        theta[j] = old + 1e-6
        up = -policy.log_probs(0, obs)[np.arange(5), act].mean()
        theta[j] = old - 1e-6
        down = -policy.log_probs(0, obs)[np.arange(5), act].mean()
        theta[j] = old
        assert grad[j] == pytest.approx((up - down) / 2e-6, rel=1e-5, abs=1e-9)


def test_policy_probs_sum_to_one_under_masks():
    policy = PolicyModel(2, 5, 3, seed=1)
    obs = np.random.default_rng(1).standard_normal((10, 3))
    masks = np.random.default_rng(2).random((10, 5)) < 0.6
    masks[:, 0] = True
    p = policy.probs(0, obs, masks)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(p[~masks] == 0.0)


def test_behavior_cloning_without_value_training(matrix_env):
    data = generate(matrix_env, "good", 1000, 0)
    cfg = TrainConfig(value_iters=0, policy_iters=1500, lr_policy=1e-3)
    model, policy, _ = run(cfg, data, matrix_env)
    tr = data.transitions()
    obs = matrix_env.reset(0)[1]
    for i in range(2):
        freq = np.bincount(tr.act[:, i], minlength=2) / len(tr)
        np.testing.assert_allclose(policy.probs(i, obs[i][None])[0], freq, atol=0.05)


def test_policy_phase_leaves_values_untouched(matrix_env, poor_matrix):
    cfg = TrainConfig(value_iters=50, policy_iters=50)
    model = train_values(cfg, poor_matrix, matrix_env)
    before = {k: net.params.theta.copy() for k, net in model.nets.items()}
    train_policy(cfg, poor_matrix, matrix_env, model)
    for k, net in model.nets.items():
        assert net.params.theta.tobytes() == before[k].tobytes()


def test_policy_extraction_hits_support_optimum(matrix_env, poor_matrix):
    cfg = TrainConfig(value_iters=2000, policy_iters=1000, beta=10.0)
    _, policy, _ = run(cfg, poor_matrix, matrix_env)
    res = support_q_star(enumerate_model(matrix_env))
    obs = matrix_env.reset(0)[1]
    assert policy.act(obs, matrix_env.action_mask(0)) == matrix_env.joint_action(res.greedy(0))


def test_run_is_bit_identical(matrix_env, poor_matrix):
    cfg = TrainConfig(value_iters=100, policy_iters=60, log_interval=30)
    a = run(cfg, poor_matrix, matrix_env)
    b = run(cfg, poor_matrix, matrix_env)
    for k in a[0].nets:
        assert a[0].nets[k].params.theta.tobytes() == b[0].nets[k].params.theta.tobytes()
    for na, nb in zip(a[1].nets, b[1].nets):
        assert na.params.theta.tobytes() == nb.params.theta.tobytes()
    assert metrics_csv(a[2]) == metrics_csv(b[2])


def test_metrics_rows_and_csv(matrix_env, poor_matrix):
    cfg = TrainConfig(value_iters=100, policy_iters=40, log_interval=50)
    _, _, rows = run(cfg, poor_matrix, matrix_env)
    assert [(r["phase"], r["iter"]) for r in rows] == [("value", 50), ("value", 100),
                                                       ("policy", 40)]
    text = metrics_csv(rows)
    assert text.splitlines()[0] == ",".join(METRIC_COLUMNS)
    assert len(text.splitlines()) == 4


def test_divergence_guard(matrix_env):
    env = make_matrix_game([[1e9, 0], [0, 1e9]])
    data = generate(env, "poor", 50, 0)
    with pytest.raises(TrainingDivergedError, match="L_Q"):
        train_values(TrainConfig(value_iters=5), data, env)


def test_fingerprint_mismatch_rejected(poor_matrix):
    with pytest.raises(FingerprintMismatchError):
        run(TrainConfig(value_iters=1, policy_iters=1), poor_matrix, make_matrix_game([[2, 0], [0, 1]]))


def test_evaluate_uniform_policy(matrix_env):
    res = evaluate(UniformPolicy(2, 2), matrix_env, 1000, seed=0, greedy=False)
    sigma = np.std([1, 0, 0, 2]) / np.sqrt(1000)
    assert abs(res.mean - 0.75) <= 3 * sigma
    assert res.episodes == 1000


def test_evaluate_optimal_and_deterministic(matrix_env):
    res = evaluate(FixedPolicy((1, 1)), matrix_env, 32)
    assert res.returns == [2.0] * 32 and res.std == 0.0
    grid = make_grid_env(3, 3, 2, 2, 6)
    policy = PolicyModel(2, 5, grid.obs_dim, seed=4)
    assert evaluate(policy, grid, 8, seed=3).returns == evaluate(policy, grid, 8, seed=3).returns


def test_policy_checkpoint_roundtrip():
    policy = PolicyModel(2, 3, 4, seed=5)
    back = PolicyModel.from_dict(policy.to_dict())
    obs = np.random.default_rng(0).standard_normal((3, 4))
    assert back.probs(1, obs).tobytes() == policy.probs(1, obs).tobytes()
