import numpy as np
import pytest

from oracles import central_diff, frozen_ac_loss, mlp_forward
from staclab import agent as A
from staclab import checks, losses
from staclab.diffcore import NumericFailure, ParamSet, Tensor, backward, rmsprop_step


def _tiny(**kw):
    return checks.tiny_config(**kw)


def _setup(seed=0, **kw):
    rng = np.random.default_rng(seed)
    cfg = _tiny(seed=seed, **kw)
    state = checks.perturbed_state(cfg, rng)
    traj = checks.random_batch(rng, cfg, n=8, m=3)
    return cfg, state, traj


# -- network ---------------------------------------------------------------------------


def test_zero_initialised_heads_give_uniform_policy_and_zero_value():
    cfg = A.AgentConfig(obs_dim=5, num_actions=4, torso=(16, 16), head_hidden=8, num_heads=2)
    params = A.init_params(cfg)
    obs = np.random.default_rng(0).standard_normal((7, 5))
    for out in A.forward(params, obs, cfg):
        np.testing.assert_array_equal(out.value.data, 0.0)
        np.testing.assert_allclose(np.exp(losses.Categorical(out.policy).log_probs.data), 0.25, rtol=1e-15)


def test_hidden_layers_are_scaled_orthogonal():
    params = A.init_params(A.AgentConfig(obs_dim=6, num_actions=2, torso=(4,), head_hidden=8))
    w = params["torso/w0"]
    np.testing.assert_allclose(w.T @ w, 2.0 * np.eye(4), atol=1e-12)
    w = params["head0/pi/w0"]
    np.testing.assert_allclose(w @ w.T, 2.0 * np.eye(4), atol=1e-12)


def test_forward_matches_oracle_and_is_batch_consistent():
    cfg, state, _ = _setup(num_heads=3)
    obs = np.random.default_rng(1).standard_normal((5, 3, cfg.obs_dim))
    outs = A.forward(state.params, obs, cfg)
    for p, out in enumerate(outs):
        logits, values = mlp_forward(dict(state.params), obs, 1, head=p)
        np.testing.assert_allclose(out.policy.data, logits, rtol=1e-13)
        np.testing.assert_allclose(out.value.data, values, rtol=1e-13, atol=1e-15)
    row = A.forward(state.params, obs[2, 1], cfg, heads=[0])[0]
    np.testing.assert_allclose(row.policy.data, outs[0].policy.data[2, 1], rtol=1e-13)


def test_parameter_layout_for_three_heads():
    cfg = _tiny(num_heads=3)
    params = A.init_params(cfg)
    assert {k.split("/")[0] for k in params} == {"torso", "head0", "head1", "head2"}
    snap = A.Agent(cfg).snapshot()
    assert set(snap.params) == set(A.acting_param_names(cfg))
    assert not any(k.startswith(("head1", "head2")) for k in snap.params)


def test_observation_size_checked():
    cfg = _tiny()
    with pytest.raises(ValueError, match="observation size"):
        A.forward(A.init_params(cfg), np.zeros((2, cfg.obs_dim + 1)), cfg)


def test_acting_uses_only_head_zero():
    cfg, state, _ = _setup(num_heads=2)
    obs = np.random.default_rng(2).standard_normal((4, cfg.obs_dim))
    snap = A.ParamSnapshot(0, state.params)
    other = A.ParamSnapshot(0, state.params.update(**{k: state.params[k] + 1.0 for k in A.head_param_names(cfg, 1)}))
    a1, lp1 = A.act(snap, obs, cfg, np.random.default_rng(3))
    a2, lp2 = A.act(other, obs, cfg, np.random.default_rng(3))
    np.testing.assert_array_equal(a1, a2)
    np.testing.assert_array_equal(lp1, lp2)
    np.testing.assert_array_equal(A.behavior_logprob(snap, obs, a1, cfg), lp1)


def test_continuous_acting_and_update():
    cfg = _tiny(continuous=True, num_actions=2)
    rng = np.random.default_rng(4)
    state = checks.perturbed_state(cfg, rng, weight_scale=0.3)
    u, lp = A.act(A.ParamSnapshot(0, state.params), rng.standard_normal((5, cfg.obs_dim)), cfg, rng)
    assert u.shape == (5, 2) and np.isfinite(lp).all()
    traj = checks.random_batch(rng, cfg, n=6, m=2)
    new, diag = A.agent_step(state, traj, cfg)
    assert np.isfinite(new.eta).all() and np.isfinite(diag["metagrad_norm"])
    assert checks.metagradient_fd(state, traj, cfg).rel_error < 1e-4


# -- inner update -----------------------------------------------------------------------


def test_inner_gradient_matches_frozen_oracle():
    cfg, state, traj = _setup()
    hyper = A.head_hyperparams(state.eta, cfg, 0)
    ref_logits, ref_values = mlp_forward(dict(state.params), traj.observations, 1)

    def f(flat):
        logits, values = mlp_forward(dict(state.params.unflatten(flat)), traj.observations, 1)
        return frozen_ac_loss(logits, values, ref_logits, ref_values, traj, hyper)

    theta = {k: Tensor(v, requires_grad=True) for k, v in state.params.items()}
    grads = backward(A.inner_loss(theta, state.eta, traj, cfg), list(theta.values()))
    analytic = np.concatenate([g.data.ravel() for g in grads])
    numeric = central_diff(f, state.params.flatten())
    assert np.abs(analytic - numeric).max() <= 1e-6 * np.abs(numeric).max()


def test_inner_loss_averages_heads():
    cfg, state, traj = _setup(num_heads=3)
    want = []
    for p in range(3):
        logits, values = mlp_forward(dict(state.params), traj.observations, 1, head=p)
        want.append(frozen_ac_loss(logits, values, logits, values, traj, A.head_hyperparams(state.eta, cfg, p)))
    assert A.inner_loss(dict(state.params), state.eta, traj, cfg).item() == pytest.approx(np.mean(want), rel=1e-12)


def test_inner_update_is_one_rmsprop_step():
    cfg, state, traj = _setup()
    record = A.inner_update(state, traj, cfg, keep_graph=False)
    theta = {k: Tensor(v, requires_grad=True) for k, v in state.params.items()}
    grads = backward(A.inner_loss(theta, state.eta, traj, cfg), list(theta.values()))
    want, opt = rmsprop_step(state.params, ParamSet({k: g.data for k, g in zip(theta, grads)}), state.opt)
    assert record.params_after.equals(want)
    assert record.opt_state.step == opt.step == 1


def test_vanishing_loss_coefficients_freeze_parameters():
    cfg, state, traj = _setup()
    eta = state.eta.copy()
    idx = [cfg.meta_names.index(n) for n in ("g_v", "g_p", "g_e")]
    eta[:, idx] = -745.0  # sigmoid underflows to the smallest subnormal
    state.eta = eta
    record = A.inner_update(state, traj, cfg, keep_graph=False)
    np.testing.assert_allclose(record.params_after.flatten(), state.params.flatten(), rtol=0, atol=1e-12)


@pytest.mark.filterwarnings("ignore:overflow")
def test_numeric_failure_names_the_head():
    cfg, state, traj = _setup(num_heads=2)
    state.params = state.params.update(**{"head1/v/w1": np.full_like(state.params["head1/v/w1"], 1e300)})
    with pytest.raises(NumericFailure, match="head 1"):
        A.inner_update(state, traj, cfg)


# -- metagradient -------------------------------------------------------------------------


def _oracle_metagradient(cfg, state, traj, h=1e-5):
    """FD over eta of the frozen-stop-gradient outer loss after one RMSProp step."""
    record = A.inner_update(state, traj, cfg, keep_graph=False)
    ref_logits, ref_values = mlp_forward(dict(record.params_after), traj.observations, len(cfg.torso))
    old_logits, _ = mlp_forward(dict(state.params), traj.observations, len(cfg.torso))
    ms_fixed = record.opt_state.mean_square
    opt = state.opt

    def stepped(eta):
        theta = {k: Tensor(v, requires_grad=True) for k, v in state.params.items()}
        grads = backward(A.inner_loss(theta, eta, traj, cfg), list(theta.values()))
        out = {}
        for (k, p), g in zip(state.params.items(), grads):
            ms = opt.decay * opt.mean_square[k] + (1 - opt.decay) * g.data**2 if cfg.through_denominator else ms_fixed[k]
            out[k] = p - opt.lr * g.data / (np.sqrt(ms) + opt.eps)
        return out

    def outer(eta):
        logits, values = mlp_forward(stepped(eta), traj.observations, len(cfg.torso))
        return frozen_ac_loss(logits, values, ref_logits, ref_values, traj, losses.outer_hyperparams(cfg.hyper),
                              old_logits=old_logits, g_kl=cfg.hyper.g_kl)

    return central_diff(outer, state.eta, h)


@pytest.mark.parametrize("kw", [{}, {"through_denominator": True}, {"num_heads": 3}, {"split_alpha": True}])
def test_metagradient_matches_oracle(kw):
    cfg, state, traj = _setup(seed=5, **kw)
    record = A.inner_update(state, traj, cfg)
    _, analytic = A.metagradient(record, traj, cfg)
    numeric = _oracle_metagradient(cfg, state, traj)
    assert np.abs(analytic - numeric).max() < 1e-4 * np.abs(numeric).max()


def test_auxiliary_heads_reach_the_outer_loss_only_through_the_torso():
    cfg, state, traj = _setup(seed=6, num_heads=2)
    record = A.inner_update(state, traj, cfg)
    assert not any(k.startswith("head1") for k in record.theta_new)
    _, g = A.metagradient(record, traj, cfg)
    assert np.abs(g[1]).max() > 0
    # without a torso the auxiliary head is disconnected from head 0
    flat = A.AgentConfig(obs_dim=6, num_actions=3, torso=(), head_hidden=4, num_heads=2, seed=6)
    st = checks.perturbed_state(flat, np.random.default_rng(6))
    _, g = A.metagradient(A.inner_update(st, traj, flat), traj, flat)
    np.testing.assert_array_equal(g[1], 0.0)


def test_mask_freezes_unlisted_metaparameters():
    cfg, state, traj = _setup(seed=7, meta_mask=("lam", "g_e"))
    new, _ = A.agent_step(state, traj, cfg)
    moved = new.eta != state.eta
    names = np.array(cfg.meta_names)
    assert set(names[moved[0]]) <= {"lam", "g_e"} and moved[0].any()


def test_transformed_metaparameters_are_probabilities():
    cfg, state, traj = _setup(num_heads=3)
    diag = A.Agent(cfg, state).step(traj)
    keys = [f"head{p}/{n}" for p in range(3) for n in cfg.meta_names]
    assert all(0.0 < diag[k] < 1.0 for k in keys)


# -- checkpoints ---------------------------------------------------------------------------


def test_checkpoint_round_trip_resumes_bit_exactly(tmp_path):
    cfg, state, traj = _setup(num_heads=2)
    agent = A.Agent(cfg, state)
    agent.step(traj)
    path = tmp_path / "a.ckpt"
    agent.save(path)
    loaded = A.Agent.load(path)
    assert loaded.cfg == cfg and loaded.version == 1
    agent.step(traj)
    loaded.step(traj)
    assert loaded.params.equals(agent.params)
    np.testing.assert_array_equal(loaded.eta, agent.eta)


def test_config_digest_tracks_content():
    a, b = _tiny(), _tiny(num_heads=2)
    assert a.digest() == _tiny().digest() != b.digest()
    assert A.AgentConfig.from_dict(b.to_dict()) == b


# -- reduction to the fixed-hyperparameter learner -------------------------------------------


def _impala_step(params, opt, traj, cfg):
    theta = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    (out,) = A.forward(theta, traj.observations, cfg, heads=[0])
    dist = losses.Categorical(out.policy[: traj.length])
    parts = losses.actor_critic_loss(dist, out.value, traj, losses.outer_hyperparams(cfg.hyper), inner=True)
    grads = backward(parts.total, list(theta.values()))
    return rmsprop_step(params, ParamSet({k: g.data for k, g in zip(theta, grads)}), opt)


def test_frozen_metaparameters_reproduce_reference_learner(tmp_path):
    from staclab.harness import ChainMDP, HarnessConfig, read_log, run_deterministic

    hyper = losses.HyperParams(meta_lr=0.0)
    cfg = A.AgentConfig(obs_dim=6, num_actions=2, torso=(8,), head_hidden=8, meta_mask=(), hyper=hyper, seed=3)
    agent = A.Agent(cfg)
    log = tmp_path / "traj.log"
    hcfg = HarnessConfig(unroll=5, batch_size=4, envs_per_actor=4, seed=3, trajectory_log=str(log))
    seen = []
    run_deterministic(agent, lambda: ChainMDP(5), hcfg, 400, callback=lambda rec, st: seen.append(agent.params))

    params, opt = A.init_params(cfg), A.init_state(cfg).opt
    batches = list(read_log(log))
    assert len(batches) == len(seen) == 20
    for traj, got in zip(batches, seen):
        lp = A.behavior_logprob(A.ParamSnapshot(0, params), traj.observations[:-1], traj.actions, cfg)
        np.testing.assert_array_equal(lp, traj.behavior_logp)
        params, opt = _impala_step(params, opt, traj, cfg)
        assert got.equals(params)
