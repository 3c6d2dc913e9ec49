"""Finite-difference check of the agent metagradient.

Central differences over every raw metaparameter of the outer loss at the
RMSProp-updated parameters. Stop-gradient inputs are recorded at the
unperturbed point and replayed during the perturbed evaluations. The RMSProp
denominator is held at its unperturbed value unless the agent
differentiates through it.
"""

from dataclasses import dataclass

import numpy as np

from staclab import agent as A
from staclab.diffcore import Tensor, backward
from staclab.diffcore.tensor import record_stop_gradients, replay_stop_gradients
from staclab.vtrace import Trajectory


@dataclass(frozen=True)
class FdResult:
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def rel_error(self):
        """``max |analytic - numeric| / max |numeric|``."""
        scale = np.abs(self.numeric).max()
        return float(np.abs(self.analytic - self.numeric).max() / max(scale, 1e-300))


def _updated_params(state, traj, cfg, eta, frozen_ms):
    theta = {k: Tensor(v, requires_grad=True) for k, v in state.params.items()}
    grads = backward(A.inner_loss(theta, eta, traj, cfg), list(theta.values()))
    opt = state.opt
    out = {}
    for (name, p), g in zip(state.params.items(), grads):
        if cfg.through_denominator:
            ms = opt.decay * opt.mean_square[name] + (1.0 - opt.decay) * g.data**2
        else:
            ms = frozen_ms[name]
        out[name] = Tensor(p - opt.lr * g.data / (np.sqrt(ms) + opt.eps))
    return out


def metagradient_fd(state, traj, cfg, h=1e-5):
    """Analytic metagradient and its central-difference estimate."""
    record = A.inner_update(state, traj, cfg, keep_graph=True)
    with record_stop_gradients() as tape:
        _, analytic = A.metagradient(record, traj, cfg)
    frozen_ms = record.opt_state.mean_square

    def outer(eta):
        theta_new = _updated_params(state, traj, cfg, eta, frozen_ms)
        with replay_stop_gradients(tape):
            return A.outer_loss(theta_new, traj, cfg, record.old_policy).item()

    numeric = np.zeros_like(state.eta)
    for idx in np.ndindex(state.eta.shape):
        up, down = state.eta.copy(), state.eta.copy()
        up[idx] += h
        down[idx] -= h
        numeric[idx] = (outer(up) - outer(down)) / (2.0 * h)
    if cfg.meta_mask is not None:
        numeric[:, [n not in cfg.meta_mask for n in cfg.meta_names]] = 0.0
    return FdResult(analytic, numeric)


def random_batch(rng, cfg, n=20, m=4):
    """Random observations, actions, rewards and behavior probabilities."""
    obs = rng.standard_normal((n + 1, m, cfg.obs_dim))
    if cfg.continuous:
        actions = 0.5 * rng.standard_normal((n, m, cfg.num_actions))
    else:
        actions = rng.integers(0, cfg.num_actions, (n, m))
    rewards = rng.standard_normal((n, m))
    behavior = np.log(rng.uniform(0.1, 0.9, (n, m)))
    dones = (rng.random((n, m)) < 0.1).astype(np.float64)
    return Trajectory(obs, actions, rewards, behavior, dones=dones)


def tiny_config(seed=0, num_heads=1, **overrides):
    kwargs = dict(obs_dim=6, num_actions=3, torso=(4,), head_hidden=4, num_heads=num_heads, seed=seed, total_updates=100)
    kwargs.update(overrides)
    return A.AgentConfig(**kwargs)


def perturbed_state(cfg, rng, eta_scale=1.0, weight_scale=0.5):
    """Initial state with non-zero output layers and scattered metaparameters."""
    st = A.init_state(cfg)
    st.params = st.params.map(lambda p: p + weight_scale * rng.standard_normal(p.shape))
    st.eta = cfg.hyper.eta_init + eta_scale * rng.standard_normal(st.eta.shape)
    return st


def metagradient_suite(batches=20, seed=0, num_heads=1, tol=1e-4):
    """Rows of ``(batch, rel_error, ok)`` over random tiny agents and batches."""
    rng = np.random.default_rng(seed)
    rows = []
    for b in range(batches):
        cfg = tiny_config(seed=seed + b, num_heads=num_heads)
        st = perturbed_state(cfg, rng)
        traj = random_batch(rng, cfg)
        res = metagradient_fd(st, traj, cfg)
        rows.append({"batch": b, "rel_error": res.rel_error, "ok": res.rel_error < tol})
    return rows
