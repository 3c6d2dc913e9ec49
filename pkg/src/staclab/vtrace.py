"""Leaky V-trace targets and policy-gradient weights.

Arrays are time-major: step axis first, any batch axes after it. Rewards are
stored so that ``rewards[t]`` is the reward received after taking
``actions[t]`` in ``observations[t]``; ``values`` carries one more entry than
the step count (the bootstrap state).

Every function accepts plain arrays or :class:`~staclab.diffcore.Tensor`
arguments. With Tensors in, Tensors come out and the result stays
differentiable in the discount, trace and leak coefficients; the importance
ratios and the value estimates are always treated as constants.
"""

from dataclasses import dataclass, field

import numpy as np

from staclab import kernels
from staclab.diffcore import tensor as T

PROB_FLOOR = 1e-30


class InvalidTrajectory(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Trajectory:
    """A batch of fixed-length trajectories, time-major.

    Attributes:
        observations: ``[n + 1, m, ...]``; the last row is the bootstrap state.
        actions: ``[n, m]`` integer actions, or ``[n, m, d]`` pre-squash
            samples for continuous control.
        rewards: ``[n, m]``.
        behavior_logp: ``[n, m]`` log-probability (log-density for continuous
            actions) of each action under the policy that sampled it.
        dones: ``[n, m]``; 1 where the episode ended after that step.
        versions: ``[m]`` parameter version that produced each trajectory.
    """

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    behavior_logp: np.ndarray
    dones: np.ndarray = None
    versions: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.rewards.shape[0]
        if self.observations.shape[0] != n + 1:
            raise InvalidTrajectory(
                f"need {n + 1} observations for {n} steps, got {self.observations.shape[0]}"
            )
        if self.actions.shape[0] != n or self.behavior_logp.shape != self.rewards.shape:
            raise InvalidTrajectory("actions, rewards and behavior_logp lengths differ")
        if not np.all(np.isfinite(self.behavior_logp)):
            raise InvalidTrajectory("behavior probabilities must be strictly positive")
        if self.dones is None:
            object.__setattr__(self, "dones", np.zeros_like(self.rewards))
        elif self.dones.shape != self.rewards.shape:
            raise InvalidTrajectory("dones shape differs from rewards")
        if self.versions is None:
            object.__setattr__(self, "versions", np.zeros(self.batch_size, dtype=np.int64))

    @property
    def length(self):
        return self.rewards.shape[0]

    @property
    def batch_size(self):
        return self.rewards.shape[1] if self.rewards.ndim > 1 else 1

    @property
    def behavior_prob(self):
        return np.exp(self.behavior_logp)

    @classmethod
    def from_probs(cls, observations, actions, rewards, behavior_probs, **kwargs):
        mu = np.asarray(behavior_probs, dtype=np.float64)
        if np.any(mu <= 0):
            raise InvalidTrajectory("behavior probabilities must be strictly positive")
        return cls(
            np.asarray(observations),
            np.asarray(actions),
            np.asarray(rewards, dtype=np.float64),
            np.log(mu),
            **kwargs,
        )

    @staticmethod
    def concat(trajs):
        """Join trajectories along the batch axis."""
        first = trajs[0]
        return Trajectory(
            observations=np.concatenate([t.observations for t in trajs], axis=1),
            actions=np.concatenate([t.actions for t in trajs], axis=1),
            rewards=np.concatenate([t.rewards for t in trajs], axis=1),
            behavior_logp=np.concatenate([t.behavior_logp for t in trajs], axis=1),
            dones=np.concatenate([t.dones for t in trajs], axis=1),
            versions=np.concatenate([t.versions for t in trajs]),
            meta=dict(first.meta),
        )


@dataclass(frozen=True)
class VTraceConfig:
    gamma: float = 0.99
    lam: float = 1.0
    alpha_rho: float = 1.0
    alpha_c: float = 1.0
    rho_bar: float = 1.0
    c_bar: float = 1.0
    single_alpha: bool = False

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")
        for name in ("alpha_rho", "alpha_c"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if not self.rho_bar >= self.c_bar > 0:
            raise ConfigError(f"need rho_bar >= c_bar > 0, got {self.rho_bar}, {self.c_bar}")
        if self.single_alpha and self.alpha_rho != self.alpha_c:
            raise ConfigError("single-alpha mode requires alpha_rho == alpha_c")

    @classmethod
    def single(cls, alpha, **kwargs):
        return cls(alpha_rho=alpha, alpha_c=alpha, single_alpha=True, **kwargs)


@dataclass(frozen=True, eq=False)
class VTraceResult:
    targets: object
    rhos: object
    deltas: object
    cs: object = None


def _is_tensor(*xs):
    return any(isinstance(x, T.Tensor) for x in xs)


def _value(x):
    return x.data if isinstance(x, T.Tensor) else np.asarray(x, dtype=np.float64)


def importance_ratios(target_probs, behavior_probs):
    """``pi / mu`` with ``pi`` floored at 1e-30. Always a constant."""
    mu = _value(behavior_probs)
    if np.any(mu <= 0):
        raise InvalidTrajectory("behavior probabilities must be strictly positive")
    pi = np.maximum(_value(target_probs), PROB_FLOOR)
    return pi / mu


def importance_ratios_from_logs(target_logp, behavior_logp):
    """Log-space variant: ``exp(log pi - log mu)``, ``pi`` floored at 1e-30."""
    log_pi = np.maximum(_value(target_logp), np.log(PROB_FLOOR))
    log_mu = _value(behavior_logp)
    if not np.all(np.isfinite(log_mu)):
        raise InvalidTrajectory("behavior probabilities must be strictly positive")
    return np.exp(log_pi - log_mu)


def _mix(ratios, alpha, clip):
    if isinstance(alpha, T.Tensor):
        clipped = np.minimum(clip, ratios)
        return alpha * clipped + (1.0 - alpha) * ratios
    return kernels.leaky_weights(ratios, float(alpha), float(clip))


def leaky_weights(ratios, cfg=None, *, alpha_rho=None, alpha_c=None, lam=None, rho_bar=None, c_bar=None):
    """Leaky policy-gradient weights ``rho`` and trace coefficients ``c``.

    ``c`` includes the ``lam`` factor and ``rho`` does not. Keyword values
    override ``cfg``; they may be Tensors.
    """
    cfg = cfg or VTraceConfig()
    a_rho = cfg.alpha_rho if alpha_rho is None else alpha_rho
    a_c = cfg.alpha_c if alpha_c is None else alpha_c
    lam = cfg.lam if lam is None else lam
    rho_bar = cfg.rho_bar if rho_bar is None else rho_bar
    c_bar = cfg.c_bar if c_bar is None else c_bar
    ratios = _value(ratios)
    rho = _mix(ratios, a_rho, rho_bar)
    c = _mix(ratios, a_c, c_bar)
    c = c * lam
    return rho, c


def _discounts(gamma, dones):
    not_done = 1.0 - _value(dones)
    if isinstance(gamma, T.Tensor):
        return gamma * not_done
    return float(gamma) * not_done


def td_errors(rhos, rewards, values, gamma, dones=None):
    """``rho_t (r_t + gamma V(x_{t+1}) - V(x_t))`` with both values held constant."""
    rewards = _value(rewards)
    values = _value(values)
    if values.shape[0] != rewards.shape[0] + 1 or values.shape[1:] != rewards.shape[1:]:
        raise InvalidTrajectory(f"values shape {values.shape} does not match rewards {rewards.shape}")
    if dones is None:
        dones = np.zeros_like(rewards)
    disc = _discounts(gamma, dones)
    err = rewards + disc * values[1:] - values[:-1]
    out = rhos * err
    return out


def backward_targets(deltas, cs, gamma, values, dones=None):
    """``v_t = V(x_t) + e_t`` with ``e_t = delta_t + gamma c_t e_{t+1}``, ``e_n = 0``."""
    values = _value(values)
    d_shape = _value(deltas).shape
    if values.shape[0] != d_shape[0] + 1:
        raise InvalidTrajectory("values must have one more step than deltas")
    if dones is None:
        dones = np.zeros(d_shape)
    disc = _discounts(gamma, dones)
    coef = disc * cs
    if _is_tensor(deltas, coef):
        coef = coef if isinstance(coef, T.Tensor) else T.Tensor(np.broadcast_to(coef, d_shape))
        deltas = deltas if isinstance(deltas, T.Tensor) else T.Tensor(deltas)
        if coef.shape != d_shape:
            coef = T.broadcast_to(coef, d_shape)
        errs = T.linear_recurrence(deltas, coef, reverse=True)
    else:
        errs = kernels.linear_recurrence(
            np.broadcast_to(deltas, d_shape), np.broadcast_to(coef, d_shape), True
        )
    return errs + values[:-1]


def vtrace_targets(target_logp, behavior_logp, rewards, values, cfg=None, dones=None, **overrides):
    """Leaky V-trace targets from log-probabilities of the taken actions.

    ``overrides`` may set ``gamma``, ``lam``, ``alpha_rho`` or ``alpha_c`` to
    Tensors so that the targets stay differentiable in them.
    """
    cfg = cfg or VTraceConfig()
    gamma = overrides.pop("gamma", cfg.gamma)
    ratios = importance_ratios_from_logs(target_logp, behavior_logp)
    rhos, cs = leaky_weights(ratios, cfg, **overrides)
    deltas = td_errors(rhos, rewards, values, gamma, dones)
    targets = backward_targets(deltas, cs, gamma, values, dones)
    return VTraceResult(targets=targets, rhos=rhos, deltas=deltas, cs=cs)


def vtrace_from_probs(target_probs, traj, values, cfg=None):
    """Convenience wrapper taking a :class:`Trajectory` and target probabilities."""
    ratios = importance_ratios(target_probs, traj.behavior_prob)
    cfg = cfg or VTraceConfig()
    rhos, cs = leaky_weights(ratios, cfg)
    deltas = td_errors(rhos, traj.rewards, values, cfg.gamma, traj.dones)
    targets = backward_targets(deltas, cs, cfg.gamma, values, traj.dones)
    return VTraceResult(targets=targets, rhos=rhos, deltas=deltas, cs=cs)
