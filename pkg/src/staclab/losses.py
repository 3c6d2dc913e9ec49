"""Actor-critic loss terms, metaparameter transforms and policy distributions.

Sign conventions: every term is a quantity to be minimised. The policy term
is ``-g_p * sum(rho * log pi * A)``. The entropy term is ``-g_e * H(pi)``,
so it falls as entropy rises. Sums run over batch and time; there is no
averaging.
"""

from dataclasses import dataclass, field, fields

import numpy as np

from staclab import vtrace
from staclab.diffcore import tensor as T

LOG_2PI = float(np.log(2.0 * np.pi))
SIGMA_MIN = -5.0
SIGMA_MAX = 0.0

META_NAMES = ("gamma", "lam", "alpha", "g_v", "g_p", "g_e")
META_NAMES_SPLIT_ALPHA = ("gamma", "lam", "alpha_rho", "alpha_c", "g_v", "g_p", "g_e")


class SaturationError(ValueError):
    """A squashed action sits exactly on the boundary of (-1, 1)."""


@dataclass(frozen=True)
class HyperParams:
    """Outer-loss constants and meta-optimizer settings.

    Defaults follow the IMPALA settings: lambda, alpha and the truncation
    levels at 1, value coefficient 0.25, entropy coefficient 0.01, KL
    coefficient 1.
    """

    gamma_outer: float = 0.99
    lam_outer: float = 1.0
    alpha_outer: float = 1.0
    g_v_outer: float = 0.25
    g_p_outer: float = 1.0
    g_e_outer: float = 0.01
    rho_bar: float = 1.0
    c_bar: float = 1.0
    g_kl: float = 1.0
    meta_lr: float = 1e-3
    meta_b1: float = 0.9
    meta_b2: float = 0.999
    meta_eps: float = 1e-4
    eta_init: float = 4.6

    def outer_value(self, name):
        base = {"alpha_rho": "alpha", "alpha_c": "alpha"}.get(name, name)
        return float(getattr(self, f"{base}_outer"))

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def meta_names(split_alpha=False):
    return META_NAMES_SPLIT_ALPHA if split_alpha else META_NAMES


def meta_transform(eta, hp, names=META_NAMES, mask=None):
    """Map raw metaparameters of one head to effective loss hyperparameters.

    Discount, trace and leak coefficients go through a sigmoid; loss
    coefficients are the sigmoid times the matching outer coefficient.
    Entries excluded by ``mask`` are pinned to their outer-loss values.

    Args:
        eta: raw values, array or Tensor of shape ``[len(names)]``.
        hp: :class:`HyperParams`.
        names: metaparameter names matching the entries of ``eta``.
        mask: optional iterable of names that are self-tuned; ``None`` means all.

    Returns:
        dict with keys ``gamma, lam, alpha_rho, alpha_c, g_v, g_p, g_e``.
    """
    tensor_in = isinstance(eta, T.Tensor)
    out = {}
    for i, name in enumerate(names):
        if mask is not None and name not in mask:
            out[name] = hp.outer_value(name)
            continue
        raw = eta[i] if tensor_in else float(np.asarray(eta)[i])
        s = T.sigmoid(raw) if tensor_in else float(sigmoid(raw))
        out[name] = s * hp.outer_value(name) if name.startswith("g_") else s
    if "alpha" in out:
        out["alpha_rho"] = out["alpha_c"] = out.pop("alpha")
    return out


def outer_hyperparams(hp):
    """The fixed effective hyperparameters of the outer loss."""
    return {
        "gamma": hp.gamma_outer,
        "lam": hp.lam_outer,
        "alpha_rho": hp.alpha_outer,
        "alpha_c": hp.alpha_outer,
        "g_v": hp.g_v_outer,
        "g_p": hp.g_p_outer,
        "g_e": hp.g_e_outer,
    }


# -- distributions ---------------------------------------------------------------


class Categorical:
    """Softmax policy over a discrete action set; logits ``[..., A]``."""

    def __init__(self, logits):
        self.logits = T.as_tensor(logits)
        self.log_probs = T.log_softmax(self.logits)

    @property
    def probs(self):
        return T.exp(self.log_probs)

    def log_prob(self, actions):
        return T.gather_last(self.log_probs, actions)

    def neg_entropy(self):
        """``sum_a pi log pi`` per state."""
        return T.tsum(self.probs * self.log_probs, -1)

    def regularizer(self):
        return self.neg_entropy()

    def kl(self, other):
        """``KL(self || other)`` per state; ``other`` treated as given."""
        return T.tsum(self.probs * (self.log_probs - other.log_probs), -1)

    def detach(self):
        return Categorical(T.sg(self.logits))

    def sample(self, rng):
        from staclab import kernels

        probs = self.probs.data
        flat = probs.reshape(-1, probs.shape[-1])
        idx = kernels.categorical_sample(flat, rng.random(flat.shape[0]))
        return idx.reshape(probs.shape[:-1])


def std_transform(y, sigma_min=SIGMA_MIN, sigma_max=SIGMA_MAX):
    """``exp(sigma_min + 0.5 (sigma_max - sigma_min)(tanh(y) + 1))``."""
    return T.exp(sigma_min + 0.5 * (sigma_max - sigma_min) * (T.tanh(y) + 1.0))


@dataclass(frozen=True, eq=False)
class SquashedGaussianParams:
    mean_out: object
    std_out: object
    sigma_min: float = SIGMA_MIN
    sigma_max: float = SIGMA_MAX


def _log1m_tanh_sq(u):
    # log(1 - tanh(u)^2) = log 4 - 2|u| - 2 log(1 + exp(-2|u|))
    sign = np.sign(u.data)
    au = u * sign
    return np.log(4.0) - 2.0 * au - 2.0 * T.log(1.0 + T.exp(-2.0 * au))


class SquashedGaussian:
    """Diagonal Gaussian on pre-squash samples ``u``; actions are ``tanh(u)``.

    The network's mean output goes through tanh and the std output through
    :func:`std_transform`. Densities are reported for the squashed action,
    including the tanh Jacobian.
    """

    def __init__(self, params):
        self.params = params
        self.mean = T.tanh(T.as_tensor(params.mean_out))
        self.std = std_transform(T.as_tensor(params.std_out), params.sigma_min, params.sigma_max)

    def log_prob(self, u):
        u = T.as_tensor(u)
        if np.any(np.abs(np.tanh(u.data)) >= 1.0):
            raise SaturationError("squashed action at +/-1 has no finite density")
        z = (u - self.mean) / self.std
        gauss = -0.5 * z * z - T.log(self.std) - 0.5 * LOG_2PI
        return T.tsum(gauss - _log1m_tanh_sq(u), -1)

    def kl_to_standard(self):
        return T.tsum(0.5 * (self.std * self.std + self.mean * self.mean - 1.0) - T.log(self.std), -1)

    def regularizer(self):
        return self.kl_to_standard()

    def kl(self, other):
        # tanh is a bijection, so the pre-squash Gaussian KL is exact
        var, ovar = self.std * self.std, other.std * other.std
        diff = self.mean - other.mean
        return T.tsum(T.log(other.std) - T.log(self.std) + (var + diff * diff) / (2.0 * ovar) - 0.5, -1)

    def detach(self):
        p = self.params
        return SquashedGaussian(
            SquashedGaussianParams(T.sg(T.as_tensor(p.mean_out)), T.sg(T.as_tensor(p.std_out)), p.sigma_min, p.sigma_max)
        )

    def sample(self, rng):
        eps = rng.standard_normal(self.mean.shape)
        return self.mean.data + self.std.data * eps


def squashed_gaussian_logprob(params, u):
    return SquashedGaussian(params).log_prob(u)


def gaussian_kl_to_standard(params):
    return SquashedGaussian(params).kl_to_standard()


# -- loss terms -------------------------------------------------------------------


def value_loss(values, targets, g_v):
    """``g_v * sum (v - V)^2``.

    The targets must already be constant in the agent parameters (they are
    built from stop-gradient values); they may still depend on
    metaparameters, and that path is kept.
    """
    err = T.as_tensor(targets) - values
    return g_v * T.tsum(err * err)


def policy_loss(log_pi, rhos, rewards, discounts, next_targets, values, g_p, inner=True):
    """``-g_p * sum rho * log pi * (r + gamma v_next - V)``.

    Inner mode stops gradients through ``V`` only; outer mode stops them
    through the whole advantage.
    """
    values = T.as_tensor(values)
    if inner:
        adv = rewards + discounts * next_targets - T.sg(values)
    else:
        adv = T.sg(T.as_tensor(rewards + discounts * next_targets - values))
    return -g_p * T.tsum(rhos * log_pi * adv)


def entropy_loss(logits, g_e):
    """``-g_e * sum_s H(pi(.|x_s))`` for a softmax policy."""
    return g_e * T.tsum(Categorical(logits).neg_entropy())


def kl_regularizer(new_logits, old_logits, g_kl):
    """``g_kl * sum KL(pi_new || pi_old)`` with ``pi_old`` constant."""
    old = Categorical(T.sg(T.as_tensor(old_logits)))
    return g_kl * T.tsum(Categorical(new_logits).kl(old))


@dataclass(eq=False)
class LossParts:
    total: object
    value: object
    policy: object
    entropy: object
    vtrace: object = None
    extras: dict = field(default_factory=dict)


def actor_critic_loss(dist, values, traj, hyper, inner=True, rho_bar=1.0, c_bar=1.0):
    """Value + policy + entropy loss over one head.

    Args:
        dist: policy distribution over the first ``n`` observations.
        values: Tensor ``[n + 1, m]``.
        traj: :class:`~staclab.vtrace.Trajectory`.
        hyper: effective hyperparameters (floats or Tensors) as returned by
            :func:`meta_transform` or :func:`outer_hyperparams`.
        inner: stop-gradient placement flag.

    Only steps ``0 .. n-2`` enter the sums: the last transition supplies the
    bootstrap target for the step before it.
    """
    n = traj.length
    logp = dist.log_prob(traj.actions)
    vt = vtrace.vtrace_targets(
        T.sg(logp),
        traj.behavior_logp,
        traj.rewards,
        T.sg(values),
        vtrace.VTraceConfig(rho_bar=rho_bar, c_bar=c_bar),
        dones=traj.dones,
        gamma=hyper["gamma"],
        lam=hyper["lam"],
        alpha_rho=hyper["alpha_rho"],
        alpha_c=hyper["alpha_c"],
    )
    targets = T.as_tensor(vt.targets)
    rhos = T.as_tensor(vt.rhos)
    discounts = hyper["gamma"] * (1.0 - traj.dones)
    k = n - 1
    v_loss = value_loss(values[:k], targets[:k], hyper["g_v"])
    p_loss = policy_loss(
        logp[:k],
        rhos[:k],
        traj.rewards[:k],
        T.as_tensor(discounts)[:k],
        targets[1 : k + 1],
        values[:k],
        hyper["g_p"],
        inner=inner,
    )
    reg = dist.regularizer()
    e_loss = hyper["g_e"] * T.tsum(reg[:k])
    total = v_loss + p_loss + e_loss
    return LossParts(total=total, value=v_loss, policy=p_loss, entropy=e_loss, vtrace=vt)


def policy_kl(new_dist, old_dist, steps):
    """Sum of ``KL(new || old)`` over the first ``steps`` rows, ``old`` held constant."""
    return T.tsum(new_dist.kl(old_dist.detach())[:steps])
