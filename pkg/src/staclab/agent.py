"""STAC / STACX agent: shared MLP torso, P policy/value heads, one
RMSProp inner step and one Adam metaparameter step per batch.

Head 0 is the acting head and the only one the outer loss sees; the other
heads are auxiliary tasks that shape the torso through their own
self-tuned losses.
"""

import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from staclab import losses
from staclab.diffcore import (
    AdamState,
    NumericFailure,
    ParamSet,
    RmsPropState,
    Tensor,
    adam_step,
    backward,
    no_grad,
    rmsprop_step,
)
from staclab.diffcore import tensor as T
from staclab.diffcore.metagrad import _leaves, rmsprop_expression

CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class AgentConfig:
    obs_dim: int
    num_actions: int
    continuous: bool = False
    torso: tuple = (256, 256)
    head_hidden: int = 256
    num_heads: int = 1
    split_alpha: bool = False
    meta_mask: tuple = None
    hyper: losses.HyperParams = field(default_factory=losses.HyperParams)
    lr_start: float = 6e-4
    lr_end: float = 0.0
    rms_decay: float = 0.99
    rms_eps: float = 0.1
    total_updates: int = 10_000
    through_denominator: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.num_heads < 1:
            raise ValueError("need at least one head")
        object.__setattr__(self, "torso", tuple(int(h) for h in self.torso))
        if self.meta_mask is not None:
            mask = tuple(self.meta_mask)
            bad = set(mask) - set(self.meta_names)
            if bad:
                raise ValueError(f"unknown metaparameters in mask: {sorted(bad)}")
            object.__setattr__(self, "meta_mask", mask)

    @property
    def meta_names(self):
        return losses.meta_names(self.split_alpha)

    @property
    def policy_outputs(self):
        return 2 * self.num_actions if self.continuous else self.num_actions

    @property
    def meta_active(self):
        return self.hyper.meta_lr != 0.0 and (self.meta_mask is None or len(self.meta_mask) > 0)

    def to_dict(self):
        d = asdict(self)
        d["torso"] = list(self.torso)
        d["meta_mask"] = None if self.meta_mask is None else list(self.meta_mask)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["hyper"] = losses.HyperParams(**d.get("hyper", {}))
        d["torso"] = tuple(d.get("torso", (256, 256)))
        if d.get("meta_mask") is not None:
            d["meta_mask"] = tuple(d["meta_mask"])
        return cls(**d)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# -- network --------------------------------------------------------------------


def _orthogonal(rng, n_in, n_out, gain):
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    w = q if n_in >= n_out else q.T
    return gain * w[:n_in, :n_out]


def _mlp_init(rng, prefix, sizes, zero_last):
    out = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        w = np.zeros((a, b)) if (last and zero_last) else _orthogonal(rng, a, b, np.sqrt(2.0))
        out[f"{prefix}/w{i}"] = w
        out[f"{prefix}/b{i}"] = np.zeros(b)
    return out


def init_params(cfg, rng=None):
    """Orthogonal torso and hidden layers; zero final layer on every head."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    arrays = _mlp_init(rng, "torso", (cfg.obs_dim,) + cfg.torso, zero_last=False)
    feat = cfg.torso[-1] if cfg.torso else cfg.obs_dim
    for p in range(cfg.num_heads):
        arrays.update(_mlp_init(rng, f"head{p}/pi", (feat, cfg.head_hidden, cfg.policy_outputs), True))
        arrays.update(_mlp_init(rng, f"head{p}/v", (feat, cfg.head_hidden, 1), True))
    return ParamSet(arrays)


def head_param_names(cfg, head):
    return [k for k in _all_names(cfg) if k.startswith(f"head{head}/")]


def acting_param_names(cfg):
    return [k for k in _all_names(cfg) if k.startswith("torso/")] + head_param_names(cfg, 0)


def _head_of(name):
    return int(name.split("/")[0][4:]) if name.startswith("head") else "shared"


def _all_names(cfg):
    names = [f"torso/{t}{i}" for i in range(len(cfg.torso)) for t in ("w", "b")]
    for p in range(cfg.num_heads):
        for part in ("pi", "v"):
            names += [f"head{p}/{part}/{t}{i}" for i in range(2) for t in ("w", "b")]
    return names


def _dense(params, prefix, x, layers, relu_last):
    for i in range(layers):
        x = x @ params[f"{prefix}/w{i}"] + params[f"{prefix}/b{i}"]
        if i < layers - 1 or relu_last:
            x = T.relu(x)
    return x


@dataclass(eq=False)
class HeadOutput:
    policy: object  # Tensor [..., policy_outputs]
    value: object  # Tensor [...]


def forward(params, obs, cfg, heads=None):
    """Run the torso once and the requested heads on it.

    ``obs`` may carry any leading shape ``[..., obs_dim]``; outputs keep it.
    """
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[-1] != cfg.obs_dim:
        raise ValueError(f"observation size {obs.shape[-1]} != configured {cfg.obs_dim}")
    lead = obs.shape[:-1]
    x = Tensor(obs.reshape(-1, cfg.obs_dim))
    feat = _dense(params, "torso", x, len(cfg.torso), relu_last=True)
    heads = range(cfg.num_heads) if heads is None else heads
    outs = []
    for p in heads:
        pol = _dense(params, f"head{p}/pi", feat, 2, relu_last=False)
        val = _dense(params, f"head{p}/v", feat, 2, relu_last=False)
        outs.append(
            HeadOutput(
                policy=T.reshape(pol, lead + (cfg.policy_outputs,)),
                value=T.reshape(val, lead),
            )
        )
    return outs


def make_dist(policy_out, cfg):
    if cfg.continuous:
        d = cfg.num_actions
        return losses.SquashedGaussian(
            losses.SquashedGaussianParams(policy_out[..., :d], policy_out[..., d:])
        )
    return losses.Categorical(policy_out)


@dataclass(frozen=True, eq=False)
class ParamSnapshot:
    """Immutable copy of the acting parameters (torso + head 0) with a version."""

    version: int
    params: ParamSet


def act(snapshot, obs, cfg, rng):
    """Sample head-0 actions; returns ``(actions, log_probs)``."""
    with no_grad():
        (out,) = forward(snapshot.params, obs, cfg, heads=[0])
        dist = make_dist(out.policy, cfg)
        actions = dist.sample(rng)
        logp = dist.log_prob(actions).data
    return actions, logp


def behavior_logprob(snapshot, obs, actions, cfg):
    with no_grad():
        (out,) = forward(snapshot.params, obs, cfg, heads=[0])
        return make_dist(out.policy, cfg).log_prob(actions).data


# -- learning -------------------------------------------------------------------


@dataclass(eq=False)
class AgentState:
    params: ParamSet
    eta: np.ndarray  # [P, K] raw metaparameters
    opt: RmsPropState
    meta_opt: AdamState
    version: int = 0


def init_state(cfg):
    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg, rng)
    k = len(cfg.meta_names)
    eta = np.full((cfg.num_heads, k), cfg.hyper.eta_init, dtype=np.float64)
    opt = RmsPropState.init(
        params,
        decay=cfg.rms_decay,
        eps=cfg.rms_eps,
        lr_start=cfg.lr_start,
        lr_end=cfg.lr_end,
        total_steps=cfg.total_updates,
    )
    h = cfg.hyper
    meta = AdamState.init(eta.size, lr=h.meta_lr, b1=h.meta_b1, b2=h.meta_b2, eps=h.meta_eps)
    return AgentState(params=params, eta=eta, opt=opt, meta_opt=meta)


def _evaluate(params, traj, cfg, heads):
    n, m = traj.length, traj.batch_size
    outs = forward(params, traj.observations, cfg, heads=heads)
    return [(make_dist(o.policy[:n], cfg), o.value) for o in outs]


def head_hyperparams(eta, cfg, head):
    return losses.meta_transform(eta[head], cfg.hyper, cfg.meta_names, cfg.meta_mask)


def inner_loss(theta, eta, traj, cfg):
    """Average over heads of each head's self-tuned actor-critic loss."""
    per_head = []
    for p, (dist, values) in enumerate(_evaluate(theta, traj, cfg, range(cfg.num_heads))):
        try:
            hyper = head_hyperparams(eta, cfg, p)
            parts = losses.actor_critic_loss(
                dist, values, traj, hyper, inner=True, rho_bar=cfg.hyper.rho_bar, c_bar=cfg.hyper.c_bar
            )
        except NumericFailure as err:
            raise NumericFailure(err.op, f"head {p}") from err
        per_head.append(parts.total)
    total = per_head[0]
    for extra in per_head[1:]:
        total = total + extra
    if cfg.num_heads > 1:
        total = total * (1.0 / cfg.num_heads)
    return total


def outer_loss(theta_new, traj, cfg, old_policy):
    """Fixed-hyperparameter loss on head 0 plus the KL to the pre-update policy."""
    ((dist, values),) = _evaluate(theta_new, traj, cfg, [0])
    parts = losses.actor_critic_loss(
        dist,
        values,
        traj,
        losses.outer_hyperparams(cfg.hyper),
        inner=False,
        rho_bar=cfg.hyper.rho_bar,
        c_bar=cfg.hyper.c_bar,
    )
    total = parts.total
    if cfg.hyper.g_kl != 0.0:
        total = total + cfg.hyper.g_kl * losses.policy_kl(dist, old_policy, traj.length - 1)
    return total


@dataclass(eq=False)
class UpdateRecord:
    """Result of the inner step, still differentiable in the metaparameters."""

    params_before: ParamSet
    params_after: ParamSet
    opt_state: RmsPropState
    inner_value: float
    theta_new: dict = None
    eta: Tensor = None
    old_policy: object = None


def inner_update(state, traj, cfg, keep_graph=None):
    """One RMSProp step on the head-averaged inner loss.

    With ``keep_graph`` the record keeps the updated parameters as a
    function of the metaparameters, for :func:`meta_update`.
    """
    keep_graph = cfg.meta_active if keep_graph is None else keep_graph
    theta = _leaves(state.params)
    eta_t = Tensor(state.eta, requires_grad=keep_graph)
    loss = inner_loss(theta, eta_t if keep_graph else state.eta, traj, cfg)
    grads = backward(loss, list(theta.values()), create_graph=keep_graph)
    for name, g in zip(theta, grads):
        if not np.isfinite(g.data).all():
            raise NumericFailure("inner gradient", f"head {_head_of(name)}, {name}")
    g_set = ParamSet({k: g.data for k, g in zip(theta, grads)})
    params_after, opt_after = rmsprop_step(state.params, g_set, state.opt)
    record = UpdateRecord(state.params, params_after, opt_after, loss.item())
    if keep_graph:
        keep = set(acting_param_names(cfg))
        theta_new = {
            name: rmsprop_expression(p, g, state.opt, name, opt_after, cfg.through_denominator)
            for (name, p), g in zip(theta.items(), grads)
            if name in keep
        }
        with no_grad():
            ((old_dist, _),) = _evaluate(state.params, traj, cfg, [0])
        record.theta_new = theta_new
        record.eta = eta_t
        record.old_policy = old_dist
    return record


def metagradient(record, traj, cfg):
    """Gradient of the outer loss at the updated parameters w.r.t. the raw metaparameters."""
    loss = outer_loss(record.theta_new, traj, cfg, record.old_policy)
    (g,) = backward(loss, [record.eta])
    if not np.isfinite(g.data).all():
        raise NumericFailure("metagradient")
    grad = g.data.copy()
    if cfg.meta_mask is not None:
        keep = np.array([n in cfg.meta_mask for n in cfg.meta_names])
        grad[:, ~keep] = 0.0
    return loss.item(), grad


def meta_update(state, record, traj, cfg):
    """Adam step on the metaparameters; returns ``(eta, meta_opt, outer_value, metagrad)``."""
    if record.theta_new is None:
        raise ValueError("inner update was run without keeping the graph")
    value, grad = metagradient(record, traj, cfg)
    new_eta, meta_opt = adam_step(state.eta.ravel(), grad.ravel(), state.meta_opt)
    new_eta = new_eta.reshape(state.eta.shape)
    if cfg.meta_mask is not None:
        frozen = np.array([n not in cfg.meta_mask for n in cfg.meta_names])
        new_eta[:, frozen] = state.eta[:, frozen]
    return new_eta, meta_opt, value, grad


def transformed_metaparams(eta, cfg):
    """Sigmoid of every raw metaparameter, loss coefficients left unscaled."""
    sig = losses.sigmoid(eta)
    return {
        f"head{p}/{name}": float(sig[p, i])
        for p in range(cfg.num_heads)
        for i, name in enumerate(cfg.meta_names)
    }


def agent_step(state, traj, cfg):
    """Inner update then meta update; returns ``(new_state, diagnostics)``."""
    record = inner_update(state, traj, cfg)
    diag = {"inner_loss": record.inner_value, "lr": state.opt.lr}
    eta, meta_opt = state.eta, state.meta_opt
    if record.theta_new is not None:
        eta, meta_opt, outer_value, grad = meta_update(state, record, traj, cfg)
        diag["outer_loss"] = outer_value
        diag["metagrad_norm"] = float(np.linalg.norm(grad))
    new_state = AgentState(
        params=record.params_after,
        eta=eta,
        opt=record.opt_state,
        meta_opt=meta_opt,
        version=state.version + 1,
    )
    diag.update(transformed_metaparams(eta, cfg))
    return new_state, diag


class Agent:
    """Stateful wrapper: owns the agent state and publishes snapshots."""

    def __init__(self, cfg, state=None):
        self.cfg = cfg
        self.state = state if state is not None else init_state(cfg)

    @property
    def version(self):
        return self.state.version

    @property
    def params(self):
        return self.state.params

    @property
    def eta(self):
        return self.state.eta

    def snapshot(self):
        names = acting_param_names(self.cfg)
        return ParamSnapshot(self.state.version, self.state.params.subset(names))

    def step(self, traj):
        self.state, diag = agent_step(self.state, traj, self.cfg)
        return diag

    def metaparams(self):
        return transformed_metaparams(self.state.eta, self.cfg)

    def save(self, path):
        save_checkpoint(path, self)

    @classmethod
    def load(cls, path):
        return load_checkpoint(path)


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(path, agent):
    """Write every array and scalar needed to resume bit-exactly.

    Layout: a zip with ``arrays.npz`` and ``meta.json`` (format version,
    config, config digest, optimizer scalars).
    """
    s = agent.state
    arrays = {f"params/{k}": v for k, v in s.params.items()}
    arrays.update({f"rms/{k}": v for k, v in s.opt.mean_square.items()})
    arrays["eta"] = s.eta
    arrays["adam/m"] = s.meta_opt.m
    arrays["adam/v"] = s.meta_opt.v
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": agent.cfg.to_dict(),
        "config_digest": agent.cfg.digest(),
        "version": s.version,
        "param_names": list(s.params.keys()),
        "rms": {k: getattr(s.opt, k) for k in ("decay", "eps", "lr_start", "lr_end", "total_steps", "step")},
        "adam": {k: getattr(s.meta_opt, k) for k in ("step", "lr", "b1", "b2", "eps")},
    }
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("arrays.npz", buf.getvalue())
        zf.writestr("meta.json", json.dumps(meta, sort_keys=True))


def load_checkpoint(path):
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        data = np.load(io.BytesIO(zf.read("arrays.npz")))
        arrays = {k: data[k] for k in data.files}
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {meta.get('format')}")
    cfg = AgentConfig.from_dict(meta["config"])
    if cfg.digest() != meta["config_digest"]:
        raise ValueError("checkpoint config digest mismatch")
    names = meta["param_names"]
    params = ParamSet({k: arrays[f"params/{k}"] for k in names})
    ms = ParamSet({k: arrays[f"rms/{k}"] for k in names})
    opt = RmsPropState(mean_square=ms, **meta["rms"])
    meta_opt = AdamState(m=arrays["adam/m"], v=arrays["adam/v"], **meta["adam"])
    state = AgentState(params=params, eta=arrays["eta"], opt=opt, meta_opt=meta_opt, version=meta["version"])
    return Agent(cfg, state)


__all__ = [
    "Agent",
    "AgentConfig",
    "AgentState",
    "HeadOutput",
    "ParamSnapshot",
    "UpdateRecord",
    "act",
    "agent_step",
    "forward",
    "init_params",
    "init_state",
    "inner_loss",
    "inner_update",
    "load_checkpoint",
    "meta_update",
    "metagradient",
    "outer_loss",
    "save_checkpoint",
    "transformed_metaparams",
]
