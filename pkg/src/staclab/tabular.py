"""Exact analysis of the leaky V-trace operator on finite MDPs.

The operator is evaluated in closed form. Write the weights evaluated on the
exact ratios ``pi/mu`` as ``rho(x, a)`` and ``c(x, a)``, and define

    C(x, x') = sum_a mu(a|x) c(x, a) P(x'|x, a)
    b(x)     = sum_a mu(a|x) rho(x, a) [r(x, a) + gamma (P V)(x, a) - V(x)]

Then ``R V = V + sum_t (gamma C)^t b = V + (I - gamma C)^{-1} b``. The
series converges iff the spectral radius of ``gamma C`` is below one.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

ROW_TOL = 1e-12


class ConfigError(ValueError):
    """Operator settings outside the range where a result is claimed."""


class OperatorDivergence(ArithmeticError):
    """The trace series of the operator does not converge."""


@dataclass(frozen=True, eq=False)
class TabularMDP:
    transitions: np.ndarray  # [S, A, S]
    rewards: np.ndarray  # [S, A]
    gamma: float

    def __post_init__(self):
        p = np.asarray(self.transitions, dtype=np.float64)
        r = np.asarray(self.rewards, dtype=np.float64)
        if p.ndim != 3 or p.shape[0] != p.shape[2] or r.shape != p.shape[:2]:
            raise ValueError(f"inconsistent shapes: P {p.shape}, r {r.shape}")
        if np.any(p < 0) or np.abs(p.sum(-1) - 1.0).max() > ROW_TOL:
            raise ValueError("transition rows must be distributions")
        if not np.isfinite(r).all():
            raise ValueError("rewards must be finite")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        object.__setattr__(self, "transitions", p)
        object.__setattr__(self, "rewards", r)

    @property
    def num_states(self):
        return self.rewards.shape[0]

    @property
    def num_actions(self):
        return self.rewards.shape[1]


@dataclass(frozen=True, eq=False)
class PolicyTable:
    probs: np.ndarray  # [S, A]

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 2 or np.any(p < 0) or np.abs(p.sum(-1) - 1.0).max() > ROW_TOL:
            raise ValueError("policy rows must be distributions")
        object.__setattr__(self, "probs", p)


def _probs(policy):
    return policy.probs if isinstance(policy, PolicyTable) else np.asarray(policy, dtype=np.float64)


@dataclass(frozen=True)
class OperatorConfig:
    rho_bar: float = 1.0
    c_bar: float = 1.0
    alpha_rho: float = 1.0
    alpha_c: float = 1.0
    lam: float = 1.0

    def __post_init__(self):
        if not self.rho_bar >= self.c_bar > 0:
            raise ConfigError(f"need rho_bar >= c_bar > 0, got {self.rho_bar}, {self.c_bar}")
        for name in ("alpha_rho", "alpha_c", "lam"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")

    def require_certificate(self):
        if self.alpha_rho < self.alpha_c:
            raise ConfigError(
                f"contraction certificate needs alpha_rho >= alpha_c, got {self.alpha_rho} < {self.alpha_c}"
            )


def mixture_policy(pi, mu, rho_bar, alpha_rho):
    """Policy whose value is the operator's fixed point.

    ``alpha min(rho_bar mu, pi) + (1 - alpha) pi``, renormalised per state.
    """
    pi, mu = _probs(pi), _probs(mu)
    w = alpha_rho * np.minimum(rho_bar * mu, pi) + (1.0 - alpha_rho) * pi
    return PolicyTable(w / w.sum(-1, keepdims=True))


def exact_value(mdp, pi):
    """Solve ``(I - gamma P_pi) V = r_pi``."""
    pi = _probs(pi)
    p_pi = np.einsum("xa,xay->xy", pi, mdp.transitions)
    r_pi = (pi * mdp.rewards).sum(-1)
    return np.linalg.solve(np.eye(mdp.num_states) - mdp.gamma * p_pi, r_pi)


def bellman_residual(mdp, pi, v):
    pi = _probs(pi)
    q = mdp.rewards + mdp.gamma * mdp.transitions @ v
    return np.abs((pi * q).sum(-1) - v).max()


def operator_weights(pi, mu, cfg):
    """Leaky ``rho`` and ``c`` (with ``lam``) on exact ratios; zero where ``mu = 0``."""
    pi, mu = _probs(pi), _probs(mu)
    if np.any((mu == 0) & (pi > 0)):
        raise ConfigError("behavior policy must cover the target policy")
    ratio = np.divide(pi, mu, out=np.zeros_like(pi), where=mu > 0)
    rho = cfg.alpha_rho * np.minimum(cfg.rho_bar, ratio) + (1 - cfg.alpha_rho) * ratio
    c = cfg.lam * (cfg.alpha_c * np.minimum(cfg.c_bar, ratio) + (1 - cfg.alpha_c) * ratio)
    return rho, c


@dataclass(frozen=True, eq=False)
class AffineOperator:
    """``R V = M V + k`` for the given MDP, policies and config."""

    matrix: np.ndarray
    offset: np.ndarray
    trace_radius: float

    def __call__(self, v):
        return self.matrix @ v + self.offset

    @property
    def sup_norm(self):
        return float(np.abs(self.matrix).sum(-1).max())


def _trace_matrix(mdp, mu, pi, cfg):
    mu = _probs(mu)
    rho, c = operator_weights(pi, mu, cfg)
    C = np.einsum("xa,xa,xay->xy", mu, c, mdp.transitions)
    radius = float(np.max(np.abs(np.linalg.eigvals(mdp.gamma * C))))
    if radius >= 1.0:
        raise OperatorDivergence(f"spectral radius of gamma*C is {radius:.6g} >= 1")
    return mu, rho, C, radius


def operator_matrix(mdp, mu, pi, cfg):
    """Affine form of the operator; raises :class:`OperatorDivergence` if it is undefined."""
    mu, rho, C, radius = _trace_matrix(mdp, mu, pi, cfg)
    g, P = mdp.gamma, mdp.transitions
    mr = mu * rho
    # b(V) = B V + b0 with B = gamma sum_a mu rho P - diag(sum_a mu rho)
    B = g * np.einsum("xa,xay->xy", mr, P) - np.diag(mr.sum(-1))
    b0 = (mr * mdp.rewards).sum(-1)
    inv = np.linalg.inv(np.eye(mdp.num_states) - g * C)
    return AffineOperator(np.eye(mdp.num_states) + inv @ B, inv @ b0, radius)


def apply_operator(mdp, mu, pi, v, cfg):
    """Exact ``R V``."""
    mu, rho, C, radius = _trace_matrix(mdp, mu, pi, cfg)
    g, P = mdp.gamma, mdp.transitions
    v = np.asarray(v, dtype=np.float64)
    td = mdp.rewards + g * P @ v - v[:, None]
    b = (mu * rho * td).sum(-1)
    return v + np.linalg.solve(np.eye(mdp.num_states) - g * C, b)


def beta(mu, pi, rho_bar):
    """``min_x sum_a mu min(rho_bar, pi/mu)`` = ``min_x sum_a min(rho_bar mu, pi)``."""
    return float(np.minimum(rho_bar * _probs(mu), _probs(pi)).sum(-1).min())


def modulus_bound(gamma, alpha_rho, beta_value):
    return 1.0 - (1.0 - gamma) * (alpha_rho * beta_value + 1.0 - alpha_rho)


@dataclass(frozen=True)
class Certificate:
    beta: float
    bound: float
    empirical: float
    exact: float  # sup-norm of the linear part, the worst case over all pairs

    @property
    def holds(self):
        return self.empirical <= self.bound + 1e-12


def contraction_certificate(mdp, mu, pi, cfg, pairs=100, rng=None, scale=10.0):
    """Theoretical modulus bound against the observed Lipschitz ratio on random pairs."""
    cfg.require_certificate()
    rng = rng if rng is not None else np.random.default_rng(0)
    op = operator_matrix(mdp, mu, pi, cfg)
    b = beta(mu, pi, cfg.rho_bar)
    worst = 0.0
    for _ in range(pairs):
        v1 = rng.uniform(-scale, scale, mdp.num_states)
        v2 = rng.uniform(-scale, scale, mdp.num_states)
        gap = np.abs(v1 - v2).max()
        worst = max(worst, np.abs(apply_operator(mdp, mu, pi, v1, cfg) - apply_operator(mdp, mu, pi, v2, cfg)).max() / gap)
    return Certificate(beta=b, bound=modulus_bound(mdp.gamma, cfg.alpha_rho, b), empirical=float(worst), exact=op.sup_norm)


@dataclass(frozen=True, eq=False)
class FixedPointTrace:
    distances: np.ndarray  # sup-norm distance to the fixed point, iterations + 1 entries
    final: np.ndarray
    target: np.ndarray


def fixed_point_iterate(mdp, mu, pi, cfg, v0, iterations):
    """Iterate the operator from ``v0`` and record the distance to the mixture-policy value."""
    target = exact_value(mdp, mixture_policy(pi, mu, cfg.rho_bar, cfg.alpha_rho))
    op = operator_matrix(mdp, mu, pi, cfg)
    v = np.asarray(v0, dtype=np.float64)
    dist = [np.abs(v - target).max()]
    for _ in range(iterations):
        v = op(v)
        dist.append(np.abs(v - target).max())
    return FixedPointTrace(np.array(dist), v, target)


# -- random instances -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Instance:
    index: int
    mdp: TabularMDP
    mu: PolicyTable
    pi: PolicyTable
    cfg: OperatorConfig
    v0: np.ndarray = field(default=None)


def random_instance(rng, index=0, max_states=8, max_actions=4, gammas=(0.9, 0.99), alpha_mode="independent", rho_bar=1.0, c_bar=1.0):
    """Dirichlet(1) transitions and policies, rewards uniform in [-1, 1].

    ``alpha_mode`` is ``"independent"`` (alpha_c uniform below alpha_rho),
    ``"tied"`` (alpha_c = alpha_rho) or ``"random"`` (both uniform, any order).
    """
    S = int(rng.integers(2, max_states + 1))
    A = int(rng.integers(2, max_actions + 1))
    P = rng.dirichlet(np.ones(S), size=(S, A))
    r = rng.uniform(-1.0, 1.0, (S, A))
    gamma = float(rng.choice(gammas))
    mu = rng.dirichlet(np.ones(A), size=S)
    pi = rng.dirichlet(np.ones(A), size=S)
    a_rho = float(rng.uniform())
    if alpha_mode == "independent":
        a_c = float(rng.uniform(0.0, a_rho))
    elif alpha_mode == "tied":
        a_c = a_rho
    elif alpha_mode == "random":
        a_c = float(rng.uniform())
    else:
        raise ConfigError(f"unknown alpha mode {alpha_mode!r}")
    cfg = OperatorConfig(rho_bar=rho_bar, c_bar=c_bar, alpha_rho=a_rho, alpha_c=a_c)
    v0 = rng.uniform(-10.0, 10.0, S)
    return Instance(index, TabularMDP(P, r, gamma), PolicyTable(mu), PolicyTable(pi), cfg, v0)


def random_instances(count, seed=0, **kwargs):
    rng = np.random.default_rng(seed)
    return [random_instance(rng, i, **kwargs) for i in range(count)]


# -- report ---------------------------------------------------------------------


REPORT_FIELDS = (
    "instance",
    "states",
    "actions",
    "gamma",
    "alpha_rho",
    "alpha_c",
    "beta",
    "bound",
    "empirical_modulus",
    "exact_modulus",
    "fixed_point_residual",
    "iterate_error",
    "contraction_ok",
    "fixed_point_ok",
    "envelope_ok",
    "converged",
)


def analyse_instance(inst, iterations=200, pairs=100, fixed_point_tol=1e-9, converge_tol=1e-8):
    """One report row: certificate, fixed-point residual and iteration error."""
    rng = np.random.default_rng(inst.index)
    cert = contraction_certificate(inst.mdp, inst.mu, inst.pi, inst.cfg, pairs=pairs, rng=rng)
    target = exact_value(inst.mdp, mixture_policy(inst.pi, inst.mu, inst.cfg.rho_bar, inst.cfg.alpha_rho))
    residual = float(np.abs(apply_operator(inst.mdp, inst.mu, inst.pi, target, inst.cfg) - target).max())
    trace = fixed_point_iterate(inst.mdp, inst.mu, inst.pi, inst.cfg, inst.v0, iterations)
    err = float(trace.distances[-1])
    k = np.arange(len(trace.distances))
    envelope = cert.bound**k * trace.distances[0] + 1e-9
    return {
        "instance": inst.index,
        "states": inst.mdp.num_states,
        "actions": inst.mdp.num_actions,
        "gamma": inst.mdp.gamma,
        "alpha_rho": inst.cfg.alpha_rho,
        "alpha_c": inst.cfg.alpha_c,
        "beta": cert.beta,
        "bound": cert.bound,
        "empirical_modulus": cert.empirical,
        "exact_modulus": cert.exact,
        "fixed_point_residual": residual,
        "iterate_error": err,
        "contraction_ok": bool(cert.holds),
        "fixed_point_ok": bool(residual < fixed_point_tol),
        "envelope_ok": bool(np.all(trace.distances <= envelope)),
        "converged": bool(err < converge_tol),
    }


def write_report(rows, stream=None):
    """Tab-separated report with a header; returns the text if no stream is given."""
    out = stream if stream is not None else io.StringIO()
    writer = csv.DictWriter(out, fieldnames=REPORT_FIELDS, delimiter="\t", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return None if stream is not None else out.getvalue()


def read_report(text):
    return list(csv.DictReader(io.StringIO(text), delimiter="\t"))
