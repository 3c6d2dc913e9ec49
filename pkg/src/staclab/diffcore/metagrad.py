"""Gradients, and gradients through one optimizer step."""

from dataclasses import dataclass

import numpy as np

from staclab.diffcore.optim import RmsPropState, rmsprop_step
from staclab.diffcore.params import GradSet, ParamSet
from staclab.diffcore.tensor import NumericFailure, Tensor, backward, constant, sqrt, where


def _leaves(params):
    return {k: Tensor(v, requires_grad=True) for k, v in params.items()}


def value_and_grad(objective, params):
    """Evaluate ``objective(dict of Tensors)`` and its gradient w.r.t. ``params``."""
    leaves = _leaves(params)
    out = objective(leaves)
    if out.size != 1:
        raise ValueError(f"objective must be scalar, got shape {out.shape}")
    grads = backward(out, list(leaves.values()))
    return out.item(), GradSet({k: g.data for k, g in zip(leaves, grads)})


def grad(objective, params):
    """Exact reverse-mode gradient of a scalar objective."""
    return value_and_grad(objective, params)[1]


def rmsprop_expression(param, grad, opt, name, state_after, through_denominator=False):
    """One RMSProp update of ``param`` as a differentiable expression in ``grad``.

    Where the previous squared-gradient average is exactly zero the root is
    written as ``sqrt(1 - decay) * |g|``, which keeps its derivative finite.
    """
    lr, d = opt.lr, opt.decay
    if not through_denominator:
        denom = Tensor(np.sqrt(state_after.mean_square[name]) + opt.eps)
        return constant(param) - lr * grad / denom
    prev = np.asarray(opt.mean_square[name])
    fresh = prev == 0.0
    ms = d * constant(prev) + (1.0 - d) * grad * grad
    safe = where(fresh, 1.0, ms)
    root_abs = np.sqrt(1.0 - d) * grad * np.sign(grad.data)
    denom = where(fresh, root_abs, sqrt(safe)) + opt.eps
    return constant(param) - lr * grad / denom


@dataclass(frozen=True, eq=False)
class MetaGradResult:
    metagrad: np.ndarray
    params_after: ParamSet
    opt_state: RmsPropState
    inner_grads: GradSet
    inner_value: float
    outer_value: float


def differentiate_through_update(
    inner_loss,
    outer_loss,
    params,
    eta,
    opt,
    through_denominator=False,
):
    """Take one RMSProp step on ``inner_loss`` and differentiate ``outer_loss`` at the result w.r.t. ``eta``.

    ``inner_loss(theta, eta)`` and ``outer_loss(theta_new)`` take dicts of
    Tensors (``eta`` is a Tensor) and return scalar Tensors.

    The starting parameters are a constant leaf. By default the squared
    gradient average in the RMSProp denominator is treated as a constant
    (its post-update value); ``through_denominator=True`` differentiates
    through it as well.
    """
    theta = _leaves(params)
    eta_t = Tensor(np.asarray(eta, dtype=np.float64), requires_grad=True)
    inner = inner_loss(theta, eta_t)
    grads = backward(inner, list(theta.values()), create_graph=True)
    inner_grads = GradSet({k: g.data for k, g in zip(theta, grads)})
    params_after, state_after = rmsprop_step(params, inner_grads, opt)

    theta_new = {
        name: rmsprop_expression(p, g, opt, name, state_after, through_denominator)
        for (name, p), g in zip(theta.items(), grads)
    }
    outer = outer_loss(theta_new)
    (meta,) = backward(outer, [eta_t])
    if not np.isfinite(meta.data).all():
        raise NumericFailure("metagradient")
    return MetaGradResult(
        metagrad=meta.data.copy(),
        params_after=params_after,
        opt_state=state_after,
        inner_grads=inner_grads,
        inner_value=inner.item(),
        outer_value=outer.item(),
    )


def grad_through_update(inner_loss, outer_loss, params, eta, opt, through_denominator=False):
    """d/d eta of ``outer_loss(RMSProp(params, grad_theta inner_loss(params, eta)))``."""
    return differentiate_through_update(
        inner_loss, outer_loss, params, eta, opt, through_denominator
    ).metagrad
