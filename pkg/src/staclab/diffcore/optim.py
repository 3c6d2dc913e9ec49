"""RMSProp for the agent parameters and Adam for the metaparameters.

Both steps are pure: they return new parameters and a new state.
"""

from dataclasses import dataclass, replace

import numpy as np

from staclab.diffcore.params import GradSet, ParamSet, StructureError


@dataclass(frozen=True, eq=False)
class RmsPropState:
    """Moving average of squared gradients plus a linear learning-rate schedule.

    ``lr_at(step)`` interpolates from ``lr_start`` to ``lr_end`` over
    ``total_steps`` updates and stays at ``lr_end`` afterwards.
    """

    mean_square: ParamSet
    decay: float = 0.99
    eps: float = 0.1
    lr_start: float = 6e-4
    lr_end: float = 0.0
    total_steps: int = 1
    step: int = 0

    @classmethod
    def init(cls, params, **kwargs):
        return cls(mean_square=params.zeros_like(), **kwargs)

    def lr_at(self, step):
        if self.total_steps <= 0:
            return self.lr_end
        frac = min(max(step, 0) / self.total_steps, 1.0)
        return self.lr_start + (self.lr_end - self.lr_start) * frac

    @property
    def lr(self):
        return self.lr_at(self.step)


def rmsprop_step(params, grads, state):
    """One RMSProp update; returns ``(new_params, new_state)``."""
    params.check_congruent(grads)
    params.check_congruent(state.mean_square)
    lr = state.lr
    d = state.decay
    ms = state.mean_square.map(lambda s, g: d * s + (1.0 - d) * g * g, grads)
    new = params.map(lambda p, g, s: p - lr * g / (np.sqrt(s) + state.eps), grads, ms)
    return new, replace(state, mean_square=ms, step=state.step + 1)


@dataclass(frozen=True, eq=False)
class AdamState:
    """First and second moments for Adam with bias correction."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-4

    @classmethod
    def init(cls, size, **kwargs):
        return cls(m=np.zeros(size), v=np.zeros(size), **kwargs)


def adam_step(eta, grad, state):
    """One Adam update of a flat metaparameter vector."""
    eta = np.asarray(eta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if eta.shape != grad.shape or eta.shape != state.m.shape:
        raise StructureError(f"length mismatch: eta {eta.shape}, grad {grad.shape}, state {state.m.shape}")
    t = state.step + 1
    m = state.b1 * state.m + (1.0 - state.b1) * grad
    v = state.b2 * state.v + (1.0 - state.b2) * grad * grad
    m_hat = m / (1.0 - state.b1**t)
    v_hat = v / (1.0 - state.b2**t)
    new = eta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, replace(state, m=m, v=v, step=t)


__all__ = ["AdamState", "GradSet", "RmsPropState", "adam_step", "rmsprop_step"]
