"""Adam with bias correction, plus the central finite-difference oracle.

The optimizer family is not dictated by the training recipe this package
realizes, so it is fixed here (Adam, beta=(0.9, 0.999), eps=1e-8) and the
choice is recorded in every run config and report.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch
from .tensor import Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8


@dataclass
class AdamState:
    """Per-parameter moments and the shared step counter."""

    lr: float
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_init(params: list[Tensor], lr: float,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              epsilon: float = ADAM_EPSILON) -> AdamState:
    if lr <= 0:
        raise ShapeMismatch(f"learning rate must be positive, got {lr}")
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)
    state.m = [np.zeros_like(p.data) for p in params]
    state.v = [np.zeros_like(p.data) for p in params]
    return state


def adam_step(params: list[Tensor], grads: list, state: AdamState) -> None:
    """One bias-corrected Adam update, in place on params.

    grads aligns with params; a None entry means zero gradient this step.
    """
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ShapeMismatch(
            f"adam_step arity: {len(params)} params, {len(grads)} grads, "
            f"{len(state.m)} moment slots"
        )
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        else:
            g = np.asarray(g, dtype=np.float64)
            if g.shape != p.data.shape:
                raise ShapeMismatch(f"grad shape {g.shape} vs param {p.data.shape}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        mhat = state.m[i] / bc1
        vhat = state.v[i] / bc2
        p.data -= state.lr * mhat / (np.sqrt(vhat) + state.epsilon)


def finite_difference_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate.

    f takes an ndarray shaped like x and returns a scalar.  Used as the
    independent oracle for every analytic gradient rule.
    """
    if h <= 0:
        raise ShapeMismatch(f"finite-difference step must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        fp = float(f(x))
        flat_x[i] = orig - h
        fm = float(f(x))
        flat_x[i] = orig
        flat_g[i] = (fp - fm) / (2.0 * h)
    return grad


def gradients_close(analytic: np.ndarray, numeric: np.ndarray,
                    rtol: float = 1e-4, atol: float = 1e-7) -> bool:
    """Elementwise |a - n| <= atol + rtol |n|, the gradient-check criterion."""
    return bool(np.allclose(analytic, numeric, rtol=rtol, atol=atol))


def worst_gradient_error(analytic: np.ndarray, numeric: np.ndarray,
                         atol: float = 1e-7) -> float:
    """Max relative error with an absolute floor on the denominator."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(n), atol)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
