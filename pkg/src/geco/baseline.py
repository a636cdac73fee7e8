"""Time-conditioned rectified-flow baseline.

Convention: data sits at gamma = 1 and noise at gamma = 0, the same
interpolation the GeCO objective uses. The network input is
``concat(x, s, gamma)``, one scalar slot wider than the GeCO field.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, DivergenceError
from .field import check_field_dims, interpolate
from .net import FieldParams, backward, forward


def time_input(x, s, gamma) -> np.ndarray:
    x, s = np.asarray(x, dtype=np.float64), np.asarray(s, dtype=np.float64)
    if x.ndim == 1:
        return np.concatenate([x, s, [float(gamma)]])
    n = x.shape[0]
    s = np.broadcast_to(s, (n, s.shape[-1]))
    g = np.broadcast_to(np.asarray(gamma, dtype=np.float64), (n,))[:, None]
    return np.concatenate([x, s, g], axis=1)


def eval_time_field(params: FieldParams, x, gamma, s) -> np.ndarray:
    x, s = np.asarray(x, dtype=np.float64), np.asarray(s, dtype=np.float64)
    check_field_dims(params, x.shape[-1], s.shape[-1], time_slot=True)
    return forward(params, time_input(x, s, gamma))[0]


def rf_loss_and_grads(params: FieldParams, conditions, chunks, rng=None, gamma=None, eps=None):
    """Mean ``|v(x_g, g, s) - (a - eps)|^2`` over the batch and its gradient."""
    chunks = np.atleast_2d(np.asarray(chunks, dtype=np.float64))
    conditions = np.atleast_2d(np.asarray(conditions, dtype=np.float64))
    n = chunks.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    check_field_dims(params, chunks.shape[1], conditions.shape[1], time_slot=True)
    if gamma is None:
        gamma = rng.uniform(0.0, 1.0, size=n)
    if eps is None:
        eps = rng.standard_normal(chunks.shape)
    gamma = np.broadcast_to(np.asarray(gamma, dtype=np.float64), (n,))
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), chunks.shape)
    x = interpolate(chunks, eps, gamma)
    out, cache = forward(params, time_input(x, conditions, gamma))
    resid = out - (chunks - eps)
    loss = float(np.sum(resid * resid) / n)
    if not np.isfinite(loss):
        raise DivergenceError("non-finite rectified-flow loss")
    grads, _ = backward(params, cache, 2.0 * resid / n)
    return loss, grads


def euler_integrate(velocity, x0, n_steps: int) -> np.ndarray:
    """Forward Euler from gamma = 0 to 1 with uniform steps; ``velocity(x, gamma)``."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    x = np.array(x0, dtype=np.float64)
    dt = 1.0 / n_steps
    for k in range(n_steps):
        x = x + dt * velocity(x, k / n_steps)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite state at Euler step {k}")
    return x


def rf_sample(params: FieldParams, s, n_steps: int, rng: np.random.Generator, x0=None) -> tuple[np.ndarray, int]:
    """Fixed-schedule sample; returns ``(chunk, nfe)`` with ``nfe == n_steps``."""
    dim = params.spec.output_dim
    eps = rng.standard_normal(dim) if x0 is None else np.asarray(x0, dtype=np.float64)
    nfe = 0

    def velocity(x, g):
        nonlocal nfe
        nfe += 1
        return eval_time_field(params, x, g, s)

    return euler_integrate(velocity, eps, n_steps), nfe


def analytic_point_field(x, gamma: float, a_star) -> np.ndarray:
    """Exact conditional velocity ``(a* - x) / (1 - gamma)`` for a one-point data set."""
    if not gamma < 1.0:
        raise ZeroDivisionError("analytic point field has a pole at gamma = 1")
    return (np.asarray(a_star, dtype=np.float64) - np.asarray(x, dtype=np.float64)) / (1.0 - gamma)


def fm_loss_proxy(params: FieldParams, s, generated, rng: np.random.Generator | None = None, eps=None) -> float:
    """Single-draw flow-matching loss at the pure-noise end (x = eps, gamma = 0)."""
    generated = np.asarray(generated, dtype=np.float64)
    if eps is None:
        eps = rng.standard_normal(generated.shape)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != generated.shape:
        raise DimensionError("noise and chunk shapes differ")
    v = eval_time_field(params, eps, 0.0, s)
    val = float(np.sum((v - (generated - eps)) ** 2))
    if not np.isfinite(val):
        raise DivergenceError("non-finite proxy score")
    return val
