"""Time-unconditional field: training objective, evaluation, and exact oracles.

The network sees ``concat(x, s)`` only. The interpolation weight ``gamma`` is
used to build training pairs and never reaches the model.

For data that is a finite mixture of point masses the regression minimiser is
available in closed form per ``gamma``:

    f*(x) = sum_{j, gamma} post(gamma, j | x) * (x - mu_j) * c(gamma) / (1 - gamma)

with ``post`` proportional to ``w_j * N(x; gamma mu_j, (1-gamma)^2 I)``. We
integrate over ``gamma`` with a midpoint rule (``oracle_field``) and, as an
independent check, by self-normalised Monte Carlo (``monte_carlo_field``).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DimensionError, DivergenceError, OracleUndefinedError
from .net import FieldParams, backward, forward
from .schedule import DecaySchedule, c_of_gamma, rescale_ratio


def interpolate(a, eps, gamma):
    a, eps = np.asarray(a, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if a.shape != eps.shape:
        raise DimensionError(f"chunk shapes differ: {a.shape} vs {eps.shape}")
    g = np.asarray(gamma, dtype=np.float64)
    if np.any(g < 0) or np.any(g > 1):
        raise ValueError("gamma must lie in [0, 1]")
    if g.ndim == 1 and a.ndim == 2:
        g = g[:, None]
    return g * a + (1.0 - g) * eps


def target_field(a, eps, gamma, sched: DecaySchedule = DecaySchedule()):
    """Restoring direction ``(eps - a) * c(gamma)``."""
    a, eps = np.asarray(a, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if a.shape != eps.shape:
        raise DimensionError(f"chunk shapes differ: {a.shape} vs {eps.shape}")
    c = np.asarray(c_of_gamma(gamma, sched))
    if c.ndim == 1 and a.ndim == 2:
        c = c[:, None]
    return (eps - a) * c


def field_input(x, s) -> np.ndarray:
    x, s = np.asarray(x, dtype=np.float64), np.asarray(s, dtype=np.float64)
    if x.ndim == 2 and s.ndim == 1:
        s = np.broadcast_to(s, (x.shape[0], s.shape[0]))
    return np.concatenate([x, s], axis=-1)


def check_field_dims(params: FieldParams, chunk_dim: int, cond_dim: int, time_slot: bool = False):
    extra = 1 if time_slot else 0
    spec = params.spec
    if spec.input_dim != chunk_dim + cond_dim + extra or spec.output_dim != chunk_dim:
        raise DimensionError(
            f"network maps {spec.input_dim}->{spec.output_dim}, "
            f"expected {chunk_dim + cond_dim + extra}->{chunk_dim}"
        )


def eval_field(params: FieldParams, x, s) -> np.ndarray:
    """``f(x, s)`` for one point or a batch of points."""
    x, s = np.asarray(x, dtype=np.float64), np.asarray(s, dtype=np.float64)
    check_field_dims(params, x.shape[-1], s.shape[-1])
    return forward(params, field_input(x, s))[0]


def geco_loss_and_grads(
    params: FieldParams,
    conditions: np.ndarray,
    chunks: np.ndarray,
    sched: DecaySchedule,
    rng: np.random.Generator | None = None,
    gamma=None,
    eps=None,
) -> tuple[float, FieldParams]:
    """Mean squared error to the restoring target and its parameter gradient.

    ``gamma``/``eps`` are drawn from ``rng`` unless given explicitly.
    """
    chunks = np.atleast_2d(np.asarray(chunks, dtype=np.float64))
    conditions = np.atleast_2d(np.asarray(conditions, dtype=np.float64))
    n = chunks.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    check_field_dims(params, chunks.shape[1], conditions.shape[1])
    if gamma is None:
        gamma = rng.uniform(0.0, 1.0, size=n)
    if eps is None:
        eps = rng.standard_normal(chunks.shape)
    gamma = np.broadcast_to(np.asarray(gamma, dtype=np.float64), (n,))
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), chunks.shape)
    x = interpolate(chunks, eps, gamma)
    target = target_field(chunks, eps, gamma, sched)
    out, cache = forward(params, field_input(x, conditions))
    resid = out - target
    loss = float(np.sum(resid * resid) / n)
    if not np.isfinite(loss):
        raise DivergenceError("non-finite GeCO loss")
    grads, _ = backward(params, cache, 2.0 * resid / n)
    return loss, grads


# --- oracles ----------------------------------------------------------------


def _mixture_arrays(modes) -> tuple[np.ndarray, np.ndarray]:
    weights = np.array([float(w) for w, _ in modes])
    mus = np.array([np.asarray(mu, dtype=np.float64) for _, mu in modes])
    if weights.size == 0 or np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("mixture needs non-negative weights with positive total")
    return weights / weights.sum(), mus


def oracle_field(
    modes: Sequence[tuple[float, np.ndarray]],
    x,
    sched: DecaySchedule = DecaySchedule(),
    n_nodes: int = 512,
    return_posterior: bool = False,
):
    """Bayes-optimal field for a point-mass mixture, midpoint rule over gamma in (0, 1).

    ``x`` may be ``(D,)`` or ``(n, D)``. Raises OracleUndefinedError where
    every posterior weight underflows.
    """
    if n_nodes < 1:
        raise ValueError("quadrature needs at least one node")
    w, mus = _mixture_arrays(modes)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    if xs.shape[1] != mus.shape[1]:
        raise DimensionError(f"x has dim {xs.shape[1]}, modes have dim {mus.shape[1]}")
    D = xs.shape[1]
    g = (np.arange(n_nodes) + 0.5) / n_nodes
    one_m = 1.0 - g
    ratio = rescale_ratio(g, sched)  # (G,)
    # squared distance |x - g mu_j|^2 via expansion, shape (n, G, M)
    xx = np.sum(xs * xs, axis=1)[:, None, None]
    xm = (xs @ mus.T)[:, None, :]
    mm = np.sum(mus * mus, axis=1)[None, None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        sq = xx - 2.0 * g[None, :, None] * xm + (g * g)[None, :, None] * mm
        logp = np.log(w)[None, None, :] - D * np.log(one_m)[None, :, None] - 0.5 * sq / (one_m**2)[None, :, None]
        top = np.max(logp, axis=(1, 2), keepdims=True)
    if not np.all(np.isfinite(top)):
        raise OracleUndefinedError("posterior mass underflowed")
    post = np.exp(logp - top)
    post /= post.sum(axis=(1, 2), keepdims=True)
    # sum_j sum_g post * ratio * (x - mu_j)
    scale_j = np.einsum("ngm,g->nm", post, ratio)  # (n, M)
    f = scale_j.sum(axis=1)[:, None] * xs - scale_j @ mus
    if return_posterior:
        mode_post = post.sum(axis=1)
        return (f[0], mode_post[0]) if single else (f, mode_post)
    return f[0] if single else f


def monte_carlo_field(
    modes: Sequence[tuple[float, np.ndarray]],
    x,
    sched: DecaySchedule = DecaySchedule(),
    n_samples: int = 1_000_000,
    rng: np.random.Generator | None = None,
    chunk: int = 250_000,
) -> np.ndarray:
    """Self-normalised importance estimate of the same posterior mean, one point ``x``.

    Draws ``(gamma, j)`` from the prior and weights by the Gaussian likelihood
    of ``x``; shares no code path with the quadrature.
    """
    rng = rng or np.random.default_rng(0)
    w, mus = _mixture_arrays(modes)
    x = np.asarray(x, dtype=np.float64)
    D = x.size
    log_w_chunks, num_chunks = [], []
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        g = rng.uniform(0.0, 1.0, size=m)
        j = rng.choice(len(w), size=m, p=w)
        mu = mus[j]
        diff = x[None, :] - g[:, None] * mu
        one_m = 1.0 - g
        logl = -D * np.log(one_m) - 0.5 * np.sum(diff * diff, axis=1) / one_m**2
        val = (x[None, :] - mu) * (c_of_gamma(g, sched) / one_m)[:, None]
        log_w_chunks.append(logl)
        num_chunks.append(val)
        done += m
    logl = np.concatenate(log_w_chunks)
    vals = np.concatenate(num_chunks)
    top = np.max(logl)
    if not np.isfinite(top):
        raise OracleUndefinedError("all importance weights underflowed")
    iw = np.exp(logl - top)
    return (iw[:, None] * vals).sum(axis=0) / iw.sum()


def cosine_similarity(a, b, eps: float = 1e-12) -> np.ndarray:
    """Row-wise cosine similarity; 0 where either vector vanishes."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    dots = np.sum(a * b, axis=1)
    ok = (na > eps) & (nb > eps)
    out = np.zeros(len(a))
    out[ok] = dots[ok] / (na[ok] * nb[ok])
    return out
