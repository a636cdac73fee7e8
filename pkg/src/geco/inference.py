"""Action synthesis by gradient descent on the stationary field, with early exit."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError
from .field import eval_field
from .net import FieldParams
from .rng import make_rng
from .schedule import StepSizeTable, eta_of_step

CONVERGED, BUDGET, ERROR = "converged", "budget", "error"


@dataclass(frozen=True)
class InferConfig:
    K_max: int = 30
    tau_opt: float = 0.4
    table: StepSizeTable = StepSizeTable()

    def __post_init__(self):
        if self.K_max < 1:
            raise ConfigError("K_max must be >= 1")
        if not self.tau_opt >= 0:
            raise ConfigError("tau_opt must be >= 0")


@dataclass
class InferenceTrace:
    residuals: list[float] = field(default_factory=list)
    nfe: int = 0
    updates: int = 0
    stop_reason: str = BUDGET
    final: Optional[np.ndarray] = None
    error: Optional[str] = None

    @property
    def score(self) -> float:
        return self.residuals[-1]

    def to_dict(self) -> dict:
        return {
            "residuals": [float(r) for r in self.residuals],
            "nfe": self.nfe,
            "updates": self.updates,
            "stop_reason": self.stop_reason,
            "final": None if self.final is None else self.final.tolist(),
            "error": self.error,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "InferenceTrace":
        final = d.get("final")
        return cls(
            residuals=list(d["residuals"]),
            nfe=int(d["nfe"]),
            updates=int(d["updates"]),
            stop_reason=d["stop_reason"],
            final=None if final is None else np.asarray(final, dtype=np.float64),
            error=d.get("error"),
        )


def optimize(field_fn: Callable[[np.ndarray], np.ndarray], a0, cfg: InferConfig) -> tuple[np.ndarray, InferenceTrace]:
    """Descend ``field_fn`` from ``a0``; the norm check runs before each update.

    Each loop iteration evaluates the field once. If its norm is below
    ``tau_opt`` the current iterate is returned; otherwise the iterate moves by
    ``-eta_k * v`` with ``eta_k`` taken from the table for the k-th update.
    """
    a = np.array(a0, dtype=np.float64)
    trace = InferenceTrace()
    for k in range(cfg.K_max):
        v = field_fn(a)
        trace.nfe += 1
        if not np.all(np.isfinite(v)):
            trace.stop_reason = ERROR
            trace.error = f"non-finite field output at evaluation {trace.nfe}"
            trace.residuals.append(float("inf"))
            break
        r = float(np.linalg.norm(v))
        trace.residuals.append(r)
        if r < cfg.tau_opt:
            trace.stop_reason = CONVERGED
            break
        a_next = a - eta_of_step(k + 1, cfg.table) * v
        if not np.all(np.isfinite(a_next)):
            trace.stop_reason = ERROR
            trace.error = f"non-finite iterate after update {k + 1}"
            break
        a = a_next
        trace.updates += 1
    trace.final = a
    return a, trace


def geco_infer(
    params: FieldParams,
    s,
    cfg: InferConfig,
    rng: np.random.Generator,
    a0=None,
) -> tuple[np.ndarray, InferenceTrace]:
    """Sample ``a0 ~ N(0, I)`` (unless given) and optimise toward an equilibrium."""
    s = np.asarray(s, dtype=np.float64)
    if a0 is None:
        a0 = rng.standard_normal(params.spec.output_dim)
    return optimize(lambda a: eval_field(params, a, s), a0, cfg)


def batch_infer(
    params: FieldParams,
    conditions: Sequence,
    cfg: InferConfig,
    seed: int,
    keys: Optional[Sequence[int]] = None,
) -> list[tuple[np.ndarray, InferenceTrace]]:
    """Independent ``geco_infer`` per condition; item ``i`` uses stream ``(seed, keys[i])``."""
    keys = list(range(len(conditions))) if keys is None else list(keys)
    if len(keys) != len(conditions):
        raise ValueError("keys and conditions differ in length")
    out = []
    for i, (key, s) in enumerate(zip(keys, conditions)):
        try:
            out.append(geco_infer(params, s, cfg, make_rng(seed, "infer", key)))
        except Exception as exc:
            raise RuntimeError(f"inference failed for item {i}: {exc}") from exc
    return out


def geco_infer_parallel(params: FieldParams, s, cfg: InferConfig, a0: np.ndarray) -> tuple[np.ndarray, list[InferenceTrace]]:
    """Run many initialisations for one condition in lockstep (one batched forward per step).

    Semantically identical to calling ``geco_infer`` per row of ``a0``; each
    run freezes once it converges. Floating results may differ from the
    single-vector path in the last bits because BLAS batches differently.
    """
    a = np.array(a0, dtype=np.float64)
    n = a.shape[0]
    traces = [InferenceTrace() for _ in range(n)]
    active = np.ones(n, dtype=bool)
    s = np.asarray(s, dtype=np.float64)
    for k in range(cfg.K_max):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        v = eval_field(params, a[idx], s)
        norms = np.linalg.norm(v, axis=1)
        eta = eta_of_step(k + 1, cfg.table)
        for row, i in enumerate(idx):
            tr = traces[i]
            tr.nfe += 1
            if not np.all(np.isfinite(v[row])):
                tr.stop_reason, tr.error = ERROR, f"non-finite field output at evaluation {tr.nfe}"
                tr.residuals.append(float("inf"))
                active[i] = False
                continue
            tr.residuals.append(float(norms[row]))
            if norms[row] < cfg.tau_opt:
                tr.stop_reason = CONVERGED
                active[i] = False
                continue
            a[i] = a[i] - eta * v[row]
            tr.updates += 1
    for i, tr in enumerate(traces):
        tr.final = a[i].copy()
    return a, traces
