"""Residual-norm OOD scoring, temporal filters, and detection metrics.

Positives are OOD planning calls, negatives are ID planning calls.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError
from .inference import InferenceTrace
from .tasks import ID, OOD, EpisodeRecord, PlanRecord


@dataclass(frozen=True)
class FilterConfig:
    window: int = 5
    tau_ma: float = 0.6
    leak: float = 0.0
    tau_lb: float = 0.5
    trigger: float = 0.7

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError("moving-average window must be >= 1")
        if not 0.0 <= self.leak <= 1.0:
            raise ConfigError("leak must lie in [0, 1]")
        if not self.trigger > 0:
            raise ConfigError("bucket trigger level must be > 0")


@dataclass
class ScoredPlan:
    score: float
    label: str
    episode_id: int = 0
    plan_index: int = 0


def score_plan(trace) -> float:
    """Residual norm at the last evaluated refinement step."""
    residuals = trace.residuals if isinstance(trace, (InferenceTrace, PlanRecord)) else list(trace)
    if len(residuals) == 0:
        raise ValueError("empty trace")
    return float(residuals[-1])


def is_ood(score: float, tau_ood: float) -> bool:
    if not np.isfinite(tau_ood):
        raise ValueError("tau_ood must be finite")
    return bool(score > tau_ood)


def moving_average(residuals: Sequence[float], window: int) -> np.ndarray:
    """Mean of the last ``min(window, k)`` residuals at each 1-based step k."""
    r = np.asarray(residuals, dtype=np.float64)
    csum = np.concatenate([[0.0], np.cumsum(r)])
    k = np.arange(1, r.size + 1)
    lo = np.maximum(k - window, 0)
    return (csum[k] - csum[lo]) / (k - lo)


def moving_average_flag(residuals: Sequence[float], cfg: FilterConfig = FilterConfig()) -> tuple[bool, Optional[int]]:
    if len(residuals) == 0:
        raise ValueError("empty residual sequence")
    hits = np.flatnonzero(moving_average(residuals, cfg.window) > cfg.tau_ma)
    return (True, int(hits[0]) + 1) if hits.size else (False, None)


def leaky_bucket(residuals: Sequence[float], cfg: FilterConfig = FilterConfig()) -> np.ndarray:
    """Accumulator ``b_k = max(0, (1 - leak) b_{k-1} + (r_k - tau)_+)`` with ``b_0 = 0``."""
    b, out = 0.0, []
    for r in residuals:
        b = max(0.0, (1.0 - cfg.leak) * b + max(float(r) - cfg.tau_lb, 0.0))
        out.append(b)
    return np.array(out)


def leaky_bucket_flag(residuals: Sequence[float], cfg: FilterConfig = FilterConfig()) -> tuple[bool, Optional[int]]:
    if len(residuals) == 0:
        raise ValueError("empty residual sequence")
    hits = np.flatnonzero(leaky_bucket(residuals, cfg) >= cfg.trigger)
    return (True, int(hits[0]) + 1) if hits.size else (False, None)


# --- detectors --------------------------------------------------------------

DETECTORS = ("raw", "moving_average", "leaky_bucket")
SCOPES = ("calls", "refinement")


def filtered_scores(seq: Sequence[float], detector: str, cfg: FilterConfig) -> np.ndarray:
    """Running detector statistic after each element of ``seq``.

    raw: the value itself; moving_average: prefix-window mean; leaky_bucket:
    the accumulator. The flag rule is ``> tau`` for raw and moving average and
    ``>= trigger`` for the bucket.
    """
    if detector == "raw":
        return np.asarray(seq, dtype=np.float64)
    if detector == "moving_average":
        return moving_average(seq, cfg.window)
    if detector == "leaky_bucket":
        return leaky_bucket(seq, cfg)
    raise ValueError(f"unknown detector {detector!r}")


def crosses(stat: float, detector: str, cfg: FilterConfig, tau_ood: float) -> bool:
    if detector == "raw":
        return is_ood(stat, tau_ood)
    if detector == "moving_average":
        return bool(stat > cfg.tau_ma)
    return bool(stat >= cfg.trigger)


def plan_signal(plan: PlanRecord, signal: str) -> Optional[float]:
    if plan.error is not None:
        return None
    if signal == "residuals":
        return None if not plan.residuals else float(plan.residuals[-1])
    return None if plan.proxy is None else float(plan.proxy)


class EpisodeMonitor:
    """Online OOD flag for successive planning calls of one episode.

    With ``scope="calls"`` the detector filters the sequence of per-call
    scores (final residual norm, or the proxy loss) across the episode. With
    ``scope="refinement"`` it filters the refinement-step residuals inside
    each call independently; that scope needs per-step residuals.
    ``stat`` holds the detector statistic of the latest call, for scoring.
    """

    def __init__(self, detector: str, cfg: FilterConfig, tau_ood: float, signal: str = "residuals", scope: str = "calls"):
        if detector not in DETECTORS:
            raise ValueError(f"unknown detector {detector!r}")
        if scope not in SCOPES:
            raise ValueError(f"unknown scope {scope!r}")
        if scope == "refinement" and signal != "residuals":
            raise ValueError("refinement scope needs per-step residuals")
        self.detector, self.cfg, self.tau_ood = detector, cfg, tau_ood
        self.signal, self.scope = signal, scope
        self.history: list[float] = []
        self.stat: Optional[float] = None

    def __call__(self, plan: PlanRecord) -> bool:
        value = plan_signal(plan, self.signal)
        if value is None:
            self.stat = None
            return False
        if self.scope == "refinement":
            stats = filtered_scores(plan.residuals, self.detector, self.cfg)
            # the per-call statistic for scoring: raw keeps the final norm
            self.stat = float(stats[-1]) if self.detector == "raw" else float(np.max(stats))
            return crosses(self.stat, self.detector, self.cfg, self.tau_ood)
        self.history.append(value)
        self.stat = float(filtered_scores(self.history, self.detector, self.cfg)[-1])
        return crosses(self.stat, self.detector, self.cfg, self.tau_ood)


def make_monitor(detector: str, cfg: FilterConfig, tau_ood: float, signal: str = "residuals", scope: str = "calls") -> EpisodeMonitor:
    """Fresh monitor; create one per episode since call-scope monitors keep history."""
    return EpisodeMonitor(detector, cfg, tau_ood, signal, scope)


def replay_with_monitor(record: EpisodeRecord, monitor: EpisodeMonitor) -> tuple[EpisodeRecord, list[Optional[float]]]:
    """Apply an online monitor to a recorded, unmonitored episode.

    A monitor cannot change anything before it fires, so truncating the
    recorded plans at the first flag gives exactly the monitored episode.
    Returns the truncated record and the monitor statistic at each kept call.
    """
    out = copy.deepcopy(record)
    stats: list[Optional[float]] = []
    out.t_report = None
    for i, plan in enumerate(out.plans):
        plan.flagged = monitor(plan)
        stats.append(monitor.stat)
        if plan.flagged:
            out.plans = out.plans[: i + 1]
            out.actions = out.actions[: plan.t_env]
            out.t_report = plan.t_env
            out.success = False
            out.steps = plan.t_env
            break
    return out, stats


def select_plans(record: EpisodeRecord, J: int, rng: np.random.Generator) -> list[PlanRecord]:
    """``min(J, available)`` plans drawn without replacement, kept in call order."""
    plans = [p for p in record.plans if p.error is None]
    if len(plans) <= J:
        return plans
    idx = np.sort(rng.choice(len(plans), size=J, replace=False))
    return [plans[i] for i in idx]


# --- metrics ----------------------------------------------------------------


def auroc(positives: Sequence[float], negatives: Sequence[float]) -> float:
    """Mann-Whitney estimate of P(pos > neg) + 0.5 P(pos == neg)."""
    pos = np.asarray(positives, dtype=np.float64)
    neg = np.asarray(negatives, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auroc needs at least one positive and one negative score")
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    not_above = np.searchsorted(neg_sorted, pos, side="right")
    wins = below.sum() + 0.5 * (not_above - below).sum()
    return float(wins / (pos.size * neg.size))


def rates_at(threshold: float, scores: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """TPR and TNR when flagging ``score >= threshold``."""
    flagged = scores >= threshold
    pos = labels == OOD
    tpr = float(np.mean(flagged[pos]))
    tnr = float(np.mean(~flagged[~pos]))
    return tpr, tnr


def operating_point(scored: Sequence[ScoredPlan], target_tpr: float = 0.9) -> tuple[float, float, float]:
    """Threshold among observed scores whose TPR is closest to ``target_tpr``.

    Flags are ``score >= threshold``; ties in |TPR - target| go to the higher
    TNR, then to the higher threshold.
    """
    scores = np.array([p.score for p in scored], dtype=np.float64)
    labels = np.array([p.label for p in scored])
    if not (np.any(labels == OOD) and np.any(labels == ID)):
        raise ValueError("operating point needs both ID and OOD plans")
    pos_sorted = np.sort(scores[labels == OOD])
    neg_sorted = np.sort(scores[labels == ID])
    cands = np.unique(scores)
    tpr = 1.0 - np.searchsorted(pos_sorted, cands, side="left") / pos_sorted.size
    tnr = np.searchsorted(neg_sorted, cands, side="left") / neg_sorted.size
    gap = np.abs(tpr - target_tpr)
    # lexicographic: smallest gap, then largest tnr, then largest threshold
    order = np.lexsort((-cands, -tnr, gap))
    best = order[0]
    return float(cands[best]), float(tpr[best]), float(tnr[best])


def time_saved(records: Sequence[EpisodeRecord]) -> float:
    """Mean of ``1 - t_report / T_total`` over the given (OOD) episodes; unflagged count 0."""
    if len(records) == 0:
        return 0.0
    vals = []
    for rec in records:
        if rec.T_total <= 0:
            raise ValueError("T_total must be positive")
        vals.append(0.0 if rec.t_report is None else 1.0 - rec.t_report / rec.T_total)
    return float(np.mean(vals))
