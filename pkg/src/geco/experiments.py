"""Policies and batch experiments on the point-mass task.

Everything here is deterministic given the seeds passed in: goals come from
``(seed, "goals", split)`` and each episode draws its noise from
``(seed, "episode", split, index)``, so two heads or two budgets evaluated
with the same seed face identical goals and identical noise streams.
"""

from __future__ import annotations

from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .baseline import fm_loss_proxy, rf_sample
from .field import cosine_similarity, eval_field, interpolate, oracle_field
from .inference import InferConfig, geco_infer
from .net import FieldParams
from .ood import (
    DETECTORS,
    FilterConfig,
    ScoredPlan,
    auroc,
    make_monitor,
    operating_point,
    replay_with_monitor,
    select_plans,
    time_saved,
)
from .rng import make_rng
from .schedule import DecaySchedule
from .tasks import ID, OOD, EpisodeRecord, MixtureTaskSpec, Protocol, expert_modes, rollout_episode, sample_condition
from .trainer import Normalizer

SPLIT_CODE = {ID: 0, OOD: 1}


class GecoPolicy:
    def __init__(self, params: FieldParams, normalizer: Normalizer, cfg: InferConfig):
        self.params, self.normalizer, self.cfg = params, normalizer, cfg

    def __call__(self, cond, rng):
        a, trace = geco_infer(self.params, cond, self.cfg, rng)
        info = {
            "nfe": trace.nfe,
            "residuals": list(trace.residuals),
            "score": trace.residuals[-1],
            "stop_reason": trace.stop_reason,
            "error": trace.error,
        }
        return self.normalizer.denormalize(a), info


class RFPolicy:
    def __init__(self, params: FieldParams, normalizer: Normalizer, n_steps: int = 20, proxy: bool = True):
        self.params, self.normalizer, self.n_steps, self.proxy = params, normalizer, n_steps, proxy

    def __call__(self, cond, rng):
        x, nfe = rf_sample(self.params, cond, self.n_steps, rng)
        info = {"nfe": nfe, "stop_reason": "fixed"}
        if self.proxy:
            info["proxy"] = fm_loss_proxy(self.params, cond, x, rng)
        return self.normalizer.denormalize(x), info


class ExpertPolicy:
    """Replays the exact expert chunk of one mode (1-based)."""

    def __init__(self, spec: MixtureTaskSpec, mode: int = 1):
        self.spec, self.mode = spec, mode

    def __call__(self, cond, rng):
        return expert_modes(cond, self.spec)[self.mode - 1], {"nfe": 0, "stop_reason": "expert"}


def episode_goals(spec: MixtureTaskSpec, split: str, n: int, seed: int) -> np.ndarray:
    rng = make_rng(seed, "goals", SPLIT_CODE[split])
    return np.array([sample_condition(split, spec, rng) for _ in range(n)]).reshape(n, 2)


def _run_one(args):
    policy, goal, protocol, seed, split, i, monitor, a_max = args
    rng = make_rng(seed, "episode", SPLIT_CODE[split], i)
    return rollout_episode(policy, goal, protocol, rng, monitor=monitor, a_max=a_max, episode_id=i, split=split)


def run_episodes(
    policy,
    spec: MixtureTaskSpec,
    split: str,
    n: int,
    seed: int,
    protocol: Protocol,
    monitor=None,
    workers: int = 1,
) -> list[EpisodeRecord]:
    goals = episode_goals(spec, split, n, seed)
    jobs = [(policy, goals[i], protocol, seed, split, i, monitor, spec.a_max) for i in range(n)]
    if workers > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_one, jobs, chunksize=max(1, n // (4 * workers))))
    return [_run_one(job) for job in jobs]


def rollout_summary(records: Sequence[EpisodeRecord], **extra) -> dict:
    nfes = [p.nfe for r in records for p in r.plans if p.error is None]
    hist = Counter(nfes)
    out = {
        "episodes": len(records),
        "success_rate": float(np.mean([r.success for r in records])) if records else 0.0,
        "planning_calls": len(nfes),
        "mean_nfe": float(np.mean(nfes)) if nfes else 0.0,
        "median_nfe": float(np.median(nfes)) if nfes else 0.0,
        "nfe_hist": {str(k): hist[k] for k in sorted(hist)},
        "distinct_nfe": len(hist),
        "policy_errors": sum(1 for r in records for p in r.plans if p.error is not None),
    }
    out.update(extra)
    return out


# --- OOD evaluation ---------------------------------------------------------


@dataclass
class DetectorResult:
    method: str
    detector: str
    scope: str
    auroc: float
    threshold: float
    tpr: float
    tnr: float
    time_saved: float
    n_id_plans: int
    n_ood_plans: int
    id_false_alarms: float

    def row(self) -> dict:
        return dict(self.__dict__)


def evaluate_detector(
    id_records: Sequence[EpisodeRecord],
    ood_records: Sequence[EpisodeRecord],
    method: str,
    detector: str,
    cfg: FilterConfig,
    tau_ood: float,
    J: int = 20,
    seed: int = 0,
    target_tpr: float = 0.9,
    scope: str = "calls",
) -> DetectorResult:
    """Replay the online detector over recorded episodes and score planning calls.

    Each episode gets a fresh monitor and is truncated at its first flag (what
    the online monitor would have done). ``min(J, available)`` of the kept
    calls enter the plan-level AUROC and operating point, each scored by the
    detector statistic the monitor held after that call.
    """
    signal = "residuals" if method == "geco" else "proxy"
    rng = make_rng(seed, "plan-select", DETECTORS.index(detector), 0 if method == "geco" else 1)
    scored: list[ScoredPlan] = []
    replayed = {ID: [], OOD: []}
    for label, records in ((ID, id_records), (OOD, ood_records)):
        for rec in records:
            rep, stats = replay_with_monitor(rec, make_monitor(detector, cfg, tau_ood, signal, scope))
            replayed[label].append(rep)
            stat_of = {plan.index: st for plan, st in zip(rep.plans, stats)}
            for plan in select_plans(rep, J, rng):
                if stat_of[plan.index] is not None:
                    scored.append(ScoredPlan(stat_of[plan.index], label, rec.episode_id, plan.index))
    pos = [p.score for p in scored if p.label == OOD]
    neg = [p.score for p in scored if p.label == ID]
    thr, tpr, tnr = operating_point(scored, target_tpr)
    false_alarms = float(np.mean([r.t_report is not None for r in replayed[ID]])) if replayed[ID] else 0.0
    return DetectorResult(
        method, detector, scope, auroc(pos, neg), thr, tpr, tnr, time_saved(replayed[OOD]), len(neg), len(pos), false_alarms
    )


def ood_report(
    geco_id,
    geco_ood,
    rf_id,
    rf_ood,
    cfg: FilterConfig = FilterConfig(),
    tau_ood: float = 0.5,
    J: int = 20,
    seed: int = 0,
    target_tpr: float = 0.9,
    scopes: Sequence[str] = ("calls",),
) -> list[DetectorResult]:
    """One row per (method, scope, detector); refinement scope applies to GeCO only."""
    rows = []
    for method, id_recs, ood_recs in (("geco", geco_id, geco_ood), ("fm_proxy", rf_id, rf_ood)):
        if id_recs is None or ood_recs is None:
            continue
        for scope in scopes:
            if scope == "refinement" and method != "geco":
                continue
            for det in DETECTORS:
                rows.append(evaluate_detector(id_recs, ood_recs, method, det, cfg, tau_ood, J, seed, target_tpr, scope))
    return rows


# --- oracle agreement -------------------------------------------------------


def interpolation_points(spec: MixtureTaskSpec, normalizer: Normalizer, n: int, rng, split: str = ID):
    """Points ``gamma * a + (1 - gamma) * eps`` on lines from noise to expert chunks."""
    out = []
    for _ in range(n):
        s = sample_condition(split, spec, rng)
        modes = normalizer.normalize(expert_modes(s, spec))
        j = rng.integers(len(modes))
        g = rng.uniform()
        eps = rng.standard_normal(modes.shape[1])
        out.append((s, interpolate(modes[j], eps, g), g, modes))
    return out


def oracle_agreement(params, spec, normalizer, sched: DecaySchedule, n_points: int = 500, seed: int = 0, n_nodes=512) -> dict:
    rng = make_rng(seed, "oracle-points")
    cos, rel, skipped = [], [], 0
    for s, x, _, modes in interpolation_points(spec, normalizer, n_points, rng):
        try:
            f_star = oracle_field([(1.0, m) for m in modes], x, sched, n_nodes)
        except ArithmeticError:
            skipped += 1
            continue
        f = eval_field(params, x, s)
        cos.append(float(cosine_similarity(f, f_star)[0]))
        denom = np.linalg.norm(f_star)
        rel.append(float(np.linalg.norm(f - f_star) / denom) if denom > 0 else float("nan"))
    cos_a, rel_a = np.array(cos), np.array(rel)
    return {
        "points": len(cos),
        "skipped": skipped,
        "cosine_median": float(np.median(cos_a)) if cos else 0.0,
        "cosine_q10": float(np.quantile(cos_a, 0.1)) if cos else 0.0,
        "magnitude_rel_error_median": float(np.nanmedian(rel_a)) if cos else float("nan"),
    }
