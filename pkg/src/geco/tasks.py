"""Synthetic multimodal reaching task and a point-mass environment.

A condition is the goal relative to the agent (``goal - position``). For a
condition ``s`` the expert emits ``M`` exact chunks, each ``T_a`` planar
displacements summing to ``s``: mode 1 goes straight, the others bow sideways
with a half-sine profile that peaks mid-chunk. The bow peaks at ``detour``
for ``|s| >= bow_radius`` and shrinks in proportion to ``|s|`` inside that
radius, so replanning near the goal keeps shrinking the distance to it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np

from .errors import ConfigError, DimensionError

ID, OOD = "ID", "OOD"


@dataclass(frozen=True)
class MixtureTaskSpec:
    d_a: int = 2
    T_a: int = 16
    modes: int = 2
    id_radii: tuple[float, float] = (0.5, 1.0)
    ood_radii: tuple[float, float] = (1.5, 2.0)
    detour: float = 0.4
    # conditions used for training data; covers the relative goals an ID rollout visits
    train_radii: tuple[float, float] = (0.0, 1.0)
    a_max: float = 0.25
    # below this goal distance the bow shrinks linearly to zero; at the outer
    # training radius the whole training disk sees proportional bows
    bow_radius: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "id_radii", tuple(float(r) for r in self.id_radii))
        object.__setattr__(self, "ood_radii", tuple(float(r) for r in self.ood_radii))
        object.__setattr__(self, "train_radii", tuple(float(r) for r in self.train_radii))
        if self.d_a != 2:
            raise ConfigError("the point-mass task is planar; d_a must be 2")
        if self.T_a < 1 or self.modes < 1:
            raise ConfigError("T_a and modes must be >= 1")
        for name in ("id_radii", "ood_radii", "train_radii"):
            lo, hi = getattr(self, name)
            if not 0.0 <= lo <= hi:
                raise ConfigError(f"{name} must satisfy 0 <= inner <= outer, got {(lo, hi)}")
        if not self.ood_radii[0] > self.id_radii[1]:
            raise ConfigError("OOD annulus must lie strictly outside the ID annulus")
        if self.detour < 0 or self.a_max <= 0:
            raise ConfigError("detour must be >= 0 and a_max > 0")
        if not self.bow_radius > 0:
            raise ConfigError("bow_radius must be > 0")

    @property
    def chunk_dim(self) -> int:
        return self.T_a * self.d_a

    @property
    def cond_dim(self) -> int:
        return 2

    def to_dict(self) -> dict:
        return {
            "d_a": self.d_a,
            "T_a": self.T_a,
            "modes": self.modes,
            "id_radii": list(self.id_radii),
            "ood_radii": list(self.ood_radii),
            "detour": self.detour,
            "train_radii": list(self.train_radii),
            "a_max": self.a_max,
            "bow_radius": self.bow_radius,
        }


def mode_offsets(n_modes: int) -> np.ndarray:
    """Signed bow multipliers: 0, +1, -1, +2, -2, ..."""
    out = [0.0]
    k = 1
    while len(out) < n_modes:
        out.append(float(k))
        if len(out) < n_modes:
            out.append(-float(k))
        k += 1
    return np.array(out[:n_modes])


def expert_waypoints(s: np.ndarray, spec: MixtureTaskSpec) -> np.ndarray:
    """Waypoints ``(M, T_a + 1, 2)`` from the origin to ``s`` for every mode."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (2,):
        raise DimensionError(f"condition must be a 2-vector, got shape {s.shape}")
    r = float(np.hypot(*s))
    normal = np.array([-s[1], s[0]]) / r if r > 0 else np.array([0.0, 1.0])
    t = np.arange(spec.T_a + 1) / spec.T_a
    straight = t[:, None] * s[None, :]
    amplitude = spec.detour * min(r / spec.bow_radius, 1.0)
    bow = np.sin(np.pi * t)[:, None] * normal[None, :] * amplitude
    return np.stack([straight + k * bow for k in mode_offsets(spec.modes)])


def expert_modes(s: np.ndarray, spec: MixtureTaskSpec) -> np.ndarray:
    """Exact expert chunks ``(M, T_a * d_a)`` for condition ``s`` (raw units)."""
    wp = expert_waypoints(s, spec)
    return np.diff(wp, axis=1).reshape(spec.modes, -1)


def chunk_waypoints(chunk: np.ndarray, spec: MixtureTaskSpec) -> np.ndarray:
    steps = np.asarray(chunk, dtype=np.float64).reshape(spec.T_a, spec.d_a)
    return np.vstack([np.zeros(spec.d_a), np.cumsum(steps, axis=0)])


@dataclass
class TrainingSample:
    condition: np.ndarray
    chunk: np.ndarray
    mode_id: int


@dataclass
class Dataset:
    """Struct-of-arrays container for training samples."""

    conditions: np.ndarray  # (N, cond_dim)
    chunks: np.ndarray  # (N, chunk_dim)
    mode_ids: np.ndarray  # (N,), 1-based
    spec: Optional[MixtureTaskSpec] = None

    def __post_init__(self):
        n = len(self.chunks)
        if self.conditions.shape[0] != n or self.mode_ids.shape[0] != n:
            raise DimensionError("dataset arrays disagree in length")

    def __len__(self) -> int:
        return len(self.chunks)

    def __getitem__(self, i: int) -> TrainingSample:
        return TrainingSample(self.conditions[i], self.chunks[i], int(self.mode_ids[i]))

    def __iter__(self) -> Iterator[TrainingSample]:
        return (self[i] for i in range(len(self)))

    @property
    def chunk_dim(self) -> int:
        return self.chunks.shape[1]

    @property
    def cond_dim(self) -> int:
        return self.conditions.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.conditions[idx], self.chunks[idx], self.mode_ids[idx], self.spec)

    @classmethod
    def from_samples(cls, samples, spec=None) -> "Dataset":
        samples = list(samples)
        return cls(
            np.array([s.condition for s in samples], dtype=np.float64).reshape(len(samples), -1),
            np.array([s.chunk for s in samples], dtype=np.float64).reshape(len(samples), -1),
            np.array([s.mode_id for s in samples], dtype=np.int64),
            spec,
        )


def _sample_annulus(radii, rng, n=None) -> np.ndarray:
    lo, hi = radii
    size = () if n is None else (n,)
    r = np.sqrt(rng.uniform(lo * lo, hi * hi, size=size))
    phi = rng.uniform(0.0, 2.0 * np.pi, size=size)
    return np.stack([r * np.cos(phi), r * np.sin(phi)], axis=-1)


def sample_condition(split: str, spec: MixtureTaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform (by area) draw from the split's annulus."""
    if split == ID:
        return _sample_annulus(spec.id_radii, rng)
    if split == OOD:
        return _sample_annulus(spec.ood_radii, rng)
    raise ValueError(f"split must be {ID!r} or {OOD!r}, got {split!r}")


def sample_training_conditions(spec: MixtureTaskSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    # uniform in radius, so short corrective moves near the goal are well covered
    lo, hi = spec.train_radii
    r = rng.uniform(lo, hi, size=n)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
    return np.stack([r * np.cos(phi), r * np.sin(phi)], axis=-1)


def gen_mixture_dataset(spec: MixtureTaskSpec, n_conditions: int, rng: np.random.Generator) -> Dataset:
    """``n_conditions`` training conditions, each with all ``M`` expert chunks."""
    if n_conditions < 1:
        raise ValueError("n_conditions must be >= 1")
    conds = sample_training_conditions(spec, n_conditions, rng)
    chunks = np.concatenate([expert_modes(s, spec) for s in conds])
    conditions = np.repeat(conds, spec.modes, axis=0)
    mode_ids = np.tile(np.arange(1, spec.modes + 1), n_conditions)
    return Dataset(conditions, chunks, mode_ids, spec)


def nearest_mode_distance(chunk, s, spec: MixtureTaskSpec, normalizer=None) -> tuple[float, int]:
    """Distance to the closest exact expert chunk and its 1-based mode id.

    With ``normalizer`` the comparison happens in normalized units and
    ``chunk`` is taken to be normalized already.
    """
    modes = expert_modes(s, spec)
    if normalizer is not None:
        modes = normalizer.normalize(modes)
    d = np.linalg.norm(modes - np.asarray(chunk, dtype=np.float64)[None, :], axis=1)
    j = int(np.argmin(d))
    return float(d[j]), j + 1


# --- environment ------------------------------------------------------------


@dataclass
class PointMassState:
    position: np.ndarray
    goal: np.ndarray
    step_index: int = 0

    def distance(self) -> float:
        return float(np.linalg.norm(self.goal - self.position))


def env_step(state: PointMassState, action, a_max: float = 0.25) -> PointMassState:
    a = np.clip(np.nan_to_num(np.asarray(action, dtype=np.float64), nan=0.0), -a_max, a_max)
    return PointMassState(state.position + a, state.goal.copy(), state.step_index + 1)


@dataclass(frozen=True)
class Protocol:
    T_a: int = 16
    exec_count: int = 8
    T_total: int = 300
    success_tol: float = 0.05

    def __post_init__(self):
        if not 1 <= self.exec_count <= self.T_a:
            raise ConfigError("exec_count must lie in [1, T_a]")
        if self.T_total < 0 or self.success_tol < 0:
            raise ConfigError("T_total and success_tol must be non-negative")


@dataclass
class PlanRecord:
    """One planning call inside an episode."""

    index: int
    t_env: int
    condition: list
    nfe: int
    residuals: list = field(default_factory=list)
    score: Optional[float] = None
    proxy: Optional[float] = None
    stop_reason: str = ""
    flagged: bool = False
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "t_env": self.t_env,
            "condition": list(map(float, self.condition)),
            "nfe": self.nfe,
            "residuals": list(map(float, self.residuals)),
            "score": self.score,
            "proxy": self.proxy,
            "stop_reason": self.stop_reason,
            "flagged": self.flagged,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlanRecord":
        return cls(**d)


@dataclass
class EpisodeRecord:
    episode_id: int
    split: str
    goal: list
    plans: list[PlanRecord] = field(default_factory=list)
    actions: list = field(default_factory=list)
    success: bool = False
    t_report: Optional[int] = None
    T_total: int = 300
    final_distance: float = float("nan")
    steps: int = 0

    def summary_dict(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "split": self.split,
            "goal": list(map(float, self.goal)),
            "success": self.success,
            "t_report": self.t_report,
            "T_total": self.T_total,
            "final_distance": self.final_distance,
            "steps": self.steps,
            "n_plans": len(self.plans),
        }

    def to_dict(self) -> dict:
        d = self.summary_dict()
        d.pop("n_plans")
        d["plans"] = [p.to_dict() for p in self.plans]
        d["actions"] = [list(map(float, a)) for a in self.actions]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeRecord":
        d = dict(d)
        d["plans"] = [PlanRecord.from_dict(p) for p in d["plans"]]
        return cls(**d)


# a policy maps (condition, rng) -> (raw chunk, PlanRecord fields as dict)
Policy = Callable[[np.ndarray, np.random.Generator], tuple[np.ndarray, dict]]
Monitor = Callable[[PlanRecord], bool]


def rollout_episode(
    policy: Policy,
    goal,
    protocol: Protocol,
    rng: np.random.Generator,
    monitor: Optional[Monitor] = None,
    start=None,
    a_max: float = 0.25,
    episode_id: int = 0,
    split: str = ID,
) -> EpisodeRecord:
    """Receding-horizon episode: plan a chunk, execute a prefix, replan.

    A monitor sees each plan before its actions run; if it flags, the episode
    stops with ``t_report`` set to the current environment step. The episode
    also stops on reaching the goal tolerance or the step horizon.
    """
    goal = np.asarray(goal, dtype=np.float64)
    pos = np.zeros(2) if start is None else np.asarray(start, dtype=np.float64)
    state = PointMassState(pos.copy(), goal.copy(), 0)
    rec = EpisodeRecord(episode_id, split, goal.tolist(), T_total=protocol.T_total)
    rec.success = state.distance() <= protocol.success_tol
    while not rec.success and state.step_index < protocol.T_total:
        cond = state.goal - state.position
        plan = PlanRecord(index=len(rec.plans), t_env=state.step_index, condition=cond.tolist(), nfe=0)
        try:
            chunk, info = policy(cond, rng)
        except Exception as exc:  # policy failure ends the episode unsuccessfully
            plan.error = f"{type(exc).__name__}: {exc}"
            rec.plans.append(plan)
            break
        for key, value in info.items():
            setattr(plan, key, value)
        rec.plans.append(plan)
        if monitor is not None and monitor(plan):
            plan.flagged = True
            rec.t_report = state.step_index
            break
        steps = np.asarray(chunk, dtype=np.float64).reshape(-1, 2)[: protocol.exec_count]
        for action in steps:
            if state.step_index >= protocol.T_total:
                break
            state = env_step(state, action, a_max)
            rec.actions.append(np.clip(action, -a_max, a_max).tolist())
            if state.distance() <= protocol.success_tol:
                rec.success = True
                break
        if plan.error is not None:
            break
    rec.final_distance = state.distance()
    rec.steps = state.step_index
    return rec
