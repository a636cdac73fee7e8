"""Run configuration: a flat TOML file with explicit keys.

Unknown keys and sections are errors, and every validation error names the
offending key and, when it appears in the file, its line number.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from .errors import ConfigError
from .inference import InferConfig
from .ood import SCOPES, FilterConfig
from .schedule import DecaySchedule, StepSizeTable
from .tasks import MixtureTaskSpec, Protocol
from .trainer import HEADS, TrainConfig


@dataclass(frozen=True)
class EvalConfig:
    id_episodes: int = 500
    ood_episodes: int = 500
    rollout_episodes: int = 200
    budgets: tuple[int, ...] = (5, 10, 20, 30)
    ood_budget: int = 10
    baseline_steps: int = 20
    tau_ood: float = 0.5
    plans_per_episode: int = 20
    target_tpr: float = 0.9
    scopes: tuple[str, ...] = ("calls", "refinement")
    oracle_points: int = 500
    oracle_nodes: int = 512
    exec_count: int = 8
    T_total: int = 300
    success_tol: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "budgets", tuple(int(b) for b in self.budgets))
        object.__setattr__(self, "scopes", tuple(self.scopes))
        for name in ("id_episodes", "ood_episodes", "rollout_episodes", "oracle_points"):
            if getattr(self, name) < 0:
                raise ConfigError(f"eval.{name} must be >= 0")
        if any(b < 1 for b in self.budgets) or self.ood_budget < 1 or self.baseline_steps < 1:
            raise ConfigError("budgets and step counts must be >= 1")
        if self.plans_per_episode < 1:
            raise ConfigError("eval.plans_per_episode must be >= 1")
        if not 0.0 <= self.target_tpr <= 1.0:
            raise ConfigError("eval.target_tpr must lie in [0, 1]")
        bad = [s for s in self.scopes if s not in SCOPES]
        if bad or not self.scopes:
            raise ConfigError(f"eval.scopes must be a non-empty subset of {SCOPES}")
        if self.oracle_nodes < 1:
            raise ConfigError("eval.oracle_nodes must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int
    head: str = "geco"
    output_dir: str = "runs"
    task: MixtureTaskSpec = field(default_factory=MixtureTaskSpec)
    n_conditions: int = 4000
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        tr = self.train.to_dict()
        tr.pop("seed")
        tr.pop("head")
        decay = tr.pop("decay")
        tr["decay_scale"], tr["decay_onset"] = decay["scale"], decay["onset"]
        ev = dict(self.eval.__dict__)
        ev["budgets"], ev["scopes"] = list(ev["budgets"]), list(ev["scopes"])
        task = self.task.to_dict()
        task["n_conditions"] = self.n_conditions
        return {
            "seed": self.seed,
            "head": self.head,
            "output_dir": self.output_dir,
            "task": task,
            "train": tr,
            "infer": {
                "K_max": self.infer.K_max,
                "tau_opt": self.infer.tau_opt,
                "step_sizes": [list(r) for r in self.infer.table.to_list()],
            },
            "filter": dict(self.filter.__dict__),
            "eval": ev,
        }

    @property
    def protocol(self) -> Protocol:
        ev = self.eval
        return Protocol(T_a=self.task.T_a, exec_count=ev.exec_count, T_total=ev.T_total, success_tol=ev.success_tol)

    def digest(self) -> str:
        """Hash of everything that affects results (output location and seed excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def run_name(self) -> str:
        return f"{self.head}-{self.digest()[:12]}-s{self.seed}"


# --- parsing ------------------------------------------------------------------

_TOP = {"seed", "head", "output_dir"}
_REQUIRED_TOP = {"seed"}
_SECTIONS = {
    "task": {"d_a", "T_a", "modes", "id_radii", "ood_radii", "detour", "train_radii", "a_max", "bow_radius", "n_conditions"},
    "train": {
        "steps", "batch_size", "hidden_dims", "activation", "lr", "beta1", "beta2", "eps",
        "decay_scale", "decay_onset", "log_every",
    },
    "infer": {"K_max", "tau_opt", "step_sizes"},
    "filter": {"window", "tau_ma", "leak", "tau_lb", "trigger"},
    "eval": set(EvalConfig.__dataclass_fields__),
}
_INT_KEYS = {
    "seed", "d_a", "T_a", "modes", "n_conditions", "steps", "batch_size", "log_every", "K_max", "window",
    "id_episodes", "ood_episodes", "rollout_episodes", "ood_budget", "baseline_steps", "plans_per_episode",
    "oracle_points", "oracle_nodes", "exec_count", "T_total",
}


def _key_lines(text: str) -> dict[str, int]:
    """Map ``section.key`` (or ``key`` at top level) to its 1-based line number."""
    out, section = {}, ""
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        m = re.match(r"^\[\s*([A-Za-z0-9_.-]+)\s*\]$", stripped)
        if m:
            section = m.group(1)
            out.setdefault(section, lineno)
            continue
        m = re.match(r"^([A-Za-z0-9_-]+)\s*=", stripped)
        if m:
            out.setdefault(f"{section}.{m.group(1)}" if section else m.group(1), lineno)
    return out


class _Diag:
    def __init__(self, text: str, source: str):
        self.lines = _key_lines(text)
        self.source = source

    def error(self, key: str, msg: str) -> ConfigError:
        line = self.lines.get(key)
        where = f"{self.source}:{line}" if line else self.source
        return ConfigError(f"{where}: {key}: {msg}")


def _check_types(diag: _Diag, key: str, value: Any):
    name = key.rsplit(".", 1)[-1]
    if name in _INT_KEYS and (isinstance(value, bool) or not isinstance(value, int)):
        raise diag.error(key, f"expected an integer, got {value!r}")


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    diag = _Diag(text, source)
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    for key, value in raw.items():
        if isinstance(value, dict):
            if key not in _SECTIONS:
                raise diag.error(key, f"unknown section (expected one of {sorted(_SECTIONS)})")
            for sub, v in value.items():
                if sub not in _SECTIONS[key]:
                    raise diag.error(f"{key}.{sub}", "unknown key")
                _check_types(diag, f"{key}.{sub}", v)
        elif key not in _TOP:
            raise diag.error(key, "unknown key")
        else:
            _check_types(diag, key, value)
    for key in sorted(_REQUIRED_TOP - raw.keys()):
        raise diag.error(key, "required field is missing")
    sec = {name: dict(raw.get(name, {})) for name in _SECTIONS}

    def build(section: str, fn):
        try:
            return fn()
        except (ConfigError, TypeError, ValueError) as exc:
            first = next(iter(raw.get(section, {})), None)
            raise diag.error(f"{section}.{first}" if first else section, str(exc)) from None

    head = raw.get("head", "geco")
    if head not in HEADS:
        raise diag.error("head", f"must be one of {HEADS}, got {head!r}")
    seed = raw["seed"]
    task_d = sec["task"]
    n_conditions = task_d.pop("n_conditions", 4000)
    if n_conditions < 1:
        raise diag.error("task.n_conditions", "must be >= 1")
    task = build("task", lambda: MixtureTaskSpec(**task_d))
    tr = sec["train"]
    decay = build("train", lambda: DecaySchedule(tr.pop("decay_scale", 4.0), tr.pop("decay_onset", 0.1)))
    train = build("train", lambda: TrainConfig(seed=seed, head=head, decay=decay, **tr))
    inf = sec["infer"]
    table = build("infer", lambda: StepSizeTable(tuple(tuple(r) for r in inf.pop("step_sizes"))) if "step_sizes" in inf else StepSizeTable())
    infer = build("infer", lambda: InferConfig(table=table, **inf))
    filt = build("filter", lambda: FilterConfig(**sec["filter"]))
    ev = build("eval", lambda: EvalConfig(**sec["eval"]))
    build("eval", lambda: Protocol(T_a=task.T_a, exec_count=ev.exec_count, T_total=ev.T_total, success_tol=ev.success_tol))
    out = raw.get("output_dir", "runs")
    if not isinstance(out, str) or not out:
        raise diag.error("output_dir", "must be a non-empty string")
    return RunConfig(seed, head, out, task, n_conditions, train, infer, filt, ev)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


def dump_config(cfg: RunConfig) -> str:
    """Resolved configuration as TOML that ``parse_config`` reads back unchanged."""
    d = cfg.to_dict()
    lines = [f"{k} = {_toml_value(d[k])}" for k in ("seed", "head", "output_dir")]
    for section in _SECTIONS:
        lines.append("")
        lines.append(f"[{section}]")
        for k in sorted(d[section]):
            lines.append(f"{k} = {_toml_value(d[section][k])}")
    return "\n".join(lines) + "\n"


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot encode {v!r}")


def with_overrides(cfg: RunConfig, output_root: Optional[str] = None) -> RunConfig:
    if output_root is None:
        return cfg
    return RunConfig(cfg.seed, cfg.head, output_root, cfg.task, cfg.n_conditions, cfg.train, cfg.infer, cfg.filter, cfg.eval)
