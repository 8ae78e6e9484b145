"""YAML run configuration validated with pydantic.

Every field has an explicit default; :func:`template` renders them all.
Unknown keys are rejected.  Validation errors are reported with dotted
field paths and, when the document came from a file, the line number.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .distill import LossWeights
from .errors import InvalidConfig
from .pipeline import DeviceSpec, RunConfig
from .schedule import build_schedule
from .search_space import SearchSpace
from .supernet import NetShape


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class SpaceSection(_Strict):
    d_state: list[int] = [2, 4, 6, 8]
    ssd_expand: list[float] = [0.5, 1.0, 2.0, 3.0, 4.0]
    mlp_ratio: list[float] = [0.5, 1.0, 2.0, 3.0, 3.5, 4.0]
    max_depth_per_stage: list[int] = [2, 2, 4, 2]
    d_model: list[int] = [16, 16, 16, 16]
    image_size: int = Field(16, gt=0)
    patch: int = Field(4, gt=0)

    @model_validator(mode="after")
    def _stages_match(self):
        if len(self.d_model) != len(self.max_depth_per_stage):
            raise ValueError("d_model needs one entry per stage")
        return self


class ScheduleSection(_Strict):
    t_adapt: int = Field(50, ge=0)
    t_joint: int = Field(200, ge=0)
    t_final: int = Field(400, ge=0)
    pretrain_t_adapt: int = Field(10, ge=0)
    pretrain_t_joint: int = Field(40, ge=0)
    pretrain_t_final: int = Field(80, ge=0)
    lr: float = Field(0.05, gt=0)
    clip_norm: float | None = Field(1.0, gt=0)
    batch_size: int = Field(16, gt=0)


class LossWeightsSection(_Strict):
    theta: float = Field(0.5, ge=0, le=1)
    alpha1: float = Field(1.0, ge=0)
    alpha2: float = Field(1.0, ge=0)
    freq_radius: float | None = None


class EvolutionSection(_Strict):
    pop_size: int = Field(96, ge=2)
    generations: int = Field(30, ge=1)
    p_c: float = Field(0.95, ge=0, le=1)
    p_m: float = Field(0.1, ge=0, le=1)
    eta_m: float = Field(20.0, ge=0)
    unique_offspring: bool = True

    @field_validator("pop_size")
    @classmethod
    def _even(cls, v):
        if v % 2:
            raise ValueError("pop_size must be even")
        return v


class DevicesSection(_Strict):
    count: int = Field(8, ge=1)
    n_procs: int = Field(4, ge=1)
    models_per_proc: int = Field(3, ge=1)
    cost_a: float = Field(2e-5, ge=0)
    cost_b: float = Field(0.05, ge=0)
    jitter: float = Field(0.1, ge=0, lt=1)
    interference: float = Field(0.0, ge=0)
    warmup_runs: int = Field(5, ge=0)
    timed_runs: int = Field(21, ge=1)
    retries: int = Field(2, ge=0)


class TaskSection(_Strict):
    seed: int = 0
    n_train: int = Field(256, ge=1)
    n_val: int = Field(64, ge=1)


class SeedsSection(_Strict):
    train: int = 0
    search: int = 0
    teacher: int = 0
    latency: int = 0


class OutputSection(_Strict):
    dir: str = "runs/default"


class BenchSection(_Strict):
    n_tasks: int = Field(96, ge=1)
    task_time: float = Field(1.0, gt=0)
    spread: float = Field(0.0, ge=0, lt=1)
    contention: float = Field(0.3, ge=0)
    proc_overhead: float = Field(2.0, ge=0)
    load_per_model: float = Field(0.2, ge=0)
    residency: float = Field(0.05, ge=0)
    sync: float = Field(0.05, ge=0)
    configs: list[tuple[str, int, int]] = [
        ("data_parallel", 1, 1), ("persistent_workers", 1, 1), ("dmmpe", 2, 3),
        ("dmmpe", 3, 4), ("dmmpe", 4, 3), ("dmmpe", 4, 4),
    ]


class ConsistencySection(_Strict):
    strategies: list[str] = ["pst_ddkd", "random", "pool"]
    n_arch: int = Field(16, ge=2)
    seeds: list[int] = [0, 1, 2, 3, 4]
    standalone_steps: int = Field(2000, ge=0)


class EngineConfig(_Strict):
    space: SpaceSection = SpaceSection()
    schedule: ScheduleSection = ScheduleSection()
    loss_weights: LossWeightsSection = LossWeightsSection()
    evolution: EvolutionSection = EvolutionSection()
    devices: DevicesSection = DevicesSection()
    task: TaskSection = TaskSection()
    seeds: SeedsSection = SeedsSection()
    output: OutputSection = OutputSection()
    bench: BenchSection = BenchSection()
    consistency: ConsistencySection = ConsistencySection()

    def to_run_config(self) -> RunConfig:
        sp = self.space
        try:
            space = SearchSpace(tuple(sp.d_state), tuple(sp.ssd_expand), tuple(sp.mlp_ratio),
                                tuple(sp.max_depth_per_stage))
            shape = NetShape(space=space, d_model=tuple(sp.d_model), image_size=sp.image_size, patch=sp.patch)
        except ValueError as exc:
            raise InvalidConfig(f"space: {exc}") from None
        sc = self.schedule
        lw = self.loss_weights
        ev = self.evolution
        dv = self.devices
        return RunConfig(
            shape=shape,
            schedule=build_schedule(space, sc.t_adapt, sc.t_joint, sc.t_final),
            pretrain_schedule=build_schedule(space, sc.pretrain_t_adapt, sc.pretrain_t_joint, sc.pretrain_t_final),
            weights=LossWeights(lw.theta, lw.alpha1, lw.alpha2),
            freq_radius=lw.freq_radius,
            lr=sc.lr, clip_norm=sc.clip_norm, batch_size=sc.batch_size,
            pop_size=ev.pop_size, generations=ev.generations, p_c=ev.p_c, p_m=ev.p_m, eta_m=ev.eta_m,
            unique_offspring=ev.unique_offspring,
            devices=DeviceSpec(dv.count, dv.n_procs, dv.models_per_proc, dv.cost_a, dv.cost_b, dv.jitter,
                               dv.interference, dv.warmup_runs, dv.timed_runs, dv.retries, self.seeds.latency),
            task_seed=self.task.seed, n_train=self.task.n_train, n_val=self.task.n_val,
            train_seed=self.seeds.train, search_seed=self.seeds.search, teacher_seed=self.seeds.teacher,
        )

    def normalized(self) -> dict:
        return self.model_dump(mode="json")

    def digest(self) -> str:
        blob = json.dumps(self.normalized(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def micro_preset() -> dict:
    """Overrides for the exhaustively enumerable two-stage micro space."""
    return {
        "space": {"d_state": [2, 8], "ssd_expand": [1.0, 4.0], "mlp_ratio": [0.5, 4.0],
                  "max_depth_per_stage": [2, 2], "d_model": [16, 16]},
        "schedule": {"t_adapt": 20, "t_joint": 80, "t_final": 200,
                     "pretrain_t_adapt": 5, "pretrain_t_joint": 20, "pretrain_t_final": 40},
        "evolution": {"pop_size": 16, "generations": 30},
    }


def template(preset: str = "default") -> str:
    doc = EngineConfig().normalized()
    if preset == "micro":
        doc = _merge(doc, micro_preset())
    elif preset != "default":
        raise InvalidConfig(f"unknown preset {preset!r}")
    return yaml.safe_dump(doc, sort_keys=False)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


# ---------------------------------------------------------------------------
# loading and diagnostics
# ---------------------------------------------------------------------------


def _line_of(node, path) -> int | None:
    """1-based line of ``path`` inside a composed YAML node tree."""
    line = None
    for key in path:
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if k.value == str(key):
                    line, nxt = k.start_mark.line + 1, v
                    break
            if nxt is None:
                return line
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            line = node.start_mark.line + 1
        else:
            return line
    return line


def format_errors(exc: ValidationError, text: str | None = None, source: str = "<config>") -> str:
    root = None
    if text is not None:
        try:
            root = yaml.compose(text)
        except yaml.YAMLError:
            root = None
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"])
        where = source
        ln = _line_of(root, err["loc"]) if root is not None else None
        if ln is not None:
            where = f"{source}:{ln}"
        lines.append(f"{where}: {path}: {err['msg']}")
    return "\n".join(lines)


def parse_value(raw: str) -> Any:
    return yaml.safe_load(raw)


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.path=value`` overrides (values parsed as YAML scalars)."""
    doc = copy.deepcopy(doc)
    for item in overrides or []:
        if "=" not in item:
            raise InvalidConfig(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        cur = doc
        for p in parts[:-1]:
            cur = cur.setdefault(p, {})
            if not isinstance(cur, dict):
                raise InvalidConfig(f"override {key!r}: {p} is not a section")
        cur[parts[-1]] = parse_value(raw)
    return doc


def load_config(path=None, overrides: list[str] | None = None) -> EngineConfig:
    """Read, override and validate a config.  Raises :class:`InvalidConfig`."""
    text, source = "", "<defaults>"
    doc: dict = {}
    if path is not None:
        source = str(path)
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise InvalidConfig(f"{source}: cannot read config ({exc.strerror})") from None
        try:
            doc = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f"{source}:{mark.line + 1}" if mark is not None else source
            raise InvalidConfig(f"{where}: YAML syntax error: {getattr(exc, 'problem', exc)}") from None
        if not isinstance(doc, dict):
            raise InvalidConfig(f"{source}: top level must be a mapping")
    doc = apply_overrides(doc, overrides or [])
    try:
        return EngineConfig.model_validate(doc)
    except ValidationError as exc:
        raise InvalidConfig(format_errors(exc, text if text else None, source)) from None
