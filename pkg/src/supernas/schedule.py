"""Progressive unlocking schedule for supernet training.

Phase 0 trains only the maximal configuration.  Each later phase widens the
active candidate set of one dimension (first to its upper half, then to the
full set), in the order d_state, mlp_ratio, ssd_expand, depth.  Every phase
runs ``t_adapt`` adaptation iterations, where only the tensors of the newly
unlocked dimension are trained, followed by ``t_joint`` joint iterations with
balanced sampling over everything active.  A final phase of ``t_final``
iterations trains the full space jointly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .search_space import ArchConfig, SearchSpace, StageConfig

UNLOCK_ORDER = ("d_state", "mlp_ratio", "ssd_expand", "depth")


@dataclass(frozen=True)
class ActiveSets:
    d_state: tuple
    ssd_expand: tuple
    mlp_ratio: tuple
    depth: tuple  # per stage: tuple of allowed depths

    def issubset(self, other: "ActiveSets") -> bool:
        return (
            set(self.d_state) <= set(other.d_state)
            and set(self.ssd_expand) <= set(other.ssd_expand)
            and set(self.mlp_ratio) <= set(other.mlp_ratio)
            and all(set(a) <= set(b) for a, b in zip(self.depth, other.depth))
        )

    def replace(self, **kw) -> "ActiveSets":
        d = {k: getattr(self, k) for k in ("d_state", "ssd_expand", "mlp_ratio", "depth")}
        d.update(kw)
        return ActiveSets(**d)

    def to_dict(self) -> dict:
        return {"d_state": list(self.d_state), "ssd_expand": list(self.ssd_expand),
                "mlp_ratio": list(self.mlp_ratio), "depth": [list(d) for d in self.depth]}

    @classmethod
    def from_dict(cls, d: dict) -> "ActiveSets":
        return cls(tuple(d["d_state"]), tuple(d["ssd_expand"]), tuple(d["mlp_ratio"]),
                   tuple(tuple(x) for x in d["depth"]))


def maximal_sets(space: SearchSpace) -> ActiveSets:
    return ActiveSets(
        (space.d_state_candidates[-1],), (space.ssd_expand_candidates[-1],),
        (space.mlp_ratio_candidates[-1],), tuple((m,) for m in space.max_depth_per_stage),
    )


def full_sets(space: SearchSpace) -> ActiveSets:
    return ActiveSets(
        space.d_state_candidates, space.ssd_expand_candidates, space.mlp_ratio_candidates,
        tuple(tuple(range(1, m + 1)) for m in space.max_depth_per_stage),
    )


@dataclass(frozen=True)
class Phase:
    pid: int
    active: ActiveSets
    t_adapt: int
    t_joint: int
    new_dim: str | None = None
    new_values: tuple = ()

    @property
    def length(self) -> int:
        return self.t_adapt + self.t_joint


@dataclass(frozen=True)
class ProgressiveSchedule:
    phases: tuple
    t_final: int
    final_sets: ActiveSets

    @property
    def total(self) -> int:
        return sum(p.length for p in self.phases) + self.t_final

    def to_dict(self) -> dict:
        return {
            "phases": [
                {"pid": p.pid, "active": p.active.to_dict(), "t_adapt": p.t_adapt, "t_joint": p.t_joint,
                 "new_dim": p.new_dim, "new_values": list(p.new_values)}
                for p in self.phases
            ],
            "t_final": self.t_final,
            "final_sets": self.final_sets.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProgressiveSchedule":
        phases = tuple(
            Phase(p["pid"], ActiveSets.from_dict(p["active"]), p["t_adapt"], p["t_joint"], p["new_dim"],
                  tuple(p["new_values"]))
            for p in d["phases"]
        )
        return cls(phases, d["t_final"], ActiveSets.from_dict(d["final_sets"]))


def build_schedule(space: SearchSpace, t_adapt: int = 50, t_joint: int = 200, t_final: int = 400) -> ProgressiveSchedule:
    current = maximal_sets(space)
    phases = [Phase(0, current, 0, t_joint)]

    def push(new_sets, dim, new_values):
        phases.append(Phase(len(phases), new_sets, t_adapt, t_joint, dim, tuple(new_values)))

    for dim in UNLOCK_ORDER[:3]:
        cands = space.candidates(dim)
        upper = cands[len(cands) // 2:]
        have = getattr(current, dim)
        if 1 < len(upper) < len(cands):
            added = tuple(v for v in upper if v not in have)
            current = current.replace(**{dim: upper})
            push(current, dim, added)
            have = upper
        if len(cands) > len(have):
            added = tuple(v for v in cands if v not in have)
            current = current.replace(**{dim: cands})
            push(current, dim, added)
    if any(m > 1 for m in space.max_depth_per_stage):
        depth = tuple(tuple(range(1, m + 1)) for m in space.max_depth_per_stage)
        added = tuple(sorted({d for m in space.max_depth_per_stage for d in range(1, m)}))
        current = current.replace(depth=depth)
        push(current, "depth", added)
    return ProgressiveSchedule(tuple(phases), t_final, current)


def flat_schedule(space: SearchSpace, iters: int) -> ProgressiveSchedule:
    """Full space from the first iteration (no progressive unlocking)."""
    return ProgressiveSchedule((Phase(0, full_sets(space), 0, iters),), 0, full_sets(space))


@dataclass(frozen=True)
class ScheduleState:
    phase: int
    active: ActiveSets
    mode: str  # "adapt", "joint" or "final"
    new_dim: str | None = None
    new_values: tuple = ()


def active_sets(schedule: ProgressiveSchedule, global_iter: int) -> ScheduleState:
    if global_iter < 0:
        raise ValueError("global_iter must be >= 0")
    start = 0
    for p in schedule.phases:
        if global_iter < start + p.length:
            mode = "adapt" if global_iter < start + p.t_adapt else "joint"
            return ScheduleState(p.pid, p.active, mode, p.new_dim, p.new_values)
        start += p.length
    return ScheduleState(len(schedule.phases), schedule.final_sets, "final")


def sampling_sets(state: ScheduleState) -> ActiveSets:
    """Sets to draw from at this iteration.

    In adaptation mode the unlocked dimension is drawn only from its newly
    added values; the other dimensions use the whole active set.
    """
    if state.mode != "adapt" or not state.new_dim:
        return state.active
    if state.new_dim == "depth":
        depth = tuple(tuple(d for d in ds if d in state.new_values) or ds for ds in state.active.depth)
        return state.active.replace(depth=depth)
    return state.active.replace(**{state.new_dim: state.new_values})


def sample_uniform(active: ActiveSets, rng: np.random.Generator) -> ArchConfig:
    stages = []
    for depths in active.depth:
        stages.append(StageConfig(
            int(active.d_state[rng.integers(len(active.d_state))]),
            float(active.ssd_expand[rng.integers(len(active.ssd_expand))]),
            float(active.mlp_ratio[rng.integers(len(active.mlp_ratio))]),
            int(depths[rng.integers(len(depths))]),
        ))
    return ArchConfig(tuple(stages))
