"""NSGA-II building blocks for three minimised objectives.

Objectives are ``(err, latency_ms, macs)``.  Fitness matrices are plain
``(N, 3)`` float arrays wrapped in :class:`FitnessMatrix`, which also records
which rows are penalty rows for failed evaluations.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .errors import InsufficientPopulation, InvalidObjective
from .search_space import Genotype, decode

log = logging.getLogger(__name__)

OBJECTIVES = ("err", "latency_ms", "macs")


def _as_objs(F) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    if F.ndim == 1:
        F = F[None, :]
    if np.isnan(F).any():
        raise InvalidObjective("NaN in objective values")
    return F


@dataclass
class FitnessMatrix:
    values: np.ndarray
    failed: np.ndarray = None

    def __post_init__(self):
        self.values = _as_objs(self.values)
        if self.failed is None:
            self.failed = np.zeros(len(self.values), dtype=bool)
        self.failed = np.asarray(self.failed, dtype=bool)

    def __len__(self):
        return len(self.values)

    def take(self, idx) -> "FitnessMatrix":
        idx = np.asarray(idx, dtype=np.int64)
        return FitnessMatrix(self.values[idx], self.failed[idx])

    @staticmethod
    def concat(a: "FitnessMatrix", b: "FitnessMatrix") -> "FitnessMatrix":
        return FitnessMatrix(np.vstack([a.values, b.values]), np.concatenate([a.failed, b.failed]))


@dataclass
class Population:
    members: list
    fitness: FitnessMatrix | None = None

    def __post_init__(self):
        if self.fitness is not None and len(self.fitness) != len(self.members):
            raise ValueError("fitness rows must match population size")

    def __len__(self):
        return len(self.members)

    def union(self, other: "Population") -> "Population":
        return Population(self.members + other.members, FitnessMatrix.concat(self.fitness, other.fitness))


def dominates(a, b) -> bool:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.isnan(a).any() or np.isnan(b).any():
        raise InvalidObjective("NaN in objective vector")
    return bool(np.all(a <= b) and np.any(a < b))


def nondominated_ranks(F) -> np.ndarray:
    return kernels.nondominated_ranks(np.ascontiguousarray(_as_objs(F)))


def fast_nondominated_sort(F) -> list[list[int]]:
    """Fronts as ascending index lists, best front first."""
    if isinstance(F, FitnessMatrix):
        F = F.values
    F = _as_objs(F)
    if len(F) == 0:
        raise ValueError("empty fitness matrix")
    rank = nondominated_ranks(F)
    return [np.flatnonzero(rank == r).tolist() for r in range(int(rank.max()) + 1)]


def crowding_distance(front_objs) -> np.ndarray:
    F = _as_objs(front_objs)
    n, m = F.shape
    dist = np.zeros(n)
    if n <= 2:
        dist[:] = np.inf
        return dist
    for k in range(m):
        order = np.argsort(F[:, k], kind="stable")
        col = F[order, k]
        dist[order[0]] = np.inf
        dist[order[-1]] = np.inf
        span = col[-1] - col[0]
        if span <= 0:
            continue
        dist[order[1:-1]] += (col[2:] - col[:-2]) / span
    return dist


def rank_and_crowding(F) -> tuple[np.ndarray, np.ndarray]:
    F = _as_objs(F.values if isinstance(F, FitnessMatrix) else F)
    rank = nondominated_ranks(F)
    crowd = np.zeros(len(F))
    for r in range(int(rank.max()) + 1):
        idx = np.flatnonzero(rank == r)
        crowd[idx] = crowding_distance(F[idx])
    return rank, crowd


def survival_indices(F, n_survivors: int) -> list[int]:
    F = F.values if isinstance(F, FitnessMatrix) else F
    if n_survivors > len(F):
        raise InsufficientPopulation(f"need {n_survivors} survivors from {len(F)} candidates")
    chosen: list[int] = []
    for front in fast_nondominated_sort(F):
        if len(chosen) + len(front) <= n_survivors:
            chosen.extend(front)
            if len(chosen) == n_survivors:
                break
            continue
        crowd = crowding_distance(np.asarray(F)[front])
        # descending crowding, ties broken by population index
        order = sorted(range(len(front)), key=lambda i: (-crowd[i], front[i]))
        chosen.extend(front[i] for i in order[: n_survivors - len(chosen)])
        break
    return chosen


def survival(union: Population, n_survivors: int) -> Population:
    if union.fitness is None:
        raise ValueError("survival needs a population with fitness")
    idx = survival_indices(union.fitness, n_survivors)
    return Population([union.members[i] for i in idx], union.fitness.take(idx))


# ---------------------------------------------------------------------------
# hypervolume
# ---------------------------------------------------------------------------


def hypervolume_info(points, ref) -> tuple[float, int]:
    """Exact hypervolume and the number of points skipped for not dominating ``ref``."""
    ref = np.asarray(ref, dtype=np.float64)
    P = np.asarray(points, dtype=np.float64).reshape(-1, len(ref))
    if np.isnan(P).any():
        raise InvalidObjective("NaN in hypervolume input")
    ok = np.all(P < ref, axis=1)
    skipped = int((~ok).sum())
    if skipped:
        log.warning("hypervolume: skipped %d point(s) not dominating the reference", skipped)
    P = P[ok]
    if len(P) == 0:
        return 0.0, skipped
    m = len(ref)
    if m == 1:
        return float(ref[0] - P[:, 0].min()), skipped
    if m == 2:
        return kernels._hv2d_np(P, ref), skipped
    if m == 3:
        P = P[np.argsort(P[:, 2], kind="stable")]
        return float(kernels.hv3d_sorted(np.ascontiguousarray(P), ref)), skipped
    raise NotImplementedError("hypervolume supports at most 3 objectives")


def hypervolume(points, ref) -> float:
    return hypervolume_info(points, ref)[0]


def reference_point(F0, margin: float = 1.1) -> np.ndarray:
    """Fixed per-run reference: componentwise worst of generation 0, scaled."""
    return np.max(_as_objs(F0), axis=0) * margin


def normalized_hypervolume(points, ref, ideal) -> float:
    box = float(np.prod(np.asarray(ref, dtype=np.float64) - np.asarray(ideal, dtype=np.float64)))
    if box <= 0:
        return 0.0
    return hypervolume(points, ref) / box


# ---------------------------------------------------------------------------
# archive
# ---------------------------------------------------------------------------


@dataclass
class ParetoArchive:
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def insert(self, genotype: Genotype, objs) -> bool:
        """Insert if not dominated; evict entries the newcomer dominates."""
        v = _as_objs(objs)[0]
        for g, o in self.entries:
            if dominates(o, v) or (g == genotype and np.array_equal(o, v)):
                return False
        self.entries = [(g, o) for g, o in self.entries if not dominates(v, o)]
        self.entries.append((genotype, v))
        return True

    def update(self, members: Sequence[Genotype], F) -> int:
        F = F.values if isinstance(F, FitnessMatrix) else _as_objs(F)
        return sum(self.insert(g, f) for g, f in zip(members, F))

    def objectives(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, 3))
        return np.vstack([o for _, o in self.entries])

    def genotypes(self) -> list:
        return [g for g, _ in self.entries]

    def hypervolume(self, ref) -> float:
        return hypervolume(self.objectives(), ref) if self.entries else 0.0

    def to_records(self) -> list[dict]:
        out = []
        for g, o in self.entries:
            rec = {"genotype": g.to_record(), "config": decode(g).to_dict()}
            rec.update({k: float(v) for k, v in zip(OBJECTIVES, o)})
            out.append(rec)
        return out

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"entries": self.to_records()}, fh, indent=2)

    @classmethod
    def from_records(cls, space, records) -> "ParetoArchive":
        arc = cls()
        for rec in records:
            g = Genotype.from_record(space, rec["genotype"])
            arc.entries.append((g, np.array([rec[k] for k in OBJECTIVES], dtype=np.float64)))
        return arc


def pareto_front(pop: Population) -> ParetoArchive:
    if pop.fitness is None:
        raise ValueError("pareto_front needs fitness")
    front0 = fast_nondominated_sort(pop.fitness.values)[0]
    arc = ParetoArchive()
    for i in front0:
        arc.insert(pop.members[i], pop.fitness.values[i])
    return arc


def write_fitness_csv(path, F, ids=None) -> None:
    F = F.values if isinstance(F, FitnessMatrix) else _as_objs(F)
    rank, crowd = rank_and_crowding(F)
    ids = range(len(F)) if ids is None else ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", *OBJECTIVES, "rank", "crowding"])
        for i, row, r, c in zip(ids, F, rank, crowd):
            w.writerow([i, *(repr(float(x)) for x in row), int(r), repr(float(c))])
