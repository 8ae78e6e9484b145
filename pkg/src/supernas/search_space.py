"""Four-dimensional hybrid search space and its genotype codec.

A genotype has two segments:

* an integer segment of per-stage triples ``(d_state, ssd_expand, mlp_ratio)``
  holding indices into the candidate lists, and
* a binary depth segment with ``max_depth`` bits per stage where the active
  blocks always form a prefix (shallower networks reuse the leading blocks).

Genetic operators are segment specific: two-point crossover and polynomial
mutation on the integers, uniform crossover and bit-flip mutation on depth.
Depth operators act on per-stage depth counts and re-encode them as prefixes
so the prefix rule can never be broken.
"""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import InvalidGenotype, NotInSearchSpace, SpaceMismatch

DIMENSIONS = ("d_state", "ssd_expand", "mlp_ratio")
GENES_PER_STAGE = len(DIMENSIONS)


def _strictly_increasing(values: Sequence[float]) -> bool:
    return all(a < b for a, b in zip(values, values[1:]))


@dataclass(frozen=True)
class SearchSpace:
    d_state_candidates: tuple = (16, 32, 48, 64)
    ssd_expand_candidates: tuple = (0.5, 1.0, 2.0, 3.0, 4.0)
    mlp_ratio_candidates: tuple = (0.5, 1.0, 2.0, 3.0, 3.5, 4.0)
    max_depth_per_stage: tuple = (2, 2, 4, 2)

    def __post_init__(self):
        object.__setattr__(self, "d_state_candidates", tuple(int(v) for v in self.d_state_candidates))
        object.__setattr__(self, "ssd_expand_candidates", tuple(float(v) for v in self.ssd_expand_candidates))
        object.__setattr__(self, "mlp_ratio_candidates", tuple(float(v) for v in self.mlp_ratio_candidates))
        object.__setattr__(self, "max_depth_per_stage", tuple(int(v) for v in self.max_depth_per_stage))
        for name in ("d_state_candidates", "ssd_expand_candidates", "mlp_ratio_candidates"):
            values = getattr(self, name)
            if not values:
                raise ValueError(f"{name} must be non-empty")
            if not _strictly_increasing(values):
                raise ValueError(f"{name} must be strictly increasing")
            if values[0] <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.max_depth_per_stage or min(self.max_depth_per_stage) < 1:
            raise ValueError("max_depth_per_stage entries must be >= 1")

    @property
    def num_stages(self) -> int:
        return len(self.max_depth_per_stage)

    def candidates(self, dim: str) -> tuple:
        return getattr(self, f"{dim}_candidates")

    @property
    def n_int_genes(self) -> int:
        return GENES_PER_STAGE * self.num_stages

    @property
    def n_depth_bits(self) -> int:
        return sum(self.max_depth_per_stage)

    @functools.cached_property
    def _bounds(self) -> tuple:
        per_stage = [len(self.candidates(d)) - 1 for d in DIMENSIONS]
        return tuple(per_stage * self.num_stages)

    @functools.cached_property
    def _offsets(self) -> tuple:
        return (0, *itertools.accumulate(self.max_depth_per_stage))

    @functools.cached_property
    def _segment_depth(self) -> tuple:
        # per stage: valid depth-bit segment -> depth
        return tuple({(1,) * d + (0,) * (m - d): d for d in range(1, m + 1)} for m in self.max_depth_per_stage)

    @functools.cached_property
    def _index(self) -> tuple:
        return tuple({v: i for i, v in enumerate(self.candidates(d))} for d in DIMENSIONS)

    def gene_bounds(self) -> np.ndarray:
        """Upper index bound for every integer gene."""
        return np.array(self._bounds, dtype=np.int64)

    def depth_offsets(self) -> list[int]:
        return list(self._offsets)

    def size(self) -> int:
        per_stage = [
            len(self.d_state_candidates) * len(self.ssd_expand_candidates)
            * len(self.mlp_ratio_candidates) * m
            for m in self.max_depth_per_stage
        ]
        return int(np.prod(per_stage))

    def maximal(self) -> "ArchConfig":
        return ArchConfig(tuple(
            StageConfig(self.d_state_candidates[-1], self.ssd_expand_candidates[-1],
                        self.mlp_ratio_candidates[-1], m)
            for m in self.max_depth_per_stage
        ))

    def minimal(self) -> "ArchConfig":
        return ArchConfig(tuple(
            StageConfig(self.d_state_candidates[0], self.ssd_expand_candidates[0],
                        self.mlp_ratio_candidates[0], 1)
            for _ in self.max_depth_per_stage
        ))

    def to_dict(self) -> dict:
        return {
            "d_state": list(self.d_state_candidates),
            "ssd_expand": list(self.ssd_expand_candidates),
            "mlp_ratio": list(self.mlp_ratio_candidates),
            "max_depth_per_stage": list(self.max_depth_per_stage),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        return cls(
            d_state_candidates=tuple(d["d_state"]),
            ssd_expand_candidates=tuple(d["ssd_expand"]),
            mlp_ratio_candidates=tuple(d["mlp_ratio"]),
            max_depth_per_stage=tuple(d["max_depth_per_stage"]),
        )


def toy_space(max_depth_per_stage=(2, 2, 4, 2)) -> SearchSpace:
    """Desk-scale space: state sizes scaled to a maximum of 8."""
    return SearchSpace(d_state_candidates=(2, 4, 6, 8), max_depth_per_stage=tuple(max_depth_per_stage))


def micro_space() -> SearchSpace:
    """Exhaustively enumerable two-stage space (256 configurations)."""
    return SearchSpace(
        d_state_candidates=(2, 8),
        ssd_expand_candidates=(1.0, 4.0),
        mlp_ratio_candidates=(0.5, 4.0),
        max_depth_per_stage=(2, 2),
    )


@dataclass(frozen=True)
class StageConfig:
    d_state: int
    ssd_expand: float
    mlp_ratio: float
    depth: int


@dataclass(frozen=True)
class ArchConfig:
    stages: tuple

    def key(self) -> str:
        return "|".join(f"{s.d_state},{s.ssd_expand:g},{s.mlp_ratio:g},{s.depth}" for s in self.stages)

    def to_dict(self) -> list[dict]:
        return [
            {"d_state": s.d_state, "ssd_expand": s.ssd_expand, "mlp_ratio": s.mlp_ratio, "depth": s.depth}
            for s in self.stages
        ]

    @classmethod
    def from_dict(cls, stages: list[dict]) -> "ArchConfig":
        return cls(tuple(
            StageConfig(int(s["d_state"]), float(s["ssd_expand"]), float(s["mlp_ratio"]), int(s["depth"]))
            for s in stages
        ))


@dataclass(frozen=True)
class Genotype:
    space: SearchSpace = field(repr=False)
    integer_segment: tuple
    depth_segment: tuple

    def __post_init__(self):
        object.__setattr__(self, "integer_segment", tuple(map(int, self.integer_segment)))
        object.__setattr__(self, "depth_segment", tuple(map(int, self.depth_segment)))

    def depths(self) -> tuple:
        """Per-stage count of leading active bits."""
        offs = self.space._offsets
        out = []
        for s in range(self.space.num_stages):
            d = 0
            for bit in self.depth_segment[offs[s]:offs[s + 1]]:
                if not bit:
                    break
                d += 1
            out.append(d)
        return tuple(out)

    def to_record(self) -> dict:
        return {"ints": list(self.integer_segment), "bits": "".join(map(str, self.depth_segment))}

    @classmethod
    def from_record(cls, space: SearchSpace, rec: dict) -> "Genotype":
        return cls(space, tuple(rec["ints"]), tuple(int(c) for c in rec["bits"]))


def _prefix_bits(depths: Sequence[int], space: SearchSpace) -> tuple:
    bits = []
    for d, m in zip(depths, space.max_depth_per_stage):
        bits.extend((1,) * d + (0,) * (m - d))
    return tuple(bits)


def _from_parts(space: SearchSpace, ints, depths) -> Genotype:
    return Genotype(space, tuple(ints), _prefix_bits(depths, space))


def _valid_depths(g: Genotype, space: SearchSpace) -> tuple | None:
    """Per-stage depths when ``g`` is valid for ``space``, else None."""
    if g.space is not space and g.space != space:
        return None
    ints, bits = g.integer_segment, g.depth_segment
    bounds, offs = space._bounds, space._offsets
    if len(ints) != len(bounds) or len(bits) != offs[-1]:
        return None
    for v, hi in zip(ints, bounds):
        if v < 0 or v > hi:
            return None
    depths = []
    for s, table in enumerate(space._segment_depth):
        d = table.get(bits[offs[s]:offs[s + 1]])
        if d is None:
            return None
        depths.append(d)
    return tuple(depths)


def validate(g: Genotype, space: SearchSpace | None = None) -> bool:
    return _valid_depths(g, g.space if space is None else space) is not None


def decode(g: Genotype, space: SearchSpace | None = None) -> ArchConfig:
    space = g.space if space is None else space
    depths = _valid_depths(g, space)
    if depths is None:
        raise InvalidGenotype(f"genotype not valid for space: {g.to_record()}")
    stages = []
    for s, depth in enumerate(depths):
        i_d, i_e, i_r = g.integer_segment[GENES_PER_STAGE * s:GENES_PER_STAGE * (s + 1)]
        stages.append(StageConfig(
            space.d_state_candidates[i_d],
            space.ssd_expand_candidates[i_e],
            space.mlp_ratio_candidates[i_r],
            depth,
        ))
    return ArchConfig(tuple(stages))


def _index_of(table: dict, v, what: str) -> int:
    try:
        return table[v]
    except (KeyError, TypeError):
        raise NotInSearchSpace(f"{what}={v!r} not in candidates {tuple(table)}") from None


def encode(cfg: ArchConfig, space: SearchSpace) -> Genotype:
    if len(cfg.stages) != space.num_stages:
        raise NotInSearchSpace(f"expected {space.num_stages} stages, got {len(cfg.stages)}")
    t_d, t_e, t_r = space._index
    ints = []
    for s, st in enumerate(cfg.stages):
        ints.append(_index_of(t_d, st.d_state, "d_state"))
        ints.append(_index_of(t_e, st.ssd_expand, "ssd_expand"))
        ints.append(_index_of(t_r, st.mlp_ratio, "mlp_ratio"))
        if not 1 <= st.depth <= space.max_depth_per_stage[s]:
            raise NotInSearchSpace(f"stage {s} depth {st.depth} outside 1..{space.max_depth_per_stage[s]}")
    return _from_parts(space, ints, [st.depth for st in cfg.stages])


def enumerate_configs(space: SearchSpace) -> Iterator[ArchConfig]:
    per_stage = [
        [StageConfig(d, e, r, k)
         for d in space.d_state_candidates
         for e in space.ssd_expand_candidates
         for r in space.mlp_ratio_candidates
         for k in range(1, m + 1)]
        for m in space.max_depth_per_stage
    ]
    for combo in itertools.product(*per_stage):
        yield ArchConfig(tuple(combo))


def random_genotype(space: SearchSpace, rng: np.random.Generator) -> Genotype:
    bounds = space.gene_bounds()
    ints = rng.integers(0, bounds + 1)
    depths = [int(rng.integers(1, m + 1)) for m in space.max_depth_per_stage]
    return _from_parts(space, ints, depths)


def _check_same_space(a: Genotype, b: Genotype):
    if a.space != b.space:
        raise SpaceMismatch("parents belong to different search spaces")


def two_point_crossover_int(a: Genotype, b: Genotype, rng: np.random.Generator, cuts=None):
    """Swap the integer genes between two cut points (any gene boundary)."""
    _check_same_space(a, b)
    n = len(a.integer_segment)
    if cuts is None:
        i, j = sorted(int(c) for c in rng.choice(n + 1, size=2, replace=False))
    else:
        i, j = sorted(cuts)
    ia, ib = list(a.integer_segment), list(b.integer_segment)
    ia[i:j], ib[i:j] = ib[i:j], ia[i:j]
    return (Genotype(a.space, ia, a.depth_segment), Genotype(b.space, ib, b.depth_segment))


def _poly_step(x: int, hi: int, eta: float, u: float) -> int:
    """One polynomial-mutation move on index ``x`` in ``[0, hi]``.

    The continuous perturbation is rounded away from the current value, so
    a fired mutation always moves by at least one index.
    """
    span = float(hi)
    d1 = x / span
    d2 = (hi - x) / span
    mpow = 1.0 / (eta + 1.0)
    if u < 0.5:
        val = 2.0 * u + (1.0 - 2.0 * u) * (1.0 - d1) ** (eta + 1.0)
        dq = val ** mpow - 1.0
    else:
        val = 2.0 * (1.0 - u) + 2.0 * (u - 0.5) * (1.0 - d2) ** (eta + 1.0)
        dq = 1.0 - val ** mpow
    delta = dq * span
    if delta > 0 or (delta == 0 and (x == 0 or (x < hi and u >= 0.5))):
        step = max(1, int(np.ceil(delta)))
    else:
        step = -max(1, int(np.ceil(-delta)))
    return int(min(max(x + step, 0), hi))


def polynomial_mutation_int(g: Genotype, eta_m: float, p_gene: float, rng: np.random.Generator) -> Genotype:
    bounds = g.space.gene_bounds()
    out = list(g.integer_segment)
    fire = rng.random(len(out)) < p_gene
    u = rng.random(len(out))
    for k in np.flatnonzero(fire):
        if bounds[k] == 0:
            continue
        out[k] = _poly_step(out[k], int(bounds[k]), eta_m, float(u[k]))
    return Genotype(g.space, out, g.depth_segment)


def uniform_crossover_depth(a: Genotype, b: Genotype, rng: np.random.Generator):
    """Exchange whole per-stage depth counts with probability 1/2."""
    _check_same_space(a, b)
    da, db = list(a.depths()), list(b.depths())
    swap = rng.random(len(da)) < 0.5
    for s in np.flatnonzero(swap):
        da[s], db[s] = db[s], da[s]
    return (_from_parts(a.space, a.integer_segment, da), _from_parts(b.space, b.integer_segment, db))


def bitflip_mutation_depth(g: Genotype, p_stage: float, rng: np.random.Generator) -> Genotype:
    depths = list(g.depths())
    fire = rng.random(len(depths)) < p_stage
    for s in np.flatnonzero(fire):
        m = g.space.max_depth_per_stage[s]
        if m == 1:
            continue
        alt = [d for d in range(1, m + 1) if d != depths[s]]
        depths[s] = int(alt[rng.integers(len(alt))])
    return _from_parts(g.space, g.integer_segment, depths)
