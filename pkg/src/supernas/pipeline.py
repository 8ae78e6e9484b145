"""End-to-end driver: two-stage supernet training, then evolutionary search.

Training iterates a progressive schedule twice.  The pretrain stage fits a
binary label (sign of the teacher's mean prediction) through the pooled
classification head; the finetune stage minimises the full distillation
objective.  Search runs NSGA-II over genotypes with every population
evaluated by :class:`supernas.evalengine.DMMPE` against a frozen snapshot.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import checkpoint
from .distill import DistillLoss, LossWeights, TeacherModel
from .errors import DivergenceError, InvalidConfig
from .evalengine import DMMPE, DevicePool, FaultInjector, LatencyProtocol, SimulatedDevice
from .moea import (
    FitnessMatrix,
    ParetoArchive,
    Population,
    fast_nondominated_sort,
    normalized_hypervolume,
    rank_and_crowding,
    reference_point,
    survival,
)
from .schedule import ProgressiveSchedule, active_sets, build_schedule, flat_schedule, sample_uniform, sampling_sets
from .search_space import (
    Genotype,
    bitflip_mutation_depth,
    decode,
    polynomial_mutation_int,
    random_genotype,
    two_point_crossover_int,
    uniform_crossover_depth,
)
from .supernet import LogisticLoss, NetShape, SupernetParams, TaskLoss, adapt_mask, init_maximal, sgd_step
from .task import Batch, MicroTask, make_micro_task

log = logging.getLogger(__name__)

STAGES = ("pretrain", "finetune")
STRATEGIES = ("pst_ddkd", "random", "pool")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeviceSpec:
    count: int = 8
    n_procs: int = 4
    models_per_proc: int = 3
    cost_a: float = 2e-5
    cost_b: float = 0.05
    jitter: float = 0.1
    interference: float = 0.0
    warmup_runs: int = 5
    timed_runs: int = 21
    retries: int = 2
    seed: int = 0

    def build_pool(self) -> DevicePool:
        devs = [SimulatedDevice(i, self.cost_a, self.cost_b, self.jitter, self.interference, self.seed)
                for i in range(self.count)]
        return DevicePool(devs, self.n_procs, self.models_per_proc)

    def protocol(self) -> LatencyProtocol:
        return LatencyProtocol(self.warmup_runs, self.timed_runs)

    def engine(self, faults: FaultInjector | None = None) -> DMMPE:
        return DMMPE(self.build_pool(), self.protocol(), retries=self.retries, faults=faults)


@dataclass(frozen=True)
class RunConfig:
    shape: NetShape = field(default_factory=NetShape)
    schedule: ProgressiveSchedule | None = None
    pretrain_schedule: ProgressiveSchedule | None = None
    weights: LossWeights = field(default_factory=LossWeights)
    freq_radius: float | None = None
    lr: float = 0.05
    clip_norm: float | None = 1.0
    batch_size: int = 16
    pop_size: int = 96
    generations: int = 30
    p_c: float = 0.95
    p_m: float = 0.1
    eta_m: float = 20.0
    unique_offspring: bool = True
    devices: DeviceSpec = field(default_factory=DeviceSpec)
    task_seed: int = 0
    n_train: int = 256
    n_val: int = 64
    train_seed: int = 0
    search_seed: int = 0
    teacher_seed: int = 0

    def __post_init__(self):
        if self.pop_size < 2 or self.pop_size % 2:
            raise InvalidConfig("pop_size must be even and >= 2")
        if self.generations < 1:
            raise InvalidConfig("generations must be >= 1")
        for name in ("p_c", "p_m"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidConfig(f"{name} must lie in [0, 1]")
        if self.schedule is None:
            object.__setattr__(self, "schedule", build_schedule(self.shape.space))
        if self.pretrain_schedule is None:
            object.__setattr__(self, "pretrain_schedule", build_schedule(self.shape.space, 10, 40, 80))

    @property
    def space(self):
        return self.shape.space

    def make_task(self) -> MicroTask:
        return make_micro_task(self.shape, self.task_seed, self.n_train, self.n_val)


# ---------------------------------------------------------------------------
# supernet training
# ---------------------------------------------------------------------------


def pst_sampler(state, rng):
    return sample_uniform(sampling_sets(state), rng)


def pool_sampler(space, rng, size: int = 8) -> Callable:
    """Uniform draws from a fixed pool of random architectures."""
    pool = [decode(random_genotype(space, rng)) for _ in range(size)]

    def sample(state, rng_):
        return pool[int(rng_.integers(len(pool)))]

    sample.pool = pool
    return sample


def pretrain_labels(task: MicroTask, teacher: TeacherModel | None) -> np.ndarray:
    pred = teacher(task.x_train)[1] if teacher is not None else task.y_train
    return (pred.mean(axis=(1, 2)) > 0).astype(np.float64)


def run_stage(stage: str, params: SupernetParams, schedule: ProgressiveSchedule, task: MicroTask,
              teacher: TeacherModel | None = None, *, rng: np.random.Generator, lr: float = 0.05,
              batch_size: int = 16, weights: LossWeights = LossWeights(), freq_radius=None,
              sampler: Callable | None = None, loss_fn=None, losses: list | None = None,
              last_good: str | None = None, clip_norm: float | None = None) -> SupernetParams:
    """Train ``params`` in place over every iteration of ``schedule``."""
    if stage not in STAGES:
        raise InvalidConfig(f"unknown stage {stage!r}")
    sampler = sampler or pst_sampler
    labels = None
    if loss_fn is None:
        if stage == "finetune":
            if teacher is None:
                raise InvalidConfig("finetune needs a teacher")
            loss_fn = DistillLoss(teacher, weights, freq_radius)
        else:
            loss_fn = LogisticLoss()
    if isinstance(loss_fn, LogisticLoss):
        labels = pretrain_labels(task, teacher)
    for it in range(schedule.total):
        state = active_sets(schedule, it)
        cfg = sampler(state, rng)
        b = task.sample_batch(rng, batch_size)
        batch = Batch(b.x, b.y, labels[b.index] if labels is not None else None, b.index)
        mask = adapt_mask(params, [state.new_dim]) if state.mode == "adapt" else None
        try:
            res = sgd_step(params, cfg, batch, loss_fn, lr, mask,
                           diagnostics={"stage": stage, "iter": it, "last_good": last_good}, clip_norm=clip_norm)
        except DivergenceError:
            log.error("%s diverged at iteration %d; last good checkpoint: %s", stage, it, last_good)
            raise
        if losses is not None:
            losses.append({"stage": stage, "iter": it, "phase": state.phase, "mode": state.mode,
                           "config": cfg.key(), "loss": res.loss, **res.components})
    return params


def strategy_schedules(run: RunConfig, strategy: str):
    """(pretrain schedule, finetune schedule) with equal budgets across strategies."""
    if strategy == "pst_ddkd":
        return run.pretrain_schedule, run.schedule
    if strategy in ("random", "pool"):
        return flat_schedule(run.space, run.pretrain_schedule.total), flat_schedule(run.space, run.schedule.total)
    raise InvalidConfig(f"unknown strategy {strategy!r}")


def train_supernet(run: RunConfig, task: MicroTask | None = None, strategy: str = "pst_ddkd",
                   losses: list | None = None) -> tuple[SupernetParams, dict]:
    """Both training stages for one strategy, fully determined by the run seeds.

    ``pst_ddkd`` uses progressive unlocking and the distillation objective.
    ``random`` samples uniformly from the whole space and ``pool`` from a
    fixed set of architectures; both fit the task loss only.
    """
    task = task or run.make_task()
    teacher = TeacherModel.from_task(task, seed=run.teacher_seed)
    rng = np.random.default_rng([run.train_seed, STRATEGIES.index(strategy)])
    params = init_maximal(run.shape, np.random.default_rng([run.train_seed, 0xB10C]))
    pre, fine = strategy_schedules(run, strategy)
    sampler = pool_sampler(run.space, rng) if strategy == "pool" else pst_sampler
    common = dict(rng=rng, lr=run.lr, batch_size=run.batch_size, sampler=sampler, losses=losses,
                  clip_norm=run.clip_norm)
    run_stage("pretrain", params, pre, task, teacher, **common)
    if strategy == "pst_ddkd":
        run_stage("finetune", params, fine, task, teacher, weights=run.weights, freq_radius=run.freq_radius, **common)
    else:
        run_stage("finetune", params, fine, task, teacher, loss_fn=TaskLoss(), **common)
    info = {"strategy": strategy, "iterations": pre.total + fine.total,
            "schedule": fine.to_dict(), "pretrain_schedule": pre.to_dict(),
            "rng_state": rng.bit_generator.state}
    return params, info


def save_params(path, params: SupernetParams, meta: dict) -> str:
    arrays = {f"param/{k}": v for k, v in params.tensors.items()}
    return checkpoint.save(path, arrays, {"kind": "supernet", "shape": params.shape.to_dict(), **meta})


def load_params(path) -> tuple[SupernetParams, dict]:
    arrays, meta = checkpoint.load(path)
    if meta.get("kind") not in ("supernet", "search"):
        raise InvalidConfig(f"{path} is not a supernet checkpoint")
    shape = NetShape.from_dict(meta["shape"])
    tensors = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    return SupernetParams(shape, tensors), meta


# ---------------------------------------------------------------------------
# variation
# ---------------------------------------------------------------------------


def binary_tournament(rank: np.ndarray, crowd: np.ndarray, rng: np.random.Generator) -> int:
    """Lower rank wins, then larger crowding, then the first draw."""
    i, j = (int(v) for v in rng.integers(len(rank), size=2))
    if rank[i] != rank[j]:
        return i if rank[i] < rank[j] else j
    if crowd[i] != crowd[j]:
        return i if crowd[i] > crowd[j] else j
    return i


def offspring_generation(parents: Population, p_c: float, p_m: float, rng: np.random.Generator,
                         eta_m: float = 20.0, unique: bool = False, max_tries: int = 20) -> Population:
    """Tournament selection, crossover with ``p_c``, mutation with ``p_m``.

    With ``unique`` a child equal to a parent or to an earlier child is
    re-drawn, up to ``max_tries`` times, before being accepted anyway.
    """
    if parents.fitness is None:
        raise ValueError("offspring generation needs parent fitness")
    rank, crowd = rank_and_crowding(parents.fitness)
    space = parents.members[0].space
    p_gene = 1.0 / space.n_int_genes
    p_stage = 1.0 / space.num_stages
    seen = set(parents.members) if unique else set()
    kids: list[Genotype] = []

    def pair():
        a = parents.members[binary_tournament(rank, crowd, rng)]
        b = parents.members[binary_tournament(rank, crowd, rng)]
        if rng.random() < p_c:
            a, b = two_point_crossover_int(a, b, rng)
            a, b = uniform_crossover_depth(a, b, rng)
        out = []
        for child in (a, b):
            if rng.random() < p_m:
                child = polynomial_mutation_int(child, eta_m, p_gene, rng)
                child = bitflip_mutation_depth(child, p_stage, rng)
            out.append(child)
        return out

    tries = 0
    while len(kids) < len(parents):
        for child in pair():
            if unique and child in seen and tries < max_tries * len(parents):
                tries += 1
                continue
            seen.add(child)
            kids.append(child)
    return Population(kids[: len(parents)])


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------


def evaluate_population(members: list, snapshot: SupernetParams, engine: DMMPE, task: MicroTask):
    """Evaluate unique genotypes once and share fitness among duplicates."""
    order: dict = {}
    for g in members:
        order.setdefault(g, len(order))
    unique = list(order)
    fm, tel = engine.evaluate([decode(g) for g in unique], snapshot, task)
    idx = np.array([order[g] for g in members])
    tel["n_unique"] = len(unique)
    return fm.take(idx), tel


@dataclass
class SearchState:
    generation: int
    population: Population
    archive: ParetoArchive
    ref: np.ndarray
    rng_state: dict
    trajectory: list = field(default_factory=list)
    evaluations: int = 0

    def hypervolume(self) -> float:
        return normalized_hypervolume(self.archive.objectives(), self.ref, np.zeros_like(self.ref))


WALL_CLOCK_FIELDS = ("time_s", "telemetry")


def strip_wall_clock(record: dict) -> dict:
    return {k: v for k, v in record.items() if k not in WALL_CLOCK_FIELDS}


def init_search(snapshot: SupernetParams, run: RunConfig, task: MicroTask, engine: DMMPE) -> SearchState:
    rng = np.random.default_rng(run.search_seed)
    members = [random_genotype(run.space, rng) for _ in range(run.pop_size)]
    fm, _ = evaluate_population(members, snapshot, engine, task)
    ok = fm.values[~fm.failed]
    ref = reference_point(ok if len(ok) else fm.values)
    pop = Population(members, fm)
    archive = ParetoArchive()
    archive.update([m for m, f in zip(members, fm.failed) if not f], ok)
    return SearchState(0, pop, archive, ref, rng.bit_generator.state, [], len(members))


def search_step(state: SearchState, snapshot: SupernetParams, run: RunConfig, task: MicroTask,
                engine: DMMPE) -> SearchState:
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state
    t0 = time.perf_counter()
    kids = offspring_generation(state.population, run.p_c, run.p_m, rng, run.eta_m, run.unique_offspring)
    fm, tel = evaluate_population(kids.members, snapshot, engine, task)
    kids.fitness = fm
    pop = survival(state.population.union(kids), run.pop_size)
    state.archive.update([m for m, f in zip(kids.members, fm.failed) if not f], fm.values[~fm.failed])
    gen = state.generation + 1
    front0 = fast_nondominated_sort(pop.fitness.values)[0]
    rec = {
        "generation": gen,
        "population": [g.to_record() for g in pop.members],
        "fitness": pop.fitness.values.tolist(),
        "failed": [int(i) for i in np.flatnonzero(pop.fitness.failed)],
        "front0": front0,
        "hypervolume": state.archive.hypervolume(state.ref),
        "hv_normalized": normalized_hypervolume(state.archive.objectives(), state.ref, np.zeros_like(state.ref)),
        "archive_size": len(state.archive),
        "n_evaluations": len(kids),
        "n_unique": tel["n_unique"],
        "retries": tel["retries"],
        "time_s": time.perf_counter() - t0,
        "telemetry": tel["records"],
    }
    return SearchState(gen, pop, state.archive, state.ref, rng.bit_generator.state,
                       state.trajectory + [rec], state.evaluations + len(kids))


def search(snapshot: SupernetParams, run: RunConfig, task: MicroTask | None = None, engine: DMMPE | None = None,
           *, state: SearchState | None = None, checkpoint_path=None, stop_after: int | None = None,
           on_generation: Callable | None = None) -> tuple[ParetoArchive, list, SearchState]:
    """NSGA-II over ``run.generations`` generations (resumable from ``state``)."""
    task = task or run.make_task()
    engine = engine or run.devices.engine()
    if state is None:
        state = init_search(snapshot, run, task, engine)
        if checkpoint_path is not None:
            save_search_state(checkpoint_path, state, snapshot)
    while state.generation < run.generations:
        if stop_after is not None and state.generation >= stop_after:
            break
        state = search_step(state, snapshot, run, task, engine)
        if checkpoint_path is not None:
            save_search_state(checkpoint_path, state, snapshot)
        if on_generation is not None:
            on_generation(state.trajectory[-1])
        log.info("generation %d: hv=%.5f archive=%d", state.generation,
                 state.trajectory[-1]["hv_normalized"], len(state.archive))
    return state.archive, state.trajectory, state


def _genotype_arrays(members: list, prefix: str) -> dict:
    if not members:
        return {f"{prefix}_ints": np.zeros((0, 0), np.int64), f"{prefix}_bits": np.zeros((0, 0), np.int8)}
    return {
        f"{prefix}_ints": np.array([g.integer_segment for g in members], dtype=np.int64),
        f"{prefix}_bits": np.array([g.depth_segment for g in members], dtype=np.int8),
    }


def save_search_state(path, state: SearchState, snapshot: SupernetParams) -> str:
    arrays = {f"param/{k}": v for k, v in snapshot.tensors.items()}
    arrays.update(_genotype_arrays(state.population.members, "pop"))
    arrays["pop_fitness"] = state.population.fitness.values
    arrays["pop_failed"] = state.population.fitness.failed.astype(np.int8)
    arrays.update(_genotype_arrays(state.archive.genotypes(), "archive"))
    arrays["archive_objs"] = state.archive.objectives()
    arrays["ref"] = state.ref
    meta = {
        "kind": "search", "shape": snapshot.shape.to_dict(), "generation": state.generation,
        "rng_state": state.rng_state, "evaluations": state.evaluations,
        "trajectory": [strip_wall_clock(r) for r in state.trajectory],
    }
    return checkpoint.save(path, arrays, meta)


def load_search_state(path) -> tuple[SearchState, SupernetParams]:
    arrays, meta = checkpoint.load(path)
    if meta.get("kind") != "search":
        raise InvalidConfig(f"{path} is not a search checkpoint")
    snapshot, _ = load_params(path)
    snapshot = snapshot.snapshot()
    space = snapshot.shape.space

    def genos(prefix):
        return [Genotype(space, tuple(i), tuple(b)) for i, b in zip(arrays[f"{prefix}_ints"], arrays[f"{prefix}_bits"])]

    pop = Population(genos("pop"), FitnessMatrix(arrays["pop_fitness"], arrays["pop_failed"].astype(bool)))
    archive = ParetoArchive(list(zip(genos("archive"), list(arrays["archive_objs"]))))
    state = SearchState(meta["generation"], pop, archive, arrays["ref"], meta["rng_state"],
                        list(meta["trajectory"]), meta["evaluations"])
    return state, snapshot


def micro_run(**kw) -> RunConfig:
    """Small run on the exhaustively enumerable micro space."""
    from .search_space import micro_space

    shape = NetShape(space=micro_space(), d_model=(16, 16))
    defaults = dict(shape=shape, pop_size=16, generations=30, schedule=build_schedule(shape.space, 20, 80, 200),
                    pretrain_schedule=build_schedule(shape.space, 5, 20, 40))
    defaults.update(kw)
    return RunConfig(**defaults)


__all__ = [
    "DeviceSpec", "RunConfig", "SearchState", "STRATEGIES", "binary_tournament", "evaluate_population",
    "init_search", "load_params", "load_search_state", "micro_run", "offspring_generation", "run_stage",
    "save_params", "save_search_state", "search", "search_step", "strip_wall_clock", "train_supernet",
]
