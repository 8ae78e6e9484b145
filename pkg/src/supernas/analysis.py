"""Post-hoc metrics: rank consistency, NID, hypervolume traces, throughput ablation."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import DivergenceError, InvalidInput, ShapeError
from .evalengine import DMMPE, DevicePool, SimulatedDevice, ThroughputCost, simulate_throughput
from .pipeline import RunConfig, train_supernet
from .schedule import full_sets, sample_uniform
from .supernet import SupernetParams, TaskLoss, init_maximal, predict_error, sgd_step

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# scalar metrics
# ---------------------------------------------------------------------------


def kendall_tau(a: Sequence[float], b: Sequence[float]) -> float:
    """Kendall's tau-b.  Returns NaN when either input is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"need two equal-length 1-d sequences, got {a.shape} and {b.shape}")
    if len(a) < 2:
        raise ShapeError("need at least two observations")
    if np.isnan(a).any() or np.isnan(b).any():
        raise InvalidInput("NaN in rank input")
    iu = np.triu_indices(len(a), k=1)
    sa = np.sign(a[:, None] - a[None, :])[iu]
    sb = np.sign(b[:, None] - b[None, :])[iu]
    n0 = len(sa)
    n1 = int(np.count_nonzero(sa == 0))
    n2 = int(np.count_nonzero(sb == 0))
    denom = np.sqrt(float(n0 - n1) * float(n0 - n2))
    if denom == 0:
        return float("nan")
    return float(np.sum(sa * sb) / denom)


def nid(performance: float, params_millions: float) -> float:
    """Task performance per million parameters."""
    if not params_millions > 0:
        raise InvalidInput("parameter count must be positive")
    return float(performance) / float(params_millions)


def hypervolume_trajectory(trajectory: Sequence[dict], key: str = "hv_normalized") -> list[tuple[int, float]]:
    return [(int(r["generation"]), float(r[key])) for r in trajectory]


def long_format_rows(trajectory: Sequence[dict]) -> list[tuple[int, str, float]]:
    """(generation, metric, value) rows for plotting."""
    rows = []
    for r in trajectory:
        g = int(r["generation"])
        F = np.asarray(r["fitness"], dtype=np.float64)
        ok = np.ones(len(F), dtype=bool)
        ok[list(r.get("failed", []))] = False
        metrics = {
            "hypervolume": r["hypervolume"], "hv_normalized": r["hv_normalized"],
            "archive_size": r["archive_size"], "front0_size": len(r["front0"]), "n_unique": r["n_unique"],
        }
        if ok.any():
            for k, name in enumerate(("err", "latency_ms", "macs")):
                metrics[f"min_{name}"] = float(F[ok, k].min())
                metrics[f"mean_{name}"] = float(F[ok, k].mean())
        if r.get("time_s") is not None:
            metrics["time_s"] = r["time_s"]
        rows.extend((g, k, float(v)) for k, v in metrics.items())
    return rows


def write_long_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["generation", "metric", "value"])
        for g, k, v in rows:
            w.writerow([g, k, repr(v)])


# ---------------------------------------------------------------------------
# ranking consistency
# ---------------------------------------------------------------------------


def sample_architectures(space, n: int, rng: np.random.Generator) -> list:
    """``n`` distinct configurations drawn uniformly from the full space."""
    if n > space.size():
        raise InvalidInput(f"space has only {space.size()} configurations")
    seen, out = set(), []
    while len(out) < n:
        c = sample_uniform(full_sets(space), rng)
        if c.key() not in seen:
            seen.add(c.key())
            out.append(c)
    return out


def standalone_score(cfg, run: RunConfig, task, seed: int, steps: int = 2000) -> float:
    """Validation MSE after training ``cfg`` from scratch for ``steps`` steps."""
    params = init_maximal(run.shape, np.random.default_rng([seed, 0x57A1]))
    rng = np.random.default_rng([seed, 0x57A2])
    loss = TaskLoss()
    for _ in range(steps):
        sgd_step(params, cfg, task.sample_batch(rng, run.batch_size), loss, run.lr, clip_norm=run.clip_norm)
    return predict_error(params, cfg, task.x_val, task.y_val)


@dataclass
class ConsistencyResult:
    taus: dict                      # strategy -> list of per-seed tau
    scatter: list = field(default_factory=list)
    excluded: list = field(default_factory=list)
    seeds: list = field(default_factory=list)

    def summary(self) -> dict:
        out = {}
        for s, t in self.taus.items():
            arr = np.asarray(t, dtype=np.float64)
            out[s] = {"mean": float(np.nanmean(arr)), "std": float(np.nanstd(arr)), "n_seeds": int(len(arr)),
                      "taus": [float(x) for x in arr]}
        return out

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"seeds": self.seeds, "summary": self.summary(), "excluded": self.excluded}, fh, indent=2)

    def scatter_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["strategy", "seed", "arch", "config", "proxy", "standalone"])
            for row in self.scatter:
                w.writerow(row)


def consistency_experiment(strategies: Sequence[str], n_arch: int = 16, seeds: Sequence[int] = range(5),
                           run: RunConfig | None = None, standalone_steps: int = 2000,
                           supernets: dict | None = None, n_workers: int = 1) -> ConsistencyResult:
    """Kendall tau between supernet proxy error and standalone error per strategy.

    For every seed the task, the sampled architectures and the standalone
    runs are shared by all strategies.  ``supernets`` maps a strategy to a
    trained :class:`SupernetParams`; missing strategies are trained here
    with the seed as training seed.
    """
    run = run or RunConfig()
    res = ConsistencyResult({s: [] for s in strategies}, seeds=list(seeds))
    engine = DMMPE(DevicePool([SimulatedDevice(0)], n_procs_per_device=max(1, n_workers), models_per_proc=1))
    for seed in seeds:
        run_s = replace(run, task_seed=seed, train_seed=seed)
        task = run_s.make_task()
        archs = sample_architectures(run.space, n_arch, np.random.default_rng([seed, 0xA7C4]))

        def one(i_cfg):
            i, cfg = i_cfg
            try:
                return standalone_score(cfg, run_s, task, seed * 1000 + i, standalone_steps)
            except DivergenceError as exc:
                return exc

        out = engine.map(one, list(enumerate(archs)), kind="standalone")
        standalone = np.full(n_arch, np.nan)
        for i in range(n_arch):
            v = out.get(i)
            if isinstance(v, float) and np.isfinite(v):
                standalone[i] = v
            else:
                res.excluded.append({"seed": seed, "arch": i, "config": archs[i].key(), "reason": repr(v)})
        keep = np.flatnonzero(np.isfinite(standalone))
        for strat in strategies:
            params = (supernets or {}).get(strat)
            if params is None:
                params, _ = train_supernet(run_s, task, strat)
            proxy = np.array([predict_error(params, c, task.x_val, task.y_val) for c in archs])
            tau = kendall_tau(proxy[keep], standalone[keep]) if len(keep) >= 2 else float("nan")
            res.taus[strat].append(tau)
            for i in range(n_arch):
                res.scatter.append((strat, seed, i, archs[i].key(), float(proxy[i]), float(standalone[i])))
            log.info("seed %d %s: tau=%.4f", seed, strat, tau)
    return res


def self_consistency(params: SupernetParams, archs: Sequence, task) -> float:
    """Tau of a network against itself: both score lists from one supernet."""
    s = [predict_error(params, c, task.x_val, task.y_val) for c in archs]
    return kendall_tau(s, list(s))


# ---------------------------------------------------------------------------
# throughput ablation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Workload:
    n_tasks: int = 96
    n_devices: int = 8
    task_time: float = 1.0
    spread: float = 0.0  # relative uniform spread of task times
    seed: int = 0

    def task_times(self) -> np.ndarray:
        if self.spread == 0:
            return np.full(self.n_tasks, self.task_time)
        rng = np.random.default_rng(self.seed)
        return self.task_time * (1.0 + self.spread * rng.uniform(-1, 1, self.n_tasks))


DEFAULT_ABLATION = (
    ("data_parallel", 1, 1),
    ("persistent_workers", 1, 1),
    ("dmmpe", 2, 3),
    ("dmmpe", 3, 4),
    ("dmmpe", 4, 3),
    ("dmmpe", 4, 4),
)


def throughput_ablation(configs: Sequence[tuple] = DEFAULT_ABLATION, workload: Workload = Workload(),
                        cost: ThroughputCost = ThroughputCost()) -> list[dict]:
    """Simulated time per generation for each (strategy, N_p, B_m), fastest first.

    A sequential row is always included and is the speedup reference.
    """
    tt = workload.task_times()
    seq = simulate_throughput("sequential", tt, cost=cost).makespan
    rows = [{"strategy": "sequential", "N_p": 1, "B_m": 1, "time_per_gen": seq, "speedup": 1.0}]
    for strategy, n_p, b_m in configs:
        if strategy == "sequential":
            continue
        r = simulate_throughput(strategy, tt, workload.n_devices, n_p, b_m, cost)
        rows.append({"strategy": strategy, "N_p": r.n_procs, "B_m": r.models_per_proc,
                     "time_per_gen": r.makespan, "speedup": seq / r.makespan})
    rows.sort(key=lambda r: (r["time_per_gen"], r["strategy"], r["N_p"], r["B_m"]))
    return rows


def write_ablation_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "N_p", "B_m", "time/G", "speedup"])
        for r in rows:
            w.writerow([r["strategy"], r["N_p"], r["B_m"], repr(r["time_per_gen"]), repr(r["speedup"])])
