"""Multi-device, multi-process, multi-model evaluation engine.

Three tiers: the master splits a population into model pools of at most
``B_m`` configurations, puts them on a shared bounded queue, and
``W = devices * N_p`` worker threads pull pools as they become free.  Each
worker is pinned to one device.  Accuracy tasks share their device.  Latency
tasks take an exclusive FIFO lease so that no other work runs on the device
while it is timed.

Devices are adapters.  :class:`SimulatedDevice` derives timings from an
affine cost model in MACs with seeded jitter and an interference term that
only appears when other tasks share the device, so the effect of the lease
is observable.  :class:`WallClockDevice` times the real numpy forward.

Throughput studies use a separate discrete-event simulation
(:func:`simulate_throughput`) so that ablation tables are deterministic.
"""

from __future__ import annotations

import collections
import heapq
import logging
import threading
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import IncompleteEvaluation, InvalidConfig, IsolationViolation, MeasurementError
from .moea import FitnessMatrix
from .search_space import ArchConfig
from .supernet import NetShape, SupernetParams, forward, predict_error

log = logging.getLogger(__name__)

# objective vector given to failed evaluations; dominated by every real vector
PENALTY = 1e30


# ---------------------------------------------------------------------------
# MAC counting
# ---------------------------------------------------------------------------


def linear_macs(n_in: int, n_out: int, positions: int) -> int:
    return n_in * n_out * positions


def block_macs(shape: NetShape, stage: int, d_state: int, ssd_expand: float, mlp_ratio: float) -> int:
    """MACs of one active block for a single image."""
    P = shape.n_tokens
    D = shape.d_model[stage]
    E, H = shape.widths(stage, ssd_expand, mlp_ratio)
    n = d_state
    return (
        linear_macs(D, E, P)          # content projection
        + linear_macs(E, n, P)        # state write
        + (P - 1) * n * n             # state update (the first step has no history)
        + linear_macs(n, D, P)        # state read
        + 2 * linear_macs(D, H, P)    # MLP
    )


def count_macs(cfg: ArchConfig, shape: NetShape, batch: int = 1) -> int:
    """Closed-form multiply-accumulate count of one forward pass."""
    P = shape.n_tokens
    dm = shape.d_model
    total = linear_macs(shape.patch_px, dm[0], P)
    for s, st in enumerate(cfg.stages):
        if s > 0 and dm[s - 1] != dm[s]:
            total += linear_macs(dm[s - 1], dm[s], P)
        total += st.depth * block_macs(shape, s, st.d_state, st.ssd_expand, st.mlp_ratio)
    dL = dm[-1]
    total += 4 * linear_macs(dL, dL, P) + 2 * P * P * dL  # attention
    total += linear_macs(dL, shape.patch_px, P)           # head
    return int(total * batch)


def counted_macs(params: SupernetParams, cfg: ArchConfig, batch: int = 1) -> int:
    """MACs observed by instrumenting every multiplication of a real forward."""
    counter = [0]
    x = np.zeros((batch, params.shape.image_size, params.shape.image_size))
    forward(params, cfg, x, counter=counter, keep_cache=False)
    return counter[0]


# ---------------------------------------------------------------------------
# devices, leases
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LatencyProtocol:
    warmup_runs: int = 5
    timed_runs: int = 21
    batch_size: int = 1

    def __post_init__(self):
        if self.warmup_runs < 0 or self.timed_runs < 1:
            raise InvalidConfig("need warmup_runs >= 0 and timed_runs >= 1")
        if self.batch_size != 1:
            raise InvalidConfig("latency is measured at batch size 1")


@dataclass
class LeaseRecord:
    device: int
    owner: str
    start_ns: int
    end_ns: int


class Lease:
    """Exclusive, non-reentrant hold on one device."""

    def __init__(self, device):
        self.device = device
        self.owner = None
        self.held = False

    def check(self, device) -> None:
        if not self.held or self.device is not device or self.owner != threading.get_ident():
            raise IsolationViolation(f"no exclusive lease held on device {device.device_id}")


class DeviceBase:
    """Occupancy bookkeeping shared by all adapters.

    ``shared()`` marks a task that may run alongside others; ``lease()``
    waits, in arrival order, until the device is empty and then keeps it
    empty until released.  Shared entrants queue behind pending leases so
    latency work cannot starve.
    """

    def __init__(self, device_id: int):
        self.device_id = device_id
        self._cv = threading.Condition()
        self._occupancy = 0
        self._leased = False
        self._tickets: collections.deque = collections.deque()
        self._next_ticket = 0
        self.lease_log: list[LeaseRecord] = []

    @property
    def occupancy(self) -> int:
        return self._occupancy

    def _take_ticket(self) -> int:
        t = self._next_ticket
        self._next_ticket += 1
        self._tickets.append(t)
        return t

    def shared(self):
        dev = self

        class _Shared:
            def __enter__(self_inner):
                with dev._cv:
                    t = dev._take_ticket()
                    dev._cv.wait_for(lambda: dev._tickets[0] == t and not dev._leased)
                    dev._tickets.popleft()
                    dev._occupancy += 1
                    dev._cv.notify_all()
                return self_inner

            def __exit__(self_inner, *exc):
                with dev._cv:
                    dev._occupancy -= 1
                    dev._cv.notify_all()
                return False

        return _Shared()

    def lease(self, owner: str = ""):
        dev = self

        class _Exclusive:
            def __enter__(self_inner):
                with dev._cv:
                    t = dev._take_ticket()
                    dev._cv.wait_for(lambda: dev._tickets[0] == t and not dev._leased and dev._occupancy == 0)
                    dev._tickets.popleft()
                    dev._leased = True
                    dev._cv.notify_all()
                self_inner.lease = Lease(dev)
                self_inner.lease.owner = threading.get_ident()
                self_inner.lease.held = True
                self_inner.start = time.perf_counter_ns()
                return self_inner.lease

            def __exit__(self_inner, *exc):
                end = time.perf_counter_ns()
                self_inner.lease.held = False
                with dev._cv:
                    dev.lease_log.append(LeaseRecord(dev.device_id, owner, self_inner.start, end))
                    dev._leased = False
                    dev._cv.notify_all()
                return False

        return _Exclusive()

    def timed_run(self, snapshot: SupernetParams, cfg: ArchConfig, run: int, exclusive: bool) -> float:
        raise NotImplementedError


class SimulatedDevice(DeviceBase):
    """Deterministic cost model ``a * macs + b`` (ms) with seeded jitter.

    The jitter stream is seeded by the device seed and the configuration, so
    a configuration's measured latency does not depend on which worker or
    device measured it.  ``interference`` adds a relative slowdown per
    co-resident task; it is zero whenever the caller holds the lease.
    """

    def __init__(self, device_id: int, a: float = 2e-5, b: float = 0.05, jitter: float = 0.0,
                 interference: float = 0.0, seed: int = 0, time_scale: float = 0.0):
        super().__init__(device_id)
        self.a = a
        self.b = b
        self.jitter = jitter
        self.interference = interference
        self.seed = seed
        self.time_scale = time_scale
        self._macs_cache: dict = {}
        self._noise_cache: dict = {}

    def true_cost(self, snapshot_or_shape, cfg: ArchConfig) -> float:
        shape = snapshot_or_shape.shape if isinstance(snapshot_or_shape, SupernetParams) else snapshot_or_shape
        key = cfg.key()
        if key not in self._macs_cache:
            self._macs_cache[key] = count_macs(cfg, shape)
        return self.a * self._macs_cache[key] + self.b

    def _noise(self, cfg: ArchConfig, n: int) -> np.ndarray:
        key = cfg.key()
        z = self._noise_cache.get(key)
        if z is None or len(z) < n:
            rng = np.random.default_rng([self.seed, zlib.crc32(key.encode())])
            z = rng.uniform(-1.0, 1.0, size=max(n, 32))
            self._noise_cache[key] = z
        return z

    def timed_run(self, snapshot, cfg, run, exclusive):
        base = self.true_cost(snapshot, cfg)
        t = base * (1.0 + self.jitter * self._noise(cfg, run + 1)[run])
        if not exclusive:
            t *= 1.0 + self.interference * max(self._occupancy - 1, 0)
        if self.time_scale:
            time.sleep(t * 1e-3 * self.time_scale)
        return t


class WallClockDevice(DeviceBase):
    """Times the real forward pass on the host."""

    def timed_run(self, snapshot, cfg, run, exclusive):
        x = np.zeros((1, snapshot.shape.image_size, snapshot.shape.image_size))
        t0 = time.perf_counter()
        forward(snapshot, cfg, x, keep_cache=False)
        return (time.perf_counter() - t0) * 1e3


@dataclass
class DevicePool:
    devices: list
    n_procs_per_device: int = 4
    models_per_proc: int = 3

    def __post_init__(self):
        if not self.devices:
            raise InvalidConfig("device pool needs at least one device")
        if self.n_procs_per_device < 1 or self.models_per_proc < 1:
            raise InvalidConfig("N_p and B_m must be >= 1")

    @property
    def n_workers(self) -> int:
        return len(self.devices) * self.n_procs_per_device

    @classmethod
    def simulated(cls, n_devices: int = 8, n_procs: int = 4, models_per_proc: int = 3, **device_kw) -> "DevicePool":
        return cls([SimulatedDevice(i, **device_kw) for i in range(n_devices)], n_procs, models_per_proc)


def measure_latency(cfg: ArchConfig, snapshot: SupernetParams, protocol: LatencyProtocol, lease: Lease) -> float:
    """Median batch-1 latency in ms over the timed runs, after warmup."""
    device = lease.device
    lease.check(device)
    for r in range(protocol.warmup_runs):
        device.timed_run(snapshot, cfg, r, True)
    times = np.empty(protocol.timed_runs)
    for r in range(protocol.timed_runs):
        lease.check(device)
        times[r] = device.timed_run(snapshot, cfg, protocol.warmup_runs + r, True)
    if not np.all(np.isfinite(times)):
        raise MeasurementError(f"non-finite timing for {cfg.key()}")
    return float(np.median(times))


# ---------------------------------------------------------------------------
# pools, tasks, results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelPool:
    pid: int
    indices: tuple
    configs: tuple

    def __post_init__(self):
        if not self.indices:
            raise InvalidConfig("empty model pool")
        if len(set(self.indices)) != len(self.indices):
            raise InvalidConfig("duplicate index in model pool")


def partition_pools(configs: Sequence[ArchConfig], b_m: int) -> list[ModelPool]:
    if b_m < 1:
        raise InvalidConfig("models per process must be >= 1")
    if not configs:
        raise InvalidConfig("nothing to partition")
    return [
        ModelPool(k, tuple(range(i, min(i + b_m, len(configs)))), tuple(configs[i:i + b_m]))
        for k, i in enumerate(range(0, len(configs), b_m))
    ]


@dataclass(frozen=True)
class EvalTask:
    task_id: int
    kind: str  # "accuracy" or "latency"
    pool: ModelPool


class TransientFault(RuntimeError):
    pass


class FaultInjector:
    """Raise :class:`TransientFault` on chosen ``(task_id, attempt)`` pairs."""

    def __init__(self, plan: dict | None = None):
        self.plan = dict(plan or {})  # task_id -> number of attempts that fail
        self.fired: list = []
        self._lock = threading.Lock()

    def __call__(self, task: EvalTask, attempt: int) -> None:
        with self._lock:
            if attempt < self.plan.get(task.task_id, 0):
                self.fired.append((task.task_id, attempt))
                raise TransientFault(f"injected fault on task {task.task_id} attempt {attempt}")


class EvalMap(dict):
    """index -> value, with per-index failures and task telemetry."""

    def __init__(self):
        super().__init__()
        self.failures: dict = {}
        self.records: list = []
        self.retries = 0
        self.dispatched = 0


class TaskQueue:
    """Bounded FIFO for the master; retries skip the bound so workers never block on it.

    ``get`` returns ``None`` once the queue is closed and drained.
    """

    def __init__(self, maxsize: int):
        self.maxsize = maxsize
        self._items: collections.deque = collections.deque()
        self._retries: collections.deque = collections.deque()
        self._cv = threading.Condition()
        self._closed = False

    def put(self, item) -> None:
        with self._cv:
            self._cv.wait_for(lambda: len(self._items) < self.maxsize or self._closed)
            self._items.append(item)
            self._cv.notify_all()

    def put_retry(self, item) -> None:
        with self._cv:
            self._retries.append(item)
            self._cv.notify_all()

    def get(self):
        with self._cv:
            self._cv.wait_for(lambda: self._retries or self._items or self._closed)
            if self._retries:
                item = self._retries.popleft()
            elif self._items:
                item = self._items.popleft()
            else:
                return None
            self._cv.notify_all()
            return item

    def close(self) -> None:
        with self._cv:
            self._closed = True
            self._cv.notify_all()


class DMMPE:
    """Master/worker evaluation over a :class:`DevicePool`."""

    def __init__(self, pool: DevicePool, protocol: LatencyProtocol = LatencyProtocol(), retries: int = 2,
                 backoff_s: float = 1e-3, queue_size: int | None = None, faults: FaultInjector | None = None,
                 interleave_seed: int | None = None):
        self.pool = pool
        self.protocol = protocol
        self.retries = retries
        self.backoff_s = backoff_s
        self.queue_size = queue_size or 2 * pool.n_workers
        self.faults = faults
        self.interleave_seed = interleave_seed

    # -- generic dispatch --------------------------------------------------

    def _run(self, tasks: list[EvalTask], work: Callable) -> EvalMap:
        out = EvalMap()
        if not tasks:
            return out
        q = TaskQueue(self.queue_size)
        lock = threading.Lock()
        remaining = [len(tasks)]
        t0 = time.perf_counter()

        def settle(task, attempt, dev, wid, start, values=None, err=None):
            with lock:
                if values is not None:
                    for i, v in values.items():
                        if i in out or i in out.failures:
                            err = RuntimeError(f"index {i} evaluated twice")
                            break
                        out[i] = v
                if err is not None:
                    for i in task.pool.indices:
                        out.failures.setdefault(i, repr(err))
                out.records.append({
                    "task_id": task.task_id, "kind": task.kind, "device": dev, "worker": wid,
                    "indices": list(task.pool.indices), "start": start, "end": time.perf_counter() - t0,
                    "retries": attempt, "status": "ok" if err is None else "failed",
                })
                remaining[0] -= 1
                if remaining[0] == 0:
                    q.close()

        def worker(wid: int):
            dev_id = wid // self.pool.n_procs_per_device
            device = self.pool.devices[dev_id]
            rng = None if self.interleave_seed is None else np.random.default_rng([self.interleave_seed, wid])
            while True:
                item = q.get()
                if item is None:
                    return
                task, attempt = item
                if rng is not None:
                    time.sleep(float(rng.uniform(0, 2e-4)))
                start = time.perf_counter() - t0
                try:
                    if self.faults is not None:
                        self.faults(task, attempt)
                    values = work(task, device, wid)
                except Exception as exc:  # noqa: BLE001 - any task failure is retried
                    if attempt < self.retries:
                        log.info("task %d failed (%s); retry %d", task.task_id, exc, attempt + 1)
                        with lock:
                            out.retries += 1
                        time.sleep(self.backoff_s * 2**attempt)
                        q.put_retry((task, attempt + 1))
                    else:
                        log.warning("task %d failed permanently: %s", task.task_id, exc)
                        settle(task, attempt, dev_id, wid, start, err=exc)
                    continue
                settle(task, attempt, dev_id, wid, start, values=values)

        threads = [threading.Thread(target=worker, args=(w,), daemon=True, name=f"dmmpe-{w}")
                   for w in range(self.pool.n_workers)]
        for th in threads:
            th.start()
        for task in tasks:
            q.put((task, 0))
            out.dispatched += 1
        for th in threads:
            th.join()
        return out

    def map(self, fn: Callable, items: Sequence, kind: str = "generic") -> EvalMap:
        """Run ``fn(item)`` for every item through the worker pool."""
        tasks = [EvalTask(i, kind, ModelPool(i, (i,), (it,))) for i, it in enumerate(items)]

        def work(task, device, wid):
            with device.shared():
                return {task.pool.indices[0]: fn(task.pool.configs[0])}

        return self._run(tasks, work)

    # -- accuracy ----------------------------------------------------------

    def run_accuracy_eval(self, pools: Sequence[ModelPool], snapshot: SupernetParams, val) -> EvalMap:
        _require_frozen(snapshot)
        x, y = val.x_val, val.y_val

        def work(task, device, wid):
            with device.shared():
                return {i: predict_error(snapshot, c, x, y) for i, c in zip(task.pool.indices, task.pool.configs)}

        return self._run([EvalTask(k, "accuracy", p) for k, p in enumerate(pools)], work)

    # -- latency + MACs -----------------------------------------------------

    def run_latency_eval(self, configs: Sequence[ArchConfig], snapshot: SupernetParams) -> EvalMap:
        _require_frozen(snapshot)
        tasks = [EvalTask(i, "latency", ModelPool(i, (i,), (c,))) for i, c in enumerate(configs)]

        def work(task, device, wid):
            cfg = task.pool.configs[0]
            with device.lease(owner=f"task{task.task_id}") as lease:
                tau = measure_latency(cfg, snapshot, self.protocol, lease)
            return {task.pool.indices[0]: (tau, count_macs(cfg, snapshot.shape))}

        return self._run(tasks, work)

    def evaluate(self, configs: Sequence[ArchConfig], snapshot: SupernetParams, val) -> tuple[FitnessMatrix, dict]:
        pools = partition_pools(list(configs), self.pool.models_per_proc)
        t0 = time.perf_counter()
        acc = self.run_accuracy_eval(pools, snapshot, val)
        lat = self.run_latency_eval(configs, snapshot)
        wall = time.perf_counter() - t0
        fm = assemble_fitness(
            acc, {i: v[0] for i, v in lat.items()}, {i: v[1] for i, v in lat.items()}, len(configs),
            failures={**acc.failures, **lat.failures},
        )
        telemetry = {
            "wall_s": wall, "records": acc.records + lat.records,
            "retries": acc.retries + lat.retries, "dispatched": acc.dispatched + lat.dispatched,
        }
        return fm, telemetry


def _require_frozen(snapshot: SupernetParams) -> None:
    if any(v.flags.writeable for v in snapshot.tensors.values()):
        raise ValueError("evaluation needs a read-only snapshot (use params.snapshot())")


def run_accuracy_eval(pools, snapshot, val, pool: DevicePool, **engine_kw) -> EvalMap:
    return DMMPE(pool, **engine_kw).run_accuracy_eval(pools, snapshot, val)


def sequential_accuracy(configs: Sequence[ArchConfig], snapshot: SupernetParams, val) -> dict:
    """Reference loop used to check the parallel engine."""
    return {i: predict_error(snapshot, c, val.x_val, val.y_val) for i, c in enumerate(configs)}


def assemble_fitness(acc: dict, lat: dict, macs: dict, n: int, failures: dict | None = None) -> FitnessMatrix:
    failures = failures or {}
    values = np.empty((n, 3))
    failed = np.zeros(n, dtype=bool)
    for i in range(n):
        if i in failures:
            values[i] = PENALTY
            failed[i] = True
            continue
        try:
            values[i] = (acc[i], lat[i], macs[i])
        except KeyError:
            raise IncompleteEvaluation(f"index {i} has no result and no failure record") from None
    return FitnessMatrix(values, failed)


# ---------------------------------------------------------------------------
# throughput simulation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ThroughputCost:
    """Cost model for the discrete-event throughput simulation (seconds).

    ``contention``: k co-resident processes on a device progress at a
    combined rate of ``k / (1 + contention * (k - 1))``.
    ``proc_overhead``: fixed start-up time of each worker process.
    ``load_per_model``: time to instantiate one model inside a process.
    ``residency``: relative slowdown per extra model held by a process.
    ``sync``: per-model synchronisation cost of the data-parallel baseline.
    """

    contention: float = 0.3
    proc_overhead: float = 2.0
    load_per_model: float = 0.2
    residency: float = 0.05
    sync: float = 0.05


@dataclass
class SimResult:
    strategy: str
    n_devices: int
    n_procs: int
    models_per_proc: int
    makespan: float
    records: list = field(default_factory=list)


def _ps_device_sim(n_devices, n_procs, cost: ThroughputCost, pools_work, start_delay):
    """Processor sharing per device with greedy pool pickup by free processes.

    Returns (makespan, records).  ``pools_work`` is a list of work amounts
    handed out in order to whichever process becomes free first.
    """
    n_proc_total = n_devices * n_procs
    ready = [(start_delay, p) for p in range(n_proc_total)]
    heapq.heapify(ready)
    queue_pos = 0
    active: dict[int, list] = {d: [] for d in range(n_devices)}  # device -> [proc, remaining, pool, start]
    t = 0.0
    records = []

    def rate(k):
        return 1.0 / (1.0 + cost.contention * (k - 1)) if k else 0.0

    while True:
        # start pools for processes that are ready at time t
        while ready and ready[0][0] <= t + 1e-12 and queue_pos < len(pools_work):
            _, p = heapq.heappop(ready)
            d = p // n_procs
            active[d].append([p, pools_work[queue_pos], queue_pos, t])
            queue_pos += 1
        if not any(active.values()):
            if queue_pos >= len(pools_work):
                break
            t = ready[0][0]
            continue
        # next completion
        dt = np.inf
        for d, jobs in active.items():
            if jobs:
                r = rate(len(jobs))
                dt = min(dt, min(j[1] for j in jobs) / r)
        if ready and queue_pos < len(pools_work):
            dt = min(dt, max(ready[0][0] - t, 0.0))
        for d, jobs in active.items():
            if not jobs:
                continue
            r = rate(len(jobs))
            for j in jobs:
                j[1] -= dt * r
        t += dt
        for d in range(n_devices):
            keep = []
            for j in active[d]:
                if j[1] <= 1e-12:
                    records.append({"pool": j[2], "device": d, "proc": j[0], "start": j[3], "end": t})
                    heapq.heappush(ready, (t, j[0]))
                else:
                    keep.append(j)
            active[d] = keep
    return t, records


def simulate_throughput(strategy: str, task_times: Sequence[float], n_devices: int = 1, n_procs: int = 1,
                        models_per_proc: int = 1, cost: ThroughputCost = ThroughputCost()) -> SimResult:
    """Simulated wall time to evaluate one generation of ``task_times``.

    Strategies: ``sequential`` (one process on one device), ``data_parallel``
    (each model split over all devices with a synchronisation cost),
    ``persistent_workers`` (one long-lived process per device, one model per
    pickup) and ``dmmpe`` (``n_procs`` processes per device, pools of
    ``models_per_proc``).
    """
    tt = np.asarray(task_times, dtype=np.float64)
    if strategy == "sequential":
        n_devices, n_procs, models_per_proc = 1, 1, 1
    elif strategy == "persistent_workers":
        n_procs, models_per_proc = 1, 1
    elif strategy == "data_parallel":
        per = tt / n_devices + cost.sync + cost.load_per_model
        total = cost.proc_overhead + float(per.sum())
        recs = [{"pool": i, "device": -1, "proc": 0, "start": None, "end": None} for i in range(len(tt))]
        return SimResult(strategy, n_devices, 1, 1, total, recs)
    elif strategy != "dmmpe":
        raise InvalidConfig(f"unknown strategy {strategy!r}")
    if n_devices < 1 or n_procs < 1 or models_per_proc < 1:
        raise InvalidConfig("devices, N_p and B_m must be >= 1")
    slow = 1.0 + cost.residency * (models_per_proc - 1)
    work = [
        float(tt[i:i + models_per_proc].sum() + cost.load_per_model * len(tt[i:i + models_per_proc])) * slow
        for i in range(0, len(tt), models_per_proc)
    ]
    makespan, recs = _ps_device_sim(n_devices, n_procs, cost, work, cost.proc_overhead)
    return SimResult(strategy, n_devices, n_procs, models_per_proc, makespan, recs)


def _union_length(intervals) -> float:
    total, cur_s, cur_e = 0.0, None, None
    for s, e in sorted(intervals):
        if cur_e is None or s > cur_e:
            if cur_e is not None:
                total += cur_e - cur_s
            cur_s, cur_e = s, e
        else:
            cur_e = max(cur_e, e)
    return total + (cur_e - cur_s if cur_e is not None else 0.0)


def throughput_report(telemetry: Sequence[dict], sequential_time: float | None = None) -> dict:
    """Time per generation, per-device utilisation and speedup from task records.

    ``telemetry`` is a list of generations, each a dict with ``records``
    (``device``, ``start``, ``end``).  Without ``sequential_time`` the sum of
    task durations stands in for the one-worker time; utilisation counts the
    time a device had at least one task running.
    """
    if not telemetry:
        raise ValueError("need telemetry from at least one generation")
    times, busy, seq = [], collections.Counter(), 0.0
    for gen in telemetry:
        recs = [r for r in gen["records"] if r.get("start") is not None]
        if not recs:
            continue
        t0 = min(r["start"] for r in recs)
        t1 = max(r["end"] for r in recs)
        times.append(t1 - t0)
        by_dev = collections.defaultdict(list)
        for r in recs:
            by_dev[r["device"]].append((r["start"], r["end"]))
            seq += r["end"] - r["start"]
        for d, iv in by_dev.items():
            busy[d] += _union_length(iv)
    total = float(sum(times))
    time_per_gen = total / len(times)
    seq_per_gen = (sequential_time if sequential_time is not None else seq / len(times))
    return {
        "generations": len(times),
        "time_per_generation": time_per_gen,
        "utilization": {int(d): b / total if total else 0.0 for d, b in sorted(busy.items())},
        "speedup": seq_per_gen / time_per_gen if time_per_gen else 1.0,
    }
