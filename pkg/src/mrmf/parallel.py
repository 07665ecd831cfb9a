"""Simulated synchronous data parallelism and concurrent two-group training.

Workers are threads, each owning one model replica, one optimizer state and
one contiguous shard of every global mini-batch. Gradients are combined as
the shard-size-weighted mean, always accumulated in ascending worker order by
worker 0 into a shared buffer that every worker then reads, so all replicas
apply the same update. Batch normalisation statistics are synchronised across
workers through the same collective.
"""

from __future__ import annotations

import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .errors import ReplicaDivergenceError, TrainingAborted
from .nn.loss import mse_loss
from .nn.model import Model
from .nn.optim import OptimizerState, optimizer_step

BARRIER_TIMEOUT = 600.0


class _Collective:
    def __init__(self, size: int, weights):
        self.size = size
        self.weights = list(weights)
        self.barrier = threading.Barrier(size, timeout=BARRIER_TIMEOUT)
        self.slots: list = [None] * size
        self.result: list = []

    def allreduce(self, rank: int, arrays, weighted: bool):
        self.slots[rank] = [np.asarray(a, dtype=np.float64) for a in arrays]
        self.barrier.wait()
        if rank == 0:
            out = []
            for j in range(len(self.slots[0])):
                if weighted:
                    acc = self.weights[0] * self.slots[0][j]
                    for w in range(1, self.size):
                        acc = acc + self.weights[w] * self.slots[w][j]
                else:
                    acc = self.slots[0][j].copy()
                    for w in range(1, self.size):
                        acc = acc + self.slots[w][j]
                out.append(acc)
            self.result = out
        self.barrier.wait()
        return self.result


class WorkerComm:
    """Handle given to a worker's forward/backward; ``weight`` is its share of the batch."""

    def __init__(self, collective: _Collective, rank: int):
        self._collective = collective
        self.rank = rank
        self.weight = collective.weights[rank]

    def allreduce(self, arrays, weighted: bool = False):
        return self._collective.allreduce(self.rank, arrays, weighted)


class WorkerGroup:
    """``workers`` replicas of ``model``; replica 0 is ``model`` itself.

    Use as a context manager (or call :meth:`close`) to release the worker
    threads.
    """

    def __init__(self, model: Model, workers: int, optimizer: OptimizerState, verify: bool = True):
        if workers < 1:
            raise ValueError("worker count must be >= 1")
        self.workers = int(workers)
        self.replicas = [model] + [model.copy() for _ in range(self.workers - 1)]
        for r in self.replicas[1:]:
            r.generation = model.generation
        self.states = [optimizer] + [_clone_state(optimizer) for _ in range(self.workers - 1)]
        self.verify = verify
        self._executor = None

    @property
    def model(self) -> Model:
        return self.replicas[0]

    def checksums(self) -> list[str]:
        return [r.checksum() for r in self.replicas]

    def map(self, fn, items):
        if self.workers == 1:
            return [fn(i) for i in items]
        if self._executor is None:
            self._executor = ThreadPoolExecutor(max_workers=self.workers, thread_name_prefix="mrmf-worker")
        return list(self._executor.map(fn, items))

    def close(self):
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _clone_state(state: OptimizerState) -> OptimizerState:
    moments = {k: tuple(a.copy() for a in v) if isinstance(v, tuple) else v.copy() for k, v in state.moments.items()}
    return OptimizerState(state.kind, state.lr, state.momentum, state.beta1, state.beta2, state.eps, state.step, moments)


def shard_bounds(n: int, workers: int) -> list[tuple[int, int]]:
    """Contiguous shards whose sizes differ by at most one; none are dropped."""
    base, extra = divmod(n, workers)
    bounds, start = [], 0
    for w in range(workers):
        size = base + (1 if w < extra else 0)
        bounds.append((start, start + size))
        start += size
    return bounds


@dataclass
class StepResult:
    loss: float
    grads: list  # combined gradient, as applied by every replica


def parallel_step(group: WorkerGroup, x, y, shards=None) -> StepResult:
    """One synchronous SGD step over the global batch ``(x, y)``.

    ``shards`` overrides the automatic split with an explicit list of
    ``(x_w, y_w)`` pairs, one per worker (a test hook).
    """
    W = group.workers
    if shards is None:
        if len(x) < W:
            raise ValueError(f"global batch of {len(x)} samples cannot feed {W} workers")
        shards = [(x[a:b], y[a:b]) for a, b in shard_bounds(len(x), W)]
    elif len(shards) != W:
        raise ValueError("need one shard per worker")
    total = sum(len(s[0]) for s in shards)
    collective = _Collective(W, [len(s[0]) / total for s in shards]) if W > 1 else None

    def work(rank):
        replica = group.replicas[rank]
        comm = WorkerComm(collective, rank) if collective is not None else None
        try:
            xs, ys = shards[rank]
            out, cache = replica.forward(xs, True, comm)
            loss, dout = mse_loss(out, ys)
            grads = replica.backward(cache, dout, comm)
            if comm is not None:
                keys = [(i, name) for i, name, _ in replica.parameters()]
                flat = comm.allreduce([grads[i][n] for i, n in keys] + [np.array(loss)], weighted=True)
                grads = [dict() for _ in replica.layers]
                for (i, n), g in zip(keys, flat):
                    grads[i][n] = g
                loss = float(flat[-1])
        except BaseException:
            if collective is not None:
                collective.barrier.abort()
            raise
        optimizer_step(group.states[rank], replica, grads)
        return loss, grads

    results = group.map(work, range(W))
    if group.verify and W > 1:
        sums = group.checksums()
        if len(set(sums)) != 1:
            raise ReplicaDivergenceError(
                "replica parameters diverged after a synchronous step",
                diagnostic={"checksums": sums},
            )
    loss, grads = results[0]
    return StepResult(loss, grads)


@dataclass(frozen=True)
class AllocationInput:
    t_dense: float
    t_coarse: float
    workers: int

    def __post_init__(self):
        if self.t_dense <= 0 or self.t_coarse <= 0:
            raise ValueError("training time estimates must be positive")
        if self.workers < 2:
            raise ValueError("concurrent training needs at least 2 workers")


def allocate_workers(alloc: AllocationInput, granularity: int = 1) -> tuple[int, int]:
    """Split the worker budget in proportion ``t_d / (t_d + t_c)`` (dense first).

    Rounds half up, optionally to a multiple of ``granularity``, and keeps at
    least one unit in each group.
    """
    g = int(granularity)
    W = alloc.workers
    if g < 1 or W % g or W < 2 * g:
        raise ValueError(f"{W} workers cannot be split into two groups of multiples of {g}")
    share = W * alloc.t_dense / (alloc.t_dense + alloc.t_coarse)
    dense = g * math.floor(share / g + 0.5)
    dense = min(max(dense, g), W - g)
    return dense, W - dense


@dataclass
class JobOutcome:
    result: Any
    start: float
    end: float


@dataclass
class ConcurrentResult:
    coarse: JobOutcome
    dense: JobOutcome
    wall_seconds: float
    concurrent: bool


def concurrent_stage(coarse_job: Callable, dense_job: Callable, allocation: tuple[int, int],
                     concurrent: bool = True) -> ConcurrentResult:
    """Run both trainings in disjoint worker groups and wait for both.

    Jobs are callables ``job(workers, cancel_event)``; ``allocation`` is
    ``(W_dense, W_coarse)``. With ``concurrent=False`` the same jobs run one
    after the other with the same per-group worker counts, which must produce
    bitwise-identical results.
    """
    w_dense, w_coarse = allocation
    if w_dense < 1 or w_coarse < 1:
        raise ValueError("each group needs at least one worker")
    cancel = threading.Event()
    outcomes: dict[str, JobOutcome] = {}
    errors: dict[str, BaseException] = {}

    def run(name, job, workers):
        start = time.perf_counter()
        try:
            res = job(workers, cancel)
        except BaseException as exc:  # noqa: BLE001 - reported below with both diagnostics
            errors[name] = exc
            cancel.set()
            res = None
        outcomes[name] = JobOutcome(res, start, time.perf_counter())

    t0 = time.perf_counter()
    if concurrent:
        threads = [
            threading.Thread(target=run, args=("coarse", coarse_job, w_coarse), name="mrmf-group-coarse"),
            threading.Thread(target=run, args=("dense", dense_job, w_dense), name="mrmf-group-dense"),
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    else:
        run("coarse", coarse_job, w_coarse)
        if "coarse" not in errors:
            run("dense", dense_job, w_dense)
    wall = time.perf_counter() - t0

    if errors:
        diagnostic = {name: f"{type(e).__name__}: {e}" for name, e in errors.items()}
        records = []
        for e in errors.values():
            records.extend(getattr(e, "records", []))
        raise TrainingAborted(f"fusion stage aborted: {diagnostic}", diagnostic=diagnostic, records=records)
    return ConcurrentResult(outcomes["coarse"], outcomes["dense"], wall, concurrent)
