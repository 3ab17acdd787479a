"""Asynchronous shared-memory executor and its deterministic twin.

Shared state is one dual-buffered array per variable block: writers fill the
unpublished buffer under a per-block lock and flip a published-slot selector,
so readers never block writers and never observe a torn block. Version
stamps written around each payload let lock-free readers detect and retry
reads that raced a writer. There is no global lock on the iterate; the only
shared scalar is the update counter, touched briefly at publish time.

Delay accounting follows the bounded-staleness model: an update's delay is
the number of other publishes that landed between its snapshot and its own
publish. ``enforce`` mode rejects publishes whose delay would exceed the
configured maximum, forcing the worker to recompute from a fresh snapshot.

``run_simulated`` replays an explicit schedule of (block, read-at,
publish-at) events single-threaded and bit-reproducibly, reconstructing each
stale iterate from a bounded history window.
"""

from __future__ import annotations

import io
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .blocks import Partition
from .red_core import RedConfig, RedOperator
from .solvers import DivergenceError, SolverBudget, Trace, _check_gamma, _record

__all__ = [
    "SharedState",
    "DelayPolicy",
    "WorkerReport",
    "StalenessSchedule",
    "run_async_bg",
    "run_async_sg",
    "run_simulated",
    "delay_audit",
    "memory_stress",
    "StressReport",
]

_THREAD_CAP_ENV = "ASYNC_RED_THREADS"


def _capped_workers(n_workers: int) -> int:
    if n_workers < 1:
        raise ValueError("n_workers must be >= 1")
    cap = os.environ.get(_THREAD_CAP_ENV)
    if cap:
        n_workers = min(n_workers, max(1, int(cap)))
    return n_workers


@dataclass(frozen=True)
class DelayPolicy:
    """``measure`` records observed delays; ``enforce`` additionally rejects
    any publish whose delay would exceed ``lambda_max``."""

    mode: str = "measure"
    lambda_max: int = 0

    def __post_init__(self):
        if self.mode not in ("measure", "enforce"):
            raise ValueError("mode must be 'measure' or 'enforce'")
        if self.lambda_max < 0:
            raise ValueError("lambda_max must be >= 0")

    @property
    def enforced(self) -> int | None:
        return self.lambda_max if self.mode == "enforce" else None


@dataclass
class WorkerReport:
    worker: int
    published: int = 0
    delay_histogram: dict[int, int] = field(default_factory=dict)
    max_delay: int = 0
    stalls: int = 0
    read_retries: int = 0

    def count(self, delay: int) -> None:
        self.published += 1
        self.delay_histogram[delay] = self.delay_histogram.get(delay, 0) + 1
        if delay > self.max_delay:
            self.max_delay = delay


class SharedState:
    """Dual-buffered, per-block versioned shared iterate.

    Readers take no locks: they copy the published buffer of each block and
    accept the copy only if the leading and trailing version stamps agree
    (retrying otherwise). Writers serialize per block via a lock, write the
    unpublished buffer, and flip it visible while incrementing the global
    update counter; writers to distinct blocks never contend, and no
    operation holds two block locks.
    """

    def __init__(self, x0: np.ndarray, partition: Partition):
        x0 = np.asarray(x0, dtype=np.float64)
        if x0.shape != (partition.n,):
            raise ValueError("x0 does not match partition dimension")
        self.partition = partition
        b = partition.b
        self._slices = [partition.block_slice(i) for i in range(b)]
        self._bufs = [[x0[sl].copy(), np.zeros(sl.stop - sl.start)] for sl in self._slices]
        self._published = [0] * b
        self._lead = [[1, 0] for _ in range(b)]
        self._trail = [[1, 0] for _ in range(b)]
        self._version = [1] * b
        self._locks = [threading.Lock() for _ in range(b)]
        self._counter_lock = threading.Lock()
        self._k = 0

    @property
    def counter(self) -> int:
        """Total published updates so far."""
        return self._k

    @property
    def b(self) -> int:
        return self.partition.b

    def read_block_into(self, i: int, out: np.ndarray) -> int:
        """Consistent copy of block ``i`` into ``out``; returns retry count.

        Stamp order mirrors the writer: the writer sets the leading stamp
        before the payload and the trailing stamp after it, so a reader that
        sees trailing (read first) equal to leading (read last) cannot have
        overlapped a payload write.
        """
        lead_i, trail_i, bufs_i = self._lead[i], self._trail[i], self._bufs[i]
        retries = 0
        while True:
            slot = self._published[i]
            t = trail_i[slot]
            np.copyto(out, bufs_i[slot])
            if lead_i[slot] == t:
                return retries
            retries += 1
            if retries > 1_000_000:
                raise RuntimeError(f"block {i} read failed to settle")

    def snapshot(self, out: np.ndarray | None = None,
                 validate: bool = False) -> tuple[np.ndarray, int, int]:
        """Block-wise consistent copy of the full iterate.

        Returns ``(x, read_at, retries)`` where ``read_at`` is the update
        counter at snapshot start. By default blocks may mix versions
        (each block individually consistent); with ``validate=True`` the
        snapshot is retried until no publish landed while it was taken, so
        the copy equals the exact historical iterate ``x^read_at``.

        Counter reads go through the counter lock so they serialize against
        the flip+increment step of publishes; an unchanged counter therefore
        proves that no block became visible during the reads.
        """
        x = out if out is not None else np.empty(self.partition.n)
        retries = 0
        while True:
            if validate:
                with self._counter_lock:
                    s0 = self._k
            else:
                # lock-free read: the publish path flips visibility before
                # bumping the counter, so a plain read can only understate
                # the count, which overstates (never hides) staleness
                s0 = self._k
            for i, sl in enumerate(self._slices):
                retries += self.read_block_into(i, x[sl])
            if not validate:
                return x, s0, retries
            with self._counter_lock:
                s1 = self._k
            if s1 == s0:
                return x, s0, retries
            retries += 1

    def try_publish(self, i: int, delta, read_at: int,
                    enforce_lambda: int | None = None,
                    k_limit: int | None = None) -> tuple[bool, int, int]:
        """Attempt ``x_i <- x_i - delta`` as one published update.

        Returns ``(ok, delay, k)``. The block's new value is written to the
        unpublished buffer first; the delay check, counter increment, and
        visibility flip happen atomically, so a rejected attempt (delay
        above ``enforce_lambda``, or the update budget ``k_limit`` reached)
        leaves no trace. ``delay`` counts publishes that landed since
        ``read_at``.
        """
        with self._locks[i]:
            slot = 1 - self._published[i]
            v = self._version[i] + 1
            self._lead[i][slot] = v
            np.subtract(self._bufs[i][1 - slot], delta, out=self._bufs[i][slot])
            self._trail[i][slot] = v
            with self._counter_lock:
                delay = self._k - read_at
                if enforce_lambda is not None and delay > enforce_lambda:
                    return False, delay, self._k
                if k_limit is not None and self._k >= k_limit:
                    return False, delay, self._k
                self._published[i] = slot
                self._version[i] = v
                self._k += 1
                return True, delay, self._k


@dataclass
class StalenessSchedule:
    """Explicit (worker, block, read-at, publish-at) event list.

    ``publish_at`` must be the dense sequence ``0, 1, 2, ...`` (one event per
    published update); ``read_at`` is the update count the stale iterate had
    seen, so the event's delay is ``publish_at - read_at``.
    """

    workers: np.ndarray
    blocks: np.ndarray
    read_at: np.ndarray
    publish_at: np.ndarray

    def __post_init__(self):
        self.workers = np.asarray(self.workers, dtype=np.int64)
        self.blocks = np.asarray(self.blocks, dtype=np.int64)
        self.read_at = np.asarray(self.read_at, dtype=np.int64)
        self.publish_at = np.asarray(self.publish_at, dtype=np.int64)
        n = len(self.publish_at)
        if not (len(self.workers) == len(self.blocks) == len(self.read_at) == n):
            raise ValueError("schedule columns must have equal length")
        if n and not np.array_equal(self.publish_at, np.arange(n)):
            raise ValueError("publish_at must be the dense sequence 0..n-1")
        if np.any(self.read_at < 0) or np.any(self.read_at > self.publish_at):
            raise ValueError("need 0 <= read_at <= publish_at for every event")

    def __len__(self) -> int:
        return len(self.publish_at)

    @property
    def delays(self) -> np.ndarray:
        return self.publish_at - self.read_at

    @property
    def max_delay(self) -> int:
        return int(self.delays.max()) if len(self) else 0

    def check_lambda_valid(self, lam: int) -> None:
        if self.max_delay > lam:
            raise ValueError(
                f"schedule has delay {self.max_delay}, exceeding lambda={lam}")

    @classmethod
    def random(cls, n_events: int, b: int, lam: int, seed: int = 0,
               n_workers: int = 1) -> "StalenessSchedule":
        rng = np.random.default_rng(seed)
        publish = np.arange(n_events)
        delays = rng.integers(0, lam + 1, size=n_events)
        return cls(
            workers=rng.integers(0, n_workers, size=n_events),
            blocks=rng.integers(0, b, size=n_events),
            read_at=np.maximum(publish - delays, 0),
            publish_at=publish,
        )

    @classmethod
    def zero_delay(cls, blocks) -> "StalenessSchedule":
        blocks = np.asarray(blocks, dtype=np.int64)
        publish = np.arange(len(blocks))
        return cls(workers=np.zeros(len(blocks), dtype=np.int64),
                   blocks=blocks, read_at=publish, publish_at=publish)

    def to_csv(self, stream: io.TextIOBase) -> None:
        stream.write("event,worker,block,read_at,publish_at\n")
        for e in range(len(self)):
            stream.write(f"{e},{self.workers[e]},{self.blocks[e]},"
                         f"{self.read_at[e]},{self.publish_at[e]}\n")

    @classmethod
    def from_csv(cls, stream: io.TextIOBase) -> "StalenessSchedule":
        header = stream.readline().strip()
        if header != "event,worker,block,read_at,publish_at":
            raise ValueError(f"unexpected schedule header: {header!r}")
        rows = [line.strip().split(",") for line in stream if line.strip()]
        cols = np.array([[int(v) for v in row] for row in rows], dtype=np.int64)
        if len(cols) == 0:
            z = np.zeros(0, dtype=np.int64)
            return cls(z, z, z, z)
        return cls(workers=cols[:, 1], blocks=cols[:, 2],
                   read_at=cols[:, 3], publish_at=cols[:, 4])


def staled_block_update(r: RedOperator, cfg: RedConfig, x: np.ndarray,
                        x_stale: np.ndarray, i: int) -> None:
    """Apply ``x_i <- x_i - gamma G_i(x_stale)`` in place."""
    u = r.apply_block(x_stale, i)
    x[r.partition.block_slice(i)] -= cfg.gamma * u


def run_simulated(r: RedOperator, cfg: RedConfig, x0: np.ndarray,
                  schedule: StalenessSchedule,
                  snr_fn: Callable[[np.ndarray], float] | None = None,
                  log_stale: bool = True,
                  record_every: int = 1) -> tuple[np.ndarray, Trace, list[np.ndarray]]:
    """Deterministic single-threaded replay of a staleness schedule.

    Keeps a history window deep enough to reconstruct each event's stale
    iterate exactly; with an all-zero-delay schedule the trajectory is
    bit-identical to the serial block-coordinate solver fed the same block
    sequence. ``record_every`` thins the trace (in outer-iteration units).
    """
    if len(schedule) and (schedule.blocks.min() < 0 or schedule.blocks.max() >= r.b):
        raise ValueError("schedule references blocks outside the partition")
    window = schedule.max_delay
    stride = record_every * r.b
    x = np.array(x0, dtype=np.float64)
    history: dict[int, np.ndarray] = {0: x.copy()}
    stale_log: list[np.ndarray] = []
    trace = Trace()
    _record(trace, r, x, 0, snr_fn)
    for e in range(len(schedule)):
        x_stale = history[int(schedule.read_at[e])]
        if log_stale:
            stale_log.append(x_stale.copy())
        staled_block_update(r, cfg, x, x_stale, int(schedule.blocks[e]))
        k = e + 1
        history[k] = x.copy()
        old = k - window - 1
        if old in history:
            del history[old]
        if k % stride == 0:
            _record(trace, r, x, k // r.b, snr_fn, iteration_of_divergence=k)
    k = len(schedule)
    if k % stride != 0 and k > 0:
        _record(trace, r, x, -(-k // r.b), snr_fn)
    return x, trace, stale_log


def _serial_async(r: RedOperator, cfg: RedConfig, x0: np.ndarray,
                  budget: SolverBudget, policy: DelayPolicy, seed: int,
                  update_fn, snr_fn, record_every: int, harvest: bool):
    """Single-worker path: serial arithmetic, async-style reporting."""
    rng = np.random.default_rng([seed, 0])
    x = np.array(x0, dtype=np.float64)
    report = WorkerReport(worker=0)
    events: list[int] = []
    trace = Trace()
    _record(trace, r, x, 0, snr_fn)
    start = time.monotonic()
    outer = 0
    k = 0
    while not budget.exhausted(outer, (time.monotonic() - start) * 1e3):
        for _ in range(r.b):
            i = int(rng.integers(r.b))
            u = update_fn(x, i, rng)
            x[r.partition.block_slice(i)] -= cfg.gamma * u
            report.count(0)
            if harvest:
                events.append((0, i, k, k))
            k += 1
        outer += 1
        if outer % record_every == 0:
            _record(trace, r, x, outer, snr_fn, iteration_of_divergence=k)
    if trace.final.iteration != outer:
        _record(trace, r, x, outer, snr_fn)
    schedule = None
    if harvest:
        arr = np.array(events, dtype=np.int64).reshape(-1, 4)
        schedule = StalenessSchedule(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])
    return x, trace, [report], schedule


def _run_async(r: RedOperator, cfg: RedConfig, x0: np.ndarray, n_workers: int,
               budget: SolverBudget, policy: DelayPolicy, seed: int,
               update_fn, snr_fn, record_every: int, harvest: bool):
    n_workers = _capped_workers(n_workers)
    _check_gamma(r, cfg, policy.lambda_max if policy.mode == "enforce" else 0)
    if n_workers == 1:
        return _serial_async(r, cfg, x0, budget, policy, seed, update_fn,
                             snr_fn, record_every, harvest)

    state = SharedState(np.asarray(x0, dtype=np.float64), r.partition)
    k_limit = (budget.max_outer_iterations * r.b
               if budget.max_outer_iterations is not None else None)
    deadline = (time.monotonic() + budget.max_wall_ms / 1e3
                if budget.max_wall_ms is not None else None)
    stop = threading.Event()
    errors: list[DivergenceError] = []
    reports = [WorkerReport(worker=w) for w in range(n_workers)]
    harvest_events: list[list[tuple[int, int, int, int]]] = [[] for _ in range(n_workers)]
    gamma = cfg.gamma
    enforce = policy.enforced

    crashes: list[BaseException] = []
    started = threading.Barrier(n_workers + 1)

    def worker(wid: int) -> None:
        try:
            rng = np.random.default_rng([seed, wid])
            buf = np.empty(r.n)
            rep = reports[wid]
            started.wait()
            while not stop.is_set():
                if k_limit is not None and state.counter >= k_limit:
                    break
                if deadline is not None and time.monotonic() >= deadline:
                    break
                _, read_at, retries = state.snapshot(buf, validate=harvest)
                rep.read_retries += retries
                i = int(rng.integers(r.b))
                with np.errstate(over="ignore", invalid="ignore"):
                    u = update_fn(buf, i, rng)
                    delta = gamma * u
                if not np.all(np.isfinite(delta)):
                    errors.append(DivergenceError(
                        f"worker {wid} computed a non-finite update at k={state.counter}",
                        iteration=state.counter, worker=wid))
                    stop.set()
                    return
                ok, delay, k_new = state.try_publish(i, delta, read_at,
                                                     enforce_lambda=enforce,
                                                     k_limit=k_limit)
                if ok:
                    rep.count(delay)
                    if harvest:
                        harvest_events[wid].append((wid, i, read_at, k_new - 1))
                elif enforce is not None and delay > enforce:
                    rep.stalls += 1
        except BaseException as exc:  # surfaced after join
            crashes.append(exc)
            stop.set()

    trace = Trace()
    sample_buf = np.empty(r.n)
    x_first = np.asarray(x0, dtype=np.float64)
    _record(trace, r, x_first, 0, snr_fn)
    start = time.monotonic()

    sample_step = record_every * r.b
    sampler_state = {"next": sample_step}

    def sampler() -> None:
        started.wait()
        while not stop.is_set():
            k = state.counter
            if k_limit is not None and k >= k_limit:
                return
            if k >= sampler_state["next"]:
                snap, _, _ = state.snapshot(sample_buf)
                try:
                    _record(trace, r, snap, k // r.b, snr_fn,
                            iteration_of_divergence=k,
                            wall_ms=(time.monotonic() - start) * 1e3)
                except DivergenceError as err:
                    errors.append(err)
                    stop.set()
                    return
                sampler_state["next"] = (k // r.b + record_every) * r.b
            else:
                time.sleep(2e-4)

    import sys

    threads = [threading.Thread(target=worker, args=(w,), daemon=True)
               for w in range(n_workers)]
    sampler_thread = threading.Thread(target=sampler, daemon=True)
    old_interval = sys.getswitchinterval()
    sys.setswitchinterval(5e-4)
    try:
        for t in threads:
            t.start()
        sampler_thread.start()
        for t in threads:
            t.join()
        stop.set()
        sampler_thread.join()
    finally:
        sys.setswitchinterval(old_interval)

    if crashes:
        raise crashes[0]
    if errors:
        raise errors[0]

    x_final, _, _ = state.snapshot()
    k_final = state.counter
    final_iter = -(-k_final // r.b)
    if trace.final.iteration < final_iter:
        _record(trace, r, x_final, final_iter, snr_fn,
                iteration_of_divergence=k_final,
                wall_ms=(time.monotonic() - start) * 1e3)
    published_total = sum(rep.published for rep in reports)
    if published_total != k_final:
        raise RuntimeError(
            f"lost updates: workers published {published_total}, counter says {k_final}")

    schedule = None
    if harvest:
        merged = sorted((ev for evs in harvest_events for ev in evs),
                        key=lambda ev: ev[3])
        arr = np.array(merged, dtype=np.int64).reshape(-1, 4)
        schedule = StalenessSchedule(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])
    return x_final, trace, reports, schedule


def run_async_bg(r: RedOperator, cfg: RedConfig, x0: np.ndarray, n_workers: int,
                 budget: SolverBudget, policy: DelayPolicy | None = None,
                 seed: int = 0,
                 snr_fn: Callable[[np.ndarray], float] | None = None,
                 record_every: int = 1, harvest_schedule: bool = False):
    """Asynchronous block-parallel batch-gradient iteration.

    Every worker repeatedly snapshots the shared iterate, evaluates one
    random block of the composite operator on the (possibly stale) snapshot,
    and publishes the block update against the current shared value. Returns
    ``(x_final, trace, reports)``; with ``harvest_schedule=True`` the engine
    validates snapshots so the run is exactly replayable and a fourth element
    carries the recorded schedule.
    """
    policy = policy or DelayPolicy()

    def update(x_stale, i, rng):
        return r.apply_block(x_stale, i)

    x, trace, reports, schedule = _run_async(
        r, cfg, x0, n_workers, budget, policy, seed, update, snr_fn,
        record_every, harvest_schedule)
    if harvest_schedule:
        return x, trace, reports, schedule
    return x, trace, reports


def run_async_sg(r: RedOperator, cfg: RedConfig, x0: np.ndarray, n_workers: int,
                 w: int, budget: SolverBudget, policy: DelayPolicy | None = None,
                 seed: int = 0,
                 snr_fn: Callable[[np.ndarray], float] | None = None,
                 record_every: int = 1):
    """Asynchronous block-parallel minibatch iteration (sampled gradient,
    exact denoiser term)."""
    if w < 1:
        raise ValueError("minibatch size w must be >= 1")
    policy = policy or DelayPolicy()

    def update(x_stale, i, rng):
        return r.apply_stochastic_block(x_stale, i, w, rng)

    x, trace, reports, _ = _run_async(
        r, cfg, x0, n_workers, budget, policy, seed, update, snr_fn,
        record_every, False)
    return x, trace, reports


def delay_audit(reports: list[WorkerReport]) -> dict:
    """Aggregate per-worker delay histograms into one summary."""
    hist: dict[int, int] = {}
    for rep in reports:
        for d, c in rep.delay_histogram.items():
            hist[d] = hist.get(d, 0) + c
    total = sum(rep.published for rep in reports)
    max_delay = max((rep.max_delay for rep in reports), default=0)
    n_workers = len(reports)
    return {
        "n_workers": n_workers,
        "published": total,
        "max_delay": max_delay,
        "delay_histogram": dict(sorted(hist.items())),
        "stalls": sum(rep.stalls for rep in reports),
        "read_retries": sum(rep.read_retries for rep in reports),
        "max_delay_per_worker": max_delay / n_workers if n_workers else 0.0,
    }


@dataclass
class StressReport:
    updates: int
    n_workers: int
    violations: int
    read_retries: int
    stalls: int
    final_counter: int
    published_total: int
    max_delay: int
    elapsed_s: float
    reports: list[WorkerReport]


def memory_stress(n_updates: int = 1_000_000, n_workers: int = 8, b: int = 4,
                  block_size: int = 8, seed: int = 0,
                  enforce_lambda: int | None = None) -> StressReport:
    """Hammer the shared-state protocol and count consistency violations.

    Workers snapshot all blocks, verify that every block copy is internally
    constant (each publish rewrites a whole block, so any mix of two versions
    is detectable), and publish an increment to one random block. Runs with a
    tiny interpreter switch interval to maximize interleaving.
    """
    import sys

    part_n = b * block_size
    from .blocks import make_uniform_partition

    state = SharedState(np.zeros(part_n), make_uniform_partition(part_n, b))
    violations = [0] * n_workers
    reports = [WorkerReport(worker=w) for w in range(n_workers)]
    stop = threading.Event()
    neg_one = -np.ones(block_size)

    def worker(wid: int) -> None:
        rng = np.random.default_rng([seed, wid])
        buf = np.empty(part_n)
        buf2d = buf.reshape(b, block_size)
        rep = reports[wid]
        chunk = rng.integers(0, b, size=4096)
        pos = 0
        while not stop.is_set() and state.counter < n_updates:
            _, read_at, retries = state.snapshot(buf)
            rep.read_retries += retries
            # every publish rewrites a whole block with a constant shift, so
            # any block whose entries disagree is a torn read that slipped
            # past the stamps
            if np.ptp(buf2d, axis=1).any():
                violations[wid] += 1
            if pos == len(chunk):
                chunk = rng.integers(0, b, size=4096)
                pos = 0
            i = int(chunk[pos])
            pos += 1
            ok, delay, _ = state.try_publish(i, neg_one, read_at,
                                             enforce_lambda=enforce_lambda,
                                             k_limit=n_updates)
            if ok:
                rep.count(delay)
            elif enforce_lambda is not None and delay > enforce_lambda:
                rep.stalls += 1

    # a switch interval well below the default forces dense interleaving
    # while keeping the run inside its time budget
    old_interval = sys.getswitchinterval()
    sys.setswitchinterval(3e-4)
    start = time.monotonic()
    try:
        threads = [threading.Thread(target=worker, args=(w,)) for w in range(n_workers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    finally:
        stop.set()
        sys.setswitchinterval(old_interval)
    elapsed = time.monotonic() - start
    return StressReport(
        updates=n_updates,
        n_workers=n_workers,
        violations=sum(violations),
        read_retries=sum(rep.read_retries for rep in reports),
        stalls=sum(rep.stalls for rep in reports),
        final_counter=state.counter,
        published_total=sum(rep.published for rep in reports),
        max_delay=max(rep.max_delay for rep in reports),
        elapsed_s=elapsed,
        reports=reports,
    )
