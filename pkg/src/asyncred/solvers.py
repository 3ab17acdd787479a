"""Serial reference solvers producing comparable convergence traces.

``gm_red`` takes full-operator steps, ``bc_red`` cycles random coordinate
blocks, ``sync_red`` evaluates all block updates from a common iterate
behind a barrier (its trajectory equals ``gm_red``'s), and ``sg_red`` is the
serial minibatch variant. Traces group ``b`` block updates as one outer
iteration and always start with a record of the initial point.

Deterministic solvers write ``wall_ms = 0`` into their traces so that a
(spec, seed) pair maps to byte-identical CSV output; measured runtimes are
reported separately by the experiment layer.
"""

from __future__ import annotations

import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .red_core import RedConfig, RedOperator, step_size_bound

__all__ = [
    "Trace",
    "TraceRecord",
    "SolverBudget",
    "DivergenceError",
    "gm_red",
    "bc_red",
    "sync_red",
    "sg_red",
]


class DivergenceError(RuntimeError):
    """Raised when an iterate stops being finite."""

    def __init__(self, message: str, iteration: int, worker: int | None = None):
        super().__init__(message)
        self.iteration = iteration
        self.worker = worker


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    wall_ms: float
    res_sq: float
    norm_res: float
    snr_db: float | None
    min_res_sq: float


@dataclass
class Trace:
    """Convergence log: one record per outer iteration (``b`` block updates)."""

    records: list[TraceRecord] = field(default_factory=list)

    def append(self, iteration: int, wall_ms: float, res_sq: float,
               snr_db: float | None) -> None:
        if self.records:
            if iteration <= self.records[-1].iteration:
                raise ValueError("iteration indices must be strictly increasing")
            norm = res_sq / self.records[0].res_sq if self.records[0].res_sq else 0.0
            running = min(self.records[-1].min_res_sq, res_sq)
        else:
            norm = 1.0
            running = res_sq
        self.records.append(TraceRecord(iteration, wall_ms, res_sq, norm, snr_db, running))

    @property
    def final(self) -> TraceRecord:
        return self.records[-1]

    @property
    def min_res_sq(self) -> float:
        return self.records[-1].min_res_sq

    def iterations(self) -> np.ndarray:
        return np.array([rec.iteration for rec in self.records])


@dataclass(frozen=True)
class SolverBudget:
    """Stop after a fixed number of outer iterations and/or wall-clock time."""

    max_outer_iterations: int | None = None
    max_wall_ms: float | None = None

    def __post_init__(self):
        if self.max_outer_iterations is None and self.max_wall_ms is None:
            raise ValueError("at least one budget limit must be set")
        if self.max_outer_iterations is not None and self.max_outer_iterations < 1:
            raise ValueError("max_outer_iterations must be >= 1")

    def exhausted(self, outer: int, elapsed_ms: float) -> bool:
        if self.max_outer_iterations is not None and outer >= self.max_outer_iterations:
            return True
        if self.max_wall_ms is not None and elapsed_ms >= self.max_wall_ms:
            return True
        return False


def _check_gamma(r: RedOperator, cfg: RedConfig, lam: int = 0) -> None:
    bound = step_size_bound(r.fidelity.lipschitz, cfg.tau, lam)
    if cfg.gamma > bound * (1.0 + 1e-12):
        warnings.warn(
            f"stepsize {cfg.gamma:.3g} exceeds the convergence-analysis bound "
            f"{bound:.3g} (lambda={lam}); the run may diverge",
            stacklevel=3,
        )


def _record(trace: Trace, r: RedOperator, x: np.ndarray, outer: int,
            snr_fn: Callable[[np.ndarray], float] | None,
            iteration_of_divergence: int | None = None,
            wall_ms: float = 0.0) -> None:
    with np.errstate(over="ignore", invalid="ignore"):
        res_sq = r.residual_norm_sq(x)
    if not np.isfinite(res_sq) or not np.all(np.isfinite(x)):
        it = iteration_of_divergence if iteration_of_divergence is not None else outer
        raise DivergenceError(f"iterate became non-finite at outer iteration {it}", it)
    trace.append(outer, wall_ms, res_sq, snr_fn(x) if snr_fn else None)


def gm_red(r: RedOperator, cfg: RedConfig, x0: np.ndarray, budget: SolverBudget,
           snr_fn: Callable[[np.ndarray], float] | None = None,
           record_every: int = 1) -> tuple[np.ndarray, Trace]:
    """Full-operator fixed-point iteration ``x <- x - gamma G(x)``."""
    _check_gamma(r, cfg)
    x = np.array(x0, dtype=np.float64)
    trace = Trace()
    _record(trace, r, x, 0, snr_fn)
    start = time.monotonic()
    outer = 0
    while not budget.exhausted(outer, (time.monotonic() - start) * 1e3):
        x -= cfg.gamma * r.apply(x)
        outer += 1
        if outer % record_every == 0:
            _record(trace, r, x, outer, snr_fn)
    if trace.final.iteration != outer:
        _record(trace, r, x, outer, snr_fn)
    return x, trace


def block_update(r: RedOperator, cfg: RedConfig, x: np.ndarray, i: int) -> None:
    """One in-place block step ``x_i <- x_i - gamma * G_i(x)``.

    Shared by the serial solver, the replay simulator, and the async
    engine's single-worker path so their arithmetic is identical.
    """
    u = r.apply_block(x, i)
    x[r.partition.block_slice(i)] -= cfg.gamma * u


def bc_red(r: RedOperator, cfg: RedConfig, x0: np.ndarray, budget: SolverBudget,
           seed: int = 0, snr_fn: Callable[[np.ndarray], float] | None = None,
           record_every: int = 1) -> tuple[np.ndarray, Trace]:
    """Serial block-coordinate iteration with uniform i.i.d. block choice."""
    _check_gamma(r, cfg)
    rng = np.random.default_rng([seed, 0])
    x = np.array(x0, dtype=np.float64)
    trace = Trace()
    _record(trace, r, x, 0, snr_fn)
    start = time.monotonic()
    outer = 0
    while not budget.exhausted(outer, (time.monotonic() - start) * 1e3):
        for _ in range(r.b):
            block_update(r, cfg, x, int(rng.integers(r.b)))
        outer += 1
        if outer % record_every == 0:
            _record(trace, r, x, outer, snr_fn)
    if trace.final.iteration != outer:
        _record(trace, r, x, outer, snr_fn)
    return x, trace


def sync_red(r: RedOperator, cfg: RedConfig, x0: np.ndarray, budget: SolverBudget,
             n_workers: int = 1,
             snr_fn: Callable[[np.ndarray], float] | None = None,
             record_every: int = 1) -> tuple[np.ndarray, Trace]:
    """Barrier-parallel iteration: all ``b`` block updates are computed from
    the same iterate, then applied together. The trajectory coincides with
    ``gm_red`` regardless of the worker count."""
    if n_workers < 1:
        raise ValueError("n_workers must be >= 1")
    _check_gamma(r, cfg)
    x = np.array(x0, dtype=np.float64)
    trace = Trace()
    _record(trace, r, x, 0, snr_fn)
    start = time.monotonic()
    outer = 0
    pool = ThreadPoolExecutor(max_workers=n_workers) if n_workers > 1 else None
    try:
        while not budget.exhausted(outer, (time.monotonic() - start) * 1e3):
            if pool is None:
                updates = [r.apply_block(x, i) for i in range(r.b)]
            else:
                updates = list(pool.map(lambda i: r.apply_block(x, i), range(r.b)))
            for i, u in enumerate(updates):
                x[r.partition.block_slice(i)] -= cfg.gamma * u
            outer += 1
            if outer % record_every == 0:
                _record(trace, r, x, outer, snr_fn)
    finally:
        if pool is not None:
            pool.shutdown()
    if trace.final.iteration != outer:
        _record(trace, r, x, outer, snr_fn)
    return x, trace


def sg_red(r: RedOperator, cfg: RedConfig, x0: np.ndarray, budget: SolverBudget,
           w: int, seed: int = 0,
           snr_fn: Callable[[np.ndarray], float] | None = None,
           record_every: int = 1) -> tuple[np.ndarray, Trace]:
    """Serial minibatch iteration ``x <- x - gamma G_hat(x)``."""
    if w < 1:
        raise ValueError("minibatch size w must be >= 1")
    _check_gamma(r, cfg)
    rng = np.random.default_rng([seed, 0])
    x = np.array(x0, dtype=np.float64)
    trace = Trace()
    _record(trace, r, x, 0, snr_fn)
    start = time.monotonic()
    outer = 0
    while not budget.exhausted(outer, (time.monotonic() - start) * 1e3):
        x -= cfg.gamma * r.apply_stochastic(x, w, rng)
        outer += 1
        if outer % record_every == 0:
            _record(trace, r, x, outer, snr_fn)
    if trace.final.iteration != outer:
        _record(trace, r, x, outer, snr_fn)
    return x, trace
