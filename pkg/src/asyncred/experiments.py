"""Experiment assembly: phantoms, measurement synthesis, canned recipes,
trace/report/image serialization.

An :class:`ExperimentSpec` (a pydantic model, JSON-serializable) fully
determines a run: task geometry, forward operator, denoiser, solver, and
seeds. ``build_instance`` turns a spec into operators and starting point,
``run_experiment`` executes it and returns the trace, the reconstructed
image, and a report with measured constants and the matching theoretical
convergence bounds.

Conventions: phantom intensities live in [0, 1]; denoiser strength ``sigma``
is quoted in 0-255 units in specs. For the wavelet denoiser it becomes the
intensity-domain threshold scale (``sigma / 255``); for the convolution
denoiser it maps to a Gaussian blur width of ``sigma / 10`` pixels. Both
maps are tunables, not claims.
"""

from __future__ import annotations

import io
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .blocks import GridPartition
from .denoisers import (ConvolutionDenoiser, Denoiser, IdentityDenoiser,
                        TransformShrinkDenoiser)
from .engine import DelayPolicy, delay_audit, run_async_bg, run_async_sg
from .operators import (LeastSquaresFidelity, MeasurementPartition,
                        PermutedColumnsOperator, BlockDiagonalGaussian,
                        build_radon, synthesize_measurements)
from .red_core import (BoundInputs, RedConfig, RedOperator,
                       fixed_point_direct_solve, nu_estimate, step_size_bound,
                       theoretical_bound_bg, theoretical_bound_sg)
from .solvers import SolverBudget, Trace, TraceRecord, bc_red, gm_red, sync_red

__all__ = [
    "Image",
    "shepp_logan",
    "snr_db",
    "ExperimentSpec",
    "ExperimentResult",
    "build_instance",
    "run_experiment",
    "bench_experiment",
    "trace_to_csv",
    "trace_from_csv",
    "save_pgm",
    "load_pgm",
    "write_artifacts",
    "desk_cs_spec",
    "desk_ct_spec",
    "paper_cs_spec",
    "paper_ct_spec",
]

CONV_WIDTH_PER_SIGMA = 0.1  # pixels of Gaussian blur per 0-255 sigma unit


@dataclass(frozen=True)
class Image:
    """Row-major grayscale image with nominal intensity range [0, 1]."""

    height: int
    width: int
    samples: np.ndarray

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if samples.shape != (self.height * self.width,):
            raise ValueError("sample count does not match geometry")
        if not np.all(np.isfinite(samples)):
            raise ValueError("image samples must be finite")
        object.__setattr__(self, "samples", samples)

    def as_array(self) -> np.ndarray:
        return self.samples.reshape(self.height, self.width)


# (intensity, half-axis a, half-axis b, center x, center y, rotation degrees)
_SHEPP_LOGAN_ELLIPSES = (
    (1.00, 0.6900, 0.9200, 0.00, 0.0000, 0.0),
    (-0.98, 0.6624, 0.8740, 0.00, -0.0184, 0.0),
    (-0.02, 0.1100, 0.3100, 0.22, 0.0000, -18.0),
    (-0.02, 0.1600, 0.4100, -0.22, 0.0000, 18.0),
    (0.01, 0.2100, 0.2500, 0.00, 0.3500, 0.0),
    (0.01, 0.0460, 0.0460, 0.00, 0.1000, 0.0),
    (0.01, 0.0460, 0.0460, 0.00, -0.1000, 0.0),
    (0.01, 0.0460, 0.0230, -0.08, -0.6050, 0.0),
    (0.01, 0.0230, 0.0230, 0.00, -0.6060, 0.0),
    (0.01, 0.0230, 0.0460, 0.06, -0.6050, 0.0),
)


def shepp_logan(n_pix: int, supersample: int = 4) -> Image:
    """Classic ten-ellipse head phantom, box-averaged over subpixel samples."""
    if n_pix < 16:
        raise ValueError("phantom needs n_pix >= 16")
    m = n_pix * supersample
    coords = (np.arange(m) + 0.5) * 2.0 / m - 1.0
    x = coords[None, :]
    y = -coords[:, None]
    img = np.zeros((m, m))
    for inten, a, b, x0, y0, deg in _SHEPP_LOGAN_ELLIPSES:
        phi = math.radians(deg)
        u = (x - x0) * math.cos(phi) + (y - y0) * math.sin(phi)
        v = -(x - x0) * math.sin(phi) + (y - y0) * math.cos(phi)
        img += inten * ((u / a) ** 2 + (v / b) ** 2 <= 1.0)
    img = np.clip(img, 0.0, 1.0)
    img = img.reshape(n_pix, supersample, n_pix, supersample).mean(axis=(1, 3))
    return Image(n_pix, n_pix, img.reshape(-1))


def snr_db(x_hat: np.ndarray, x_true: np.ndarray) -> float:
    """``20 log10(||x_true|| / ||x_true - x_hat||)``; +inf for exact recovery."""
    x_hat = np.asarray(x_hat, dtype=np.float64).reshape(-1)
    x_true = np.asarray(x_true, dtype=np.float64).reshape(-1)
    if x_hat.shape != x_true.shape:
        raise ValueError("x_hat and x_true must have equal length")
    ref = np.linalg.norm(x_true)
    if ref == 0.0:
        raise ValueError("SNR undefined for an all-zero reference")
    err = np.linalg.norm(x_true - x_hat)
    if err == 0.0:
        return math.inf
    return 20.0 * math.log10(ref / err)


class GridSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")
    block_h: int = Field(ge=1)
    block_w: int = Field(ge=1)


class DenoiserSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")
    kind: Literal["identity", "conv", "haar"] = "conv"
    sigma: float = Field(default=15.0, ge=0.0, description="noise level, 0-255 units")
    levels: int = Field(default=2, ge=0, description="haar decomposition levels")
    block_local: bool = False


class DelaySpec(BaseModel):
    model_config = ConfigDict(extra="forbid")
    mode: Literal["measure", "enforce"] = "measure"
    lambda_max: int = Field(default=0, ge=0)


class BudgetSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")
    max_outer_iterations: int | None = Field(default=None, ge=1)
    max_wall_ms: float | None = Field(default=None, gt=0)

    @model_validator(mode="after")
    def _at_least_one(self):
        if self.max_outer_iterations is None and self.max_wall_ms is None:
            raise ValueError("set max_outer_iterations and/or max_wall_ms")
        return self

    def to_budget(self) -> SolverBudget:
        return SolverBudget(self.max_outer_iterations, self.max_wall_ms)


class ExperimentSpec(BaseModel):
    """Complete description of one reconstruction run."""

    model_config = ConfigDict(extra="forbid")

    task: Literal["cs", "ct"]
    image_source: Literal["phantom", "file"] = "phantom"
    image_path: str | None = None
    size: int = Field(default=64, ge=16)
    block: GridSpec
    compression_ratio: float | None = Field(default=None, gt=0)
    n_angles: int | None = Field(default=None, ge=1)
    n_detectors: int | None = Field(default=None, ge=1)
    input_snr_db: float | None = Field(
        default=30.0, description="null means noise-free measurements")
    denoiser: DenoiserSpec = DenoiserSpec()
    tau: float | None = Field(default=None, gt=0)
    tau_rel: float | None = Field(
        default=None, gt=0, description="tau as a fraction of the measured L")
    gamma: Union[float, Literal["auto"]] = "auto"
    solver: Literal["gm", "bc", "sync", "async-bg", "async-sg"] = "bc"
    n_workers: int = Field(default=1, ge=1)
    w: int = Field(default=1, ge=1, description="minibatch size")
    ell: int = Field(default=1, ge=1, description="measurement blocks")
    delay: DelaySpec = DelaySpec()
    budget: BudgetSpec
    seed: int = 0
    record_every: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _consistent(self):
        problems = []
        if self.task == "cs":
            if self.compression_ratio is None:
                problems.append("cs task requires compression_ratio")
            if self.n_angles is not None or self.n_detectors is not None:
                problems.append("angles/detectors are ct-only fields")
        else:
            if self.n_angles is None or self.n_detectors is None:
                problems.append("ct task requires n_angles and n_detectors")
            if self.compression_ratio is not None:
                problems.append("compression_ratio is a cs-only field")
            if self.ell > (self.n_angles or 0):
                problems.append("ell cannot exceed n_angles")
        if self.image_source == "file" and not self.image_path:
            problems.append("image_source 'file' requires image_path")
        if isinstance(self.gamma, float) and self.gamma <= 0:
            problems.append("gamma must be positive or 'auto'")
        if self.tau is None and self.tau_rel is None:
            problems.append("set tau or tau_rel")
        if self.tau is not None and self.tau_rel is not None:
            problems.append("tau and tau_rel are mutually exclusive")
        stochastic = self.solver in ("async-sg",)
        if stochastic and self.ell == 1 and self.w > 1:
            problems.append("w > 1 is meaningless with a single measurement block")
        if self.task == "cs" and self.ell > 1:
            gh = self.size // self.block.block_h
            gw = self.size // self.block.block_w
            if self.ell != gh * gw:
                problems.append(
                    "cs measurement blocks must align with variable blocks "
                    "(ell == number of blocks) or be 1")
        if self.size % self.block.block_h or self.size % self.block.block_w:
            problems.append("block shape must divide the image size")
        if problems:
            raise ValueError("; ".join(problems))
        return self


@dataclass
class InstanceParts:
    """Everything assembled from a spec before solving."""

    spec: ExperimentSpec
    grid: GridPartition
    red_op: RedOperator
    x0: np.ndarray
    x_true: np.ndarray  # block-major
    y: np.ndarray
    phantom: Image


def _make_denoiser(d: DenoiserSpec) -> Denoiser:
    if d.kind == "identity":
        return IdentityDenoiser()
    if d.kind == "conv":
        width = max(0.4, d.sigma * CONV_WIDTH_PER_SIGMA)
        return ConvolutionDenoiser.gaussian(width, sigma=d.sigma / 255.0)
    return TransformShrinkDenoiser(sigma=d.sigma / 255.0, levels=d.levels)


def _load_image(spec: ExperimentSpec) -> Image:
    if spec.image_source == "phantom":
        return shepp_logan(spec.size)
    img = load_pgm(Path(spec.image_path).read_bytes())
    if img.height != spec.size or img.width != spec.size:
        raise ValueError(
            f"image file is {img.height}x{img.width}, spec says {spec.size}")
    return img


def build_instance(spec: ExperimentSpec) -> InstanceParts:
    """Assemble operators, measurements, and the starting point for a spec."""
    phantom = _load_image(spec)
    grid = GridPartition(spec.size, spec.size, spec.block.block_h, spec.block.block_w)
    x_true = grid.to_block_major(phantom.samples)

    if spec.task == "cs":
        sizes = grid.partition.block_sizes
        row_counts = np.maximum(1, np.floor(spec.compression_ratio * sizes)).astype(np.int64)
        A = BlockDiagonalGaussian(grid.partition, row_counts, seed=spec.seed)
        if spec.ell > 1:
            mp = MeasurementPartition.from_sizes(row_counts)
        else:
            mp = MeasurementPartition.uniform(A.rows, 1)
    else:
        radon = build_radon(spec.size, spec.n_angles, spec.n_detectors)
        A = PermutedColumnsOperator(radon, grid)
        if spec.ell > 1:
            angle_groups = np.diff(
                np.linspace(0, spec.n_angles, spec.ell + 1).astype(np.int64))
            mp = MeasurementPartition.from_sizes(angle_groups * spec.n_detectors)
        else:
            mp = MeasurementPartition.uniform(A.rows, 1)

    snr = math.inf if spec.input_snr_db is None else spec.input_snr_db
    y = synthesize_measurements(A, x_true, snr, seed=spec.seed + 1)
    fidelity = LeastSquaresFidelity(A, y, mp)
    denoiser = _make_denoiser(spec.denoiser)
    tau = spec.tau if spec.tau is not None else spec.tau_rel * fidelity.lipschitz
    red_op = RedOperator(fidelity, denoiser, tau, grid=grid,
                         block_local_denoise=spec.denoiser.block_local)

    if spec.task == "ct":
        bp = A.apply_adjoint(y)
        abp = A.apply(bp)
        c = float(abp @ y) / float(abp @ abp)
        x0 = c * bp
    else:
        x0 = np.zeros(grid.n)
    return InstanceParts(spec, grid, red_op, x0, x_true, y, phantom)


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    trace: Trace
    final_image: Image
    report: dict


def _resolve_gamma(spec: ExperimentSpec, red_op: RedOperator) -> float:
    if spec.gamma != "auto":
        return float(spec.gamma)
    lam = spec.delay.lambda_max if spec.delay.mode == "enforce" else 0
    return step_size_bound(red_op.fidelity.lipschitz, red_op.tau, lam)


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    """Execute a spec and assemble its report.

    The report always carries the measured Lipschitz constant, the stepsize
    actually used, the delay statistics for asynchronous runs, the gradient
    noise estimate for minibatch runs, and the theoretical bound matching
    the run's schedule, evaluated at the final update count.
    """
    parts = build_instance(spec)
    r, grid = parts.red_op, parts.grid
    cfg = RedConfig(tau=r.tau, gamma=_resolve_gamma(spec, r),
                    sigma=spec.denoiser.sigma)
    budget = spec.budget.to_budget()
    snr_fn = lambda x: snr_db(x, parts.x_true)  # noqa: E731 - permutation-invariant

    start = time.monotonic()
    reports = None
    if spec.solver == "gm":
        x, trace = gm_red(r, cfg, parts.x0, budget, snr_fn, spec.record_every)
    elif spec.solver == "bc":
        x, trace = bc_red(r, cfg, parts.x0, budget, spec.seed, snr_fn,
                          spec.record_every)
    elif spec.solver == "sync":
        x, trace = sync_red(r, cfg, parts.x0, budget, spec.n_workers, snr_fn,
                            spec.record_every)
    elif spec.solver == "async-bg":
        policy = DelayPolicy(spec.delay.mode, spec.delay.lambda_max)
        x, trace, reports = run_async_bg(r, cfg, parts.x0, spec.n_workers,
                                         budget, policy, spec.seed, snr_fn,
                                         spec.record_every)
    else:
        policy = DelayPolicy(spec.delay.mode, spec.delay.lambda_max)
        x, trace, reports = run_async_sg(r, cfg, parts.x0, spec.n_workers,
                                         spec.w, budget, policy, spec.seed,
                                         snr_fn, spec.record_every)
    elapsed_s = time.monotonic() - start

    # bound bookkeeping: gm/sync/sg walk the full-step trajectory (b = 1 in
    # the rate formulas); bc/async count one update per block
    per_block = spec.solver in ("bc", "async-bg", "async-sg")
    b_eff = r.b if per_block else 1
    t_updates = trace.final.iteration * b_eff
    if reports is not None:
        audit = delay_audit(reports)
        lam = (spec.delay.lambda_max if spec.delay.mode == "enforce"
               else audit["max_delay"])
    else:
        audit = None
        lam = 0

    r0_estimated = True
    if r.denoiser.is_linear and r.n <= 4096:
        x_star = fixed_point_direct_solve(r)
        r0 = float(np.linalg.norm(parts.x0 - x_star))
        r0_estimated = False
    else:
        r0 = float(np.linalg.norm(parts.x0 - x))

    stochastic = spec.solver == "async-sg"
    nu_hat = 0.0
    if stochastic and r.fidelity.ell > 1:
        nu_hat = nu_estimate(r, [parts.x0, x], draws=400, seed=spec.seed + 2)
    inputs = BoundInputs(t=max(t_updates, 1), b=b_eff, gamma=cfg.gamma,
                         L=r.fidelity.lipschitz, tau=r.tau, lam=lam, R0=r0,
                         nu=nu_hat, w=spec.w)
    report = {
        "L": r.fidelity.lipschitz,
        "gamma": cfg.gamma,
        "tau": r.tau,
        "lambda": lam,
        "nu_hat": nu_hat,
        "t": t_updates,
        "bound_bg": theoretical_bound_bg(inputs),
        "bound_sg": theoretical_bound_sg(inputs),
        "min_res_sq": trace.min_res_sq,
        "final_snr_db": trace.final.snr_db,
        "initial_snr_db": trace.records[0].snr_db,
        "final_norm_res": trace.final.norm_res,
        "R0": r0,
        "R0_estimated": r0_estimated,
        "elapsed_s": elapsed_s,
        "updates_per_s": t_updates / elapsed_s if elapsed_s > 0 else 0.0,
        "delay_audit": audit,
        "solver": spec.solver,
        "stochastic": stochastic,
    }
    final = Image(grid.height, grid.width, np.clip(grid.to_row_major(x), 0.0, 1.0))
    return ExperimentResult(spec, trace, final, report)


def bench_experiment(spec: ExperimentSpec, workers: list[int],
                     target_norm_res: float = 1e-3) -> list[dict]:
    """Run the same spec at several worker counts and tabulate throughput."""
    if spec.solver not in ("async-bg", "async-sg"):
        raise ValueError("bench requires an asynchronous solver spec")
    rows = []
    for n in workers:
        run_spec = spec.model_copy(update={"n_workers": n})
        result = run_experiment(run_spec)
        wall_to_target = None
        for rec in result.trace.records:
            if rec.norm_res <= target_norm_res:
                wall_to_target = rec.wall_ms
                break
        rows.append({
            "workers": n,
            "updates_per_sec": result.report["updates_per_s"],
            "wall_ms_to_target_res": wall_to_target,
        })
    return rows


def _fmt(value: float | None) -> str:
    if value is None:
        return ""
    return f"{value:.17g}"


def trace_to_csv(trace: Trace) -> str:
    lines = ["iter,wall_ms,res_sq,norm_res,snr_db,min_res_sq"]
    for rec in trace.records:
        lines.append(",".join([
            str(rec.iteration), _fmt(rec.wall_ms), _fmt(rec.res_sq),
            _fmt(rec.norm_res), _fmt(rec.snr_db), _fmt(rec.min_res_sq),
        ]))
    return "\n".join(lines) + "\n"


def trace_from_csv(text: str) -> Trace:
    lines = [ln for ln in text.splitlines() if ln]
    if not lines or lines[0] != "iter,wall_ms,res_sq,norm_res,snr_db,min_res_sq":
        raise ValueError("unexpected trace header")
    trace = Trace()
    for ln in lines[1:]:
        it, wall, res, norm, snr, mn = ln.split(",")
        trace.records.append(TraceRecord(
            int(it), float(wall), float(res), float(norm),
            float(snr) if snr else None, float(mn)))
    return trace


def save_pgm(img: Image) -> bytes:
    """16-bit binary PGM (P5, maxval 65535), linear [0,1] mapping."""
    header = f"P5\n{img.width} {img.height}\n65535\n".encode("ascii")
    levels = np.round(np.clip(img.samples, 0.0, 1.0) * 65535.0).astype(">u2")
    return header + levels.tobytes()


class PgmParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def load_pgm(data: bytes) -> Image:
    pos = 0

    def token() -> str:
        nonlocal pos
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":  # comment line
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            return token()
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PgmParseError("unexpected end of header", start)
        return data[start:pos].decode("ascii", errors="replace")

    magic = token()
    if magic == "P3" or magic == "P2":
        raise PgmParseError(f"ASCII PGM ({magic}) is not supported, need binary P5", 0)
    if magic != "P5":
        raise PgmParseError(f"not a PGM file (magic {magic!r})", 0)
    try:
        width, height, maxval = int(token()), int(token()), int(token())
    except ValueError as exc:
        raise PgmParseError(f"malformed header field: {exc}", pos) from None
    if maxval != 65535:
        raise PgmParseError(f"expected maxval 65535, got {maxval}", pos)
    pos += 1  # single whitespace byte after maxval
    expected = width * height * 2
    raster = data[pos:pos + expected]
    if len(raster) != expected:
        raise PgmParseError(
            f"raster truncated: expected {expected} bytes, got {len(raster)}", pos)
    samples = np.frombuffer(raster, dtype=">u2").astype(np.float64) / 65535.0
    return Image(height, width, samples)


def write_artifacts(result: ExperimentResult, out_dir: Path) -> None:
    """Lay out ``spec.json``, ``trace.csv``, ``final.pgm`` and ``report.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "spec.json").write_text(
        json.dumps(result.spec.model_dump(), indent=2) + "\n")
    (out_dir / "trace.csv").write_text(trace_to_csv(result.trace))
    (out_dir / "final.pgm").write_bytes(save_pgm(result.final_image))
    (out_dir / "report.json").write_text(
        json.dumps(result.report, indent=2, default=float) + "\n")


def desk_cs_spec(**overrides) -> ExperimentSpec:
    """Desk-scale compressive sensing recipe: 64x64 phantom, 2x2 grid of
    32x32 blocks at compression ratio 0.7 (716 rows per block)."""
    base = dict(
        task="cs", size=64, block=GridSpec(block_h=32, block_w=32),
        compression_ratio=0.7, input_snr_db=30.0,
        denoiser=DenoiserSpec(kind="conv", sigma=15.0),
        tau_rel=0.1, gamma="auto", solver="async-bg", n_workers=4,
        delay=DelaySpec(mode="measure"),
        budget=BudgetSpec(max_outer_iterations=300), seed=7,
    )
    base.update(overrides)
    return ExperimentSpec(**base)


def desk_ct_spec(**overrides) -> ExperimentSpec:
    """Desk-scale tomography smoke recipe: 64x64 phantom, 60 angles and 95
    detectors, 70 dB measurements, 4 blocks, asynchronous batch solver."""
    base = dict(
        task="ct", size=64, block=GridSpec(block_h=32, block_w=32),
        n_angles=60, n_detectors=95, input_snr_db=70.0,
        denoiser=DenoiserSpec(kind="conv", sigma=8.0),
        tau_rel=0.02, gamma="auto", solver="async-bg", n_workers=4,
        delay=DelaySpec(mode="measure"),
        budget=BudgetSpec(max_outer_iterations=200), seed=11,
    )
    base.update(overrides)
    return ExperimentSpec(**base)


def paper_cs_spec() -> ExperimentSpec:
    """Full-scale CS configuration documented for reference: 240x240 images,
    a 3x3 grid of 80x80 blocks, ratio 0.7 (4480 rows per block), 30 dB."""
    return ExperimentSpec(
        task="cs", size=240, block=GridSpec(block_h=80, block_w=80),
        compression_ratio=0.7, input_snr_db=30.0,
        denoiser=DenoiserSpec(kind="haar", sigma=15.0, levels=3),
        tau_rel=0.1, gamma="auto", solver="async-bg", n_workers=8,
        budget=BudgetSpec(max_outer_iterations=2000), seed=0,
    )


def paper_ct_spec() -> ExperimentSpec:
    """Full-scale CT configuration documented for reference: 800x800 image,
    16 blocks of 200x200, 180 angles with 1131 detectors, 70 dB."""
    return ExperimentSpec(
        task="ct", size=800, block=GridSpec(block_h=200, block_w=200),
        n_angles=180, n_detectors=1131, input_snr_db=70.0,
        denoiser=DenoiserSpec(kind="haar", sigma=10.0, levels=3),
        tau_rel=0.05, gamma="auto", solver="async-sg", n_workers=8, w=60,
        ell=180, budget=BudgetSpec(max_wall_ms=3_600_000), seed=0,
    )
