"""Property suites certifying the operator-theory assumptions numerically.

Each suite returns a list of :class:`CheckResult`; a suite passes when every
check does. Suites are deliberately oracle-heavy: gradients are compared
against finite differences, spectral norms against dense SVDs, stochastic
estimators against Monte-Carlo statistics, and every iterative solver
against a conjugate-gradient fixed point computed independently of the
iteration under test.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .blocks import GridPartition, make_uniform_partition
from .denoisers import (ConvolutionDenoiser, Denoiser, GainDenoiser,
                        IdentityDenoiser, TransformShrinkDenoiser,
                        check_nonexpansive)
from .engine import (DelayPolicy, StalenessSchedule, memory_stress,
                     run_async_bg, run_simulated)
from .operators import (BlockDiagonalGaussian, LeastSquaresFidelity,
                        MeasurementPartition, build_radon, lipschitz_estimate,
                        synthesize_measurements)
from .red_core import (BoundInputs, RedConfig, RedOperator,
                       cocoercivity_check, fixed_point_direct_solve,
                       nu_estimate, step_size_bound, theoretical_bound_bg,
                       theoretical_bound_sg)
from .solvers import SolverBudget, Trace, bc_red, gm_red, sg_red, sync_red

__all__ = [
    "CheckResult",
    "run_suite",
    "suite_names",
    "bg_bound_violations",
    "make_cs_instance",
]

SUITES = ("operators", "denoisers", "lemmas", "async", "bounds", "all")


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  [{self.detail}]" if self.detail else ""
        return f"{status}  {self.name}: value={self.value:.6g} threshold={self.threshold:.6g}{extra}"


def suite_names() -> tuple[str, ...]:
    return SUITES


def make_cs_instance(n_side: int, block_side, ratio: float,
                     denoiser: Denoiser, tau_rel: float, seed: int,
                     ell_blocks: bool = False,
                     input_snr_db: float = 30.0) -> tuple[RedOperator, np.ndarray]:
    """Small compressive-sensing instance on a square grid.

    ``block_side`` is an edge length or a ``(block_h, block_w)`` pair.
    Returns the composite operator and the block-major ground truth used to
    synthesize the measurements.
    """
    bh, bw = (block_side, block_side) if np.isscalar(block_side) else block_side
    grid = GridPartition(n_side, n_side, bh, bw)
    rng = np.random.default_rng(seed)
    # smooth-ish ground truth in [0, 1]
    img = rng.random((n_side, n_side))
    for _ in range(2):
        img = 0.25 * (np.roll(img, 1, 0) + np.roll(img, -1, 0)
                      + np.roll(img, 1, 1) + np.roll(img, -1, 1))
    x_true = grid.to_block_major(img.reshape(-1))
    sizes = grid.partition.block_sizes
    rows = np.maximum(1, np.floor(ratio * sizes)).astype(np.int64)
    A = BlockDiagonalGaussian(grid.partition, rows, seed=seed)
    y = synthesize_measurements(A, x_true, input_snr_db, seed=seed + 1)
    mp = (MeasurementPartition.from_sizes(rows) if ell_blocks
          else MeasurementPartition.uniform(A.rows, 1))
    fid = LeastSquaresFidelity(A, y, mp)
    tau = tau_rel * fid.lipschitz
    return RedOperator(fid, denoiser, tau, grid=grid), x_true


def _radon_instance(denoiser: Denoiser, seed: int, tau_rel: float = 0.1,
                    n_side: int = 16) -> RedOperator:
    grid = GridPartition(n_side, n_side, n_side // 2, n_side // 2)
    radon = build_radon(n_side, 12, 3 * n_side // 2)
    from .operators import PermutedColumnsOperator

    A = PermutedColumnsOperator(radon, grid)
    rng = np.random.default_rng(seed)
    x_true = rng.random(grid.n)
    y = synthesize_measurements(A, x_true, 40.0, seed=seed + 1)
    fid = LeastSquaresFidelity(A, y)
    return RedOperator(fid, denoiser, tau_rel * fid.lipschitz, grid=grid)


# ---------------------------------------------------------------- operators


def _finite_diff_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def suite_operators(seed: int = 0, trials: int = 200) -> list[CheckResult]:
    checks: list[CheckResult] = []
    rng = np.random.default_rng(seed)

    part = make_uniform_partition(16, 4)
    A = BlockDiagonalGaussian(part, [11, 11, 11, 11], seed=seed)
    radon = build_radon(16, 10, 24)

    for name, op in (("block_diagonal", A), ("radon", radon)):
        worst = 0.0
        for _ in range(trials):
            x = rng.standard_normal(op.cols)
            r = rng.standard_normal(op.rows)
            lhs = float(op.apply(x) @ r)
            rhs = float(x @ op.apply_adjoint(r))
            scale = max(abs(lhs), abs(rhs), 1e-30)
            worst = max(worst, abs(lhs - rhs) / scale)
        checks.append(CheckResult(f"adjoint_consistency_{name}", worst <= 1e-10,
                                  worst, 1e-10))

    mp = MeasurementPartition.uniform(A.rows, 4)
    x = rng.standard_normal(A.cols)
    stacked = np.concatenate([A.apply_rows(x, j, mp) for j in range(mp.ell)])
    err = np.linalg.norm(stacked - A.apply(x)) / np.linalg.norm(A.apply(x))
    checks.append(CheckResult("row_block_stacking", err <= 1e-12, err, 1e-12))

    # gradient vs central finite differences on a small instance
    part8 = make_uniform_partition(8, 2)
    A8 = BlockDiagonalGaussian(part8, [3, 3], seed=seed + 2)
    y8 = rng.standard_normal(6)
    fid = LeastSquaresFidelity(A8, y8, MeasurementPartition.uniform(6, 3))
    x8 = rng.standard_normal(8)
    fd = _finite_diff_grad(fid.g_value, x8)
    g = fid.grad_full(x8)
    err = np.linalg.norm(fd - g) / np.linalg.norm(g)
    checks.append(CheckResult("grad_matches_finite_diff", err < 1e-6, err, 1e-6))

    worst = 0.0
    for j in range(fid.ell):
        fdj = _finite_diff_grad(lambda v: fid.g_component_value(v, j), x8)
        gj = fid.grad_component(x8, j)
        worst = max(worst, np.linalg.norm(fdj - gj) / max(np.linalg.norm(gj), 1e-30))
    checks.append(CheckResult("component_grad_matches_finite_diff",
                              worst < 1e-6, worst, 1e-6))

    mean = sum(fid.grad_component(x8, j) for j in range(fid.ell)) / fid.ell
    err = np.linalg.norm(mean - fid.grad_full(x8)) / np.linalg.norm(fid.grad_full(x8))
    checks.append(CheckResult("component_mean_identity", err < 1e-12, err, 1e-12))

    # Lipschitz estimate vs dense SVD on a random 20x16 Gaussian block
    dense_part = make_uniform_partition(16, 1)
    Ad = BlockDiagonalGaussian(dense_part, [20], seed=seed + 3)
    est = lipschitz_estimate(Ad, iters=500, tol=1e-14)
    svd = 2.0 * np.linalg.svd(Ad.block_matrices[0], compute_uv=False)[0] ** 2
    err = abs(est - svd) / svd
    checks.append(CheckResult("lipschitz_vs_svd", err < 1e-6, err, 1e-6,
                              detail=f"power={est:.8g} svd={svd:.8g}"))

    # gradient cocoercivity with constant 1/L and convexity of g
    L = fid.lipschitz
    min_margin, min_gap = math.inf, math.inf
    for _ in range(trials):
        u = rng.standard_normal(8)
        v = rng.standard_normal(8)
        d = fid.grad_full(u) - fid.grad_full(v)
        min_margin = min(min_margin, float(d @ (u - v)) - float(d @ d) / L)
        min_gap = min(min_gap, fid.g_value(v) - fid.g_value(u)
                      - float(fid.grad_full(u) @ (v - u)))
    checks.append(CheckResult("grad_cocoercive_1_over_L", min_margin >= -1e-9,
                              min_margin, -1e-9))
    checks.append(CheckResult("fidelity_convexity", min_gap >= -1e-9,
                              min_gap, -1e-9))

    # block-diagonal locality: other blocks cannot influence a block gradient
    xa = rng.standard_normal(16)
    xb = xa.copy()
    xb[part.block_slice(1)] += rng.standard_normal(4)
    fid16 = LeastSquaresFidelity(A, rng.standard_normal(A.rows))
    same = np.array_equal(fid16.grad_block(xa, part, 0), fid16.grad_block(xb, part, 0))
    checks.append(CheckResult("block_gradient_locality", same, float(same), 1.0))

    # realized SNR of synthesized measurements
    big = BlockDiagonalGaussian(make_uniform_partition(64, 1), [1500], seed=seed + 4)
    xt = rng.random(64) + 0.5
    clean = big.apply(xt)
    ys = synthesize_measurements(big, xt, 30.0, seed=seed + 5)
    realized = 20.0 * math.log10(np.linalg.norm(clean) / np.linalg.norm(ys - clean))
    checks.append(CheckResult("synthesized_snr_within_half_db",
                              abs(realized - 30.0) <= 0.5, realized - 30.0, 0.5))

    # hand geometry: one vertical ray through an all-ones 4x4 image sums to 4
    r4 = build_radon(4, 1, 4)
    sums = np.asarray(r4.matrix @ np.ones(16))
    expect = np.array([0.0, 4.0, 4.0, 0.0])  # outer rays miss, inner cross 4 units
    err = float(np.abs(sums - expect).max())
    checks.append(CheckResult("radon_vertical_ray_lengths", err < 1e-9, err, 1e-9,
                              detail=f"row sums {np.round(sums, 6).tolist()}"))
    return checks


# ---------------------------------------------------------------- denoisers


def suite_denoisers(seed: int = 0, trials: int = 500) -> list[CheckResult]:
    checks: list[CheckResult] = []
    geometries = [(8, 8), (16, 16), (8, 16)]
    conv = ConvolutionDenoiser.gaussian(0.8)
    haar = TransformShrinkDenoiser(sigma=0.05, levels=2)
    builtins = [("identity", IdentityDenoiser()), ("conv", conv), ("haar", haar)]

    per_geom = max(1, trials // len(geometries))
    for name, d in builtins:
        worst = 0.0
        for g_idx, geom in enumerate(geometries):
            worst = max(worst, check_nonexpansive(d, per_geom, geom, seed + g_idx))
        checks.append(CheckResult(f"nonexpansive_{name}", worst <= 1.0 + 1e-7,
                                  worst, 1.0 + 1e-7))

    ratio = check_nonexpansive(IdentityDenoiser(), 10, (8, 8), seed)
    checks.append(CheckResult("identity_ratio_exactly_one", ratio == 1.0, ratio, 1.0))

    bound = conv.spectrum_max((16, 16))
    sampled = check_nonexpansive(conv, per_geom, (16, 16), seed)
    checks.append(CheckResult("conv_ratio_below_dft_bound",
                              sampled <= bound + 1e-9, sampled, bound))

    # convex combinations of nonexpansive maps stay nonexpansive
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(min(trials, 200)):
        alpha = rng.uniform(0.05, 0.95)
        x = rng.standard_normal(64)
        y = rng.standard_normal(64)
        tx = (1 - alpha) * conv.apply(x, (8, 8)) + alpha * haar.apply(x, (8, 8))
        ty = (1 - alpha) * conv.apply(y, (8, 8)) + alpha * haar.apply(y, (8, 8))
        worst = max(worst, np.linalg.norm(tx - ty) / np.linalg.norm(x - y))
    checks.append(CheckResult("convex_combination_nonexpansive",
                              worst <= 1.0 + 1e-7, worst, 1.0 + 1e-7))

    # cocoercivity <-> nonexpansive complement, on linear maps
    geom = (8, 8)

    def t_map(z, scale):
        return 0.5 * (z - scale * conv.apply(z, geom))

    good_margin, good_ratio = math.inf, 0.0
    bad_margin, bad_ratio = math.inf, 0.0
    for _ in range(min(trials, 200)):
        x = rng.standard_normal(64)
        y = rng.standard_normal(64)
        h = x - y
        for scale, is_good in ((1.0, True), (3.0, False)):
            d = t_map(x, scale) - t_map(y, scale)
            margin = float(d @ h) - float(d @ d)
            refl = np.linalg.norm(h - 2 * d) / np.linalg.norm(h)
            if is_good:
                good_margin = min(good_margin, margin)
                good_ratio = max(good_ratio, refl)
            else:
                bad_margin = min(bad_margin, margin)
                bad_ratio = max(bad_ratio, refl)
    checks.append(CheckResult("firmly_nonexpansive_residual_margin",
                              good_margin >= -1e-7, good_margin, -1e-7))
    checks.append(CheckResult("reflection_nonexpansive_when_cocoercive",
                              good_ratio <= 1.0 + 1e-7, good_ratio, 1.0 + 1e-7))
    checks.append(CheckResult("cocoercivity_fails_with_expansive_reflection",
                              bad_margin < 0 and bad_ratio > 1.0, bad_margin, 0.0,
                              detail=f"reflection ratio {bad_ratio:.3f}"))

    # frozen hand value: 1-level haar of a constant 2x2 block, threshold 0.5
    d = TransformShrinkDenoiser(sigma=0.5, levels=1, thresh_scale=1.0)
    out = d.apply(np.ones(4), (2, 2))
    err = float(np.abs(out - 0.75).max())
    checks.append(CheckResult("haar_shrink_hand_value", err < 1e-12, err, 1e-12))

    out = conv.apply(np.full(64, 0.37), (8, 8))
    err = float(np.abs(out - 0.37).max())
    checks.append(CheckResult("conv_preserves_constants", err < 1e-12, err, 1e-12))
    return checks


# ------------------------------------------------------------------- lemmas


def suite_lemmas(seed: int = 0, trials: int = 500) -> list[CheckResult]:
    checks: list[CheckResult] = []
    denoisers = [
        ("identity", IdentityDenoiser()),
        ("conv", ConvolutionDenoiser.gaussian(0.8)),
        ("haar", TransformShrinkDenoiser(sigma=0.05, levels=2)),
    ]
    per_seed = max(1, trials // 3)
    for dname, den in denoisers:
        for fname, build in (("cs", lambda d, s: make_cs_instance(8, 4, 0.8, d, 0.1, s)[0]),
                             ("radon", _radon_instance)):
            worst = math.inf
            scale = 0.0
            for s in range(3):
                r = build(den, seed + 10 * s)
                margin, sc = cocoercivity_check(r, per_seed, seed=seed + s)
                worst = min(worst, margin)
                scale = max(scale, sc)
            ok = worst >= -1e-8 * max(scale, 1.0)
            checks.append(CheckResult(f"cocoercive_{fname}_{dname}", ok, worst,
                                      -1e-8 * max(scale, 1.0)))

    # negative control: a 3-Lipschitz "denoiser" must break cocoercivity
    bad = make_cs_instance(8, 4, 1.0, GainDenoiser(3.0), 1.0, seed)[0]
    margin, _ = cocoercivity_check(bad, 100, seed=seed)
    checks.append(CheckResult("cocoercivity_negative_control", margin < 0,
                              margin, 0.0))

    # composite operator is (L + 2 tau)-Lipschitz
    rng = np.random.default_rng(seed)
    r = make_cs_instance(8, 4, 0.8, ConvolutionDenoiser.gaussian(0.8), 0.1, seed)[0]
    lip = r.lipschitz
    worst = 0.0
    for _ in range(min(trials, 200)):
        x = rng.standard_normal(r.n)
        y = rng.standard_normal(r.n)
        worst = max(worst, np.linalg.norm(r.apply(x) - r.apply(y))
                    / (lip * np.linalg.norm(x - y)))
    checks.append(CheckResult("composite_lipschitz", worst <= 1.0 + 1e-7,
                              worst, 1.0 + 1e-7))

    # unbiasedness and variance contraction of the minibatch operator
    r, _ = make_cs_instance(8, 4, 1.0, ConvolutionDenoiser.gaussian(0.8), 0.1,
                            seed + 1, ell_blocks=True)
    x = rng.standard_normal(r.n)
    g = r.apply(x)
    draws = 10_000
    rng_mc = np.random.default_rng(seed + 2)
    samples = np.empty((draws, r.n))
    for k in range(draws):
        samples[k] = r.apply_stochastic(x, 1, rng_mc)
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / math.sqrt(draws)
    z = np.abs(mean - g) / np.maximum(se, 1e-30)
    zmax = float(z.max())
    checks.append(CheckResult("minibatch_unbiased_3se", zmax <= 3.0, zmax, 3.0))

    var1 = float(((samples - g) ** 2).sum(axis=1).mean())
    dev4 = np.empty(draws)
    for k in range(draws):
        d = r.apply_stochastic(x, 4, rng_mc) - g
        dev4[k] = float(d @ d)
    var4 = float(dev4.mean())
    ratio = var1 / var4
    checks.append(CheckResult("minibatch_variance_ratio_w4", 3.3 <= ratio <= 4.7,
                              ratio, 4.0, detail=f"var1={var1:.4g} var4={var4:.4g}"))

    nu = nu_estimate(r, [x], draws=2000, seed=seed + 3)
    ok = var1 <= nu * nu * 1.2 + 1e-12
    checks.append(CheckResult("variance_below_nu_sq", ok, var1, nu * nu * 1.2))
    return checks


# -------------------------------------------------------------------- async


def suite_async(seed: int = 0, trials: int = 500) -> list[CheckResult]:
    checks: list[CheckResult] = []
    n_updates = max(1000, 2000 * trials)  # default trials=500 -> 1e6 updates

    stress = memory_stress(n_updates=n_updates, n_workers=8, seed=seed)
    checks.append(CheckResult("stress_zero_torn_reads", stress.violations == 0,
                              float(stress.violations), 0.0,
                              detail=f"{stress.updates} updates, "
                                     f"{stress.read_retries} retries, "
                                     f"{stress.elapsed_s:.1f}s"))
    checks.append(CheckResult("stress_no_lost_updates",
                              stress.published_total == stress.final_counter,
                              float(stress.published_total), float(stress.final_counter)))

    enforced = memory_stress(n_updates=max(1000, n_updates // 10), n_workers=8,
                             seed=seed + 1, enforce_lambda=3)
    worst = max(rep.max_delay for rep in enforced.reports)
    checks.append(CheckResult("enforce_mode_delay_bound", worst <= 3,
                              float(worst), 3.0,
                              detail=f"stalls={enforced.stalls}"))

    # limit agreement: enforced async runs land on the direct-solve zero
    den = ConvolutionDenoiser.gaussian(0.8)
    r, _ = make_cs_instance(8, 4, 0.9, den, 0.1, seed + 2)
    x_star = fixed_point_direct_solve(r)
    x0 = np.zeros(r.n)
    scale = max(1.0, float(np.linalg.norm(x_star)))
    L = r.fidelity.lipschitz
    worst_rel = 0.0
    for lam in (0, 2, 4, 8):
        gamma = step_size_bound(L, r.tau, lam)
        cfg = RedConfig(tau=r.tau, gamma=gamma)
        iters = 700 * (1 + 2 * lam)
        x, trace, _ = run_async_bg(r, cfg, x0, n_workers=4,
                                   budget=SolverBudget(iters),
                                   policy=DelayPolicy("enforce", lam),
                                   seed=seed, record_every=max(1, iters // 50))
        worst_rel = max(worst_rel, float(np.linalg.norm(x - x_star)) / scale)
    checks.append(CheckResult("async_limits_agree_with_oracle", worst_rel <= 1e-5,
                              worst_rel, 1e-5))

    # zero-delay replay is bit-identical to the serial block solver
    cfg = RedConfig(tau=r.tau, gamma=step_size_bound(L, r.tau, 0))
    rng = np.random.default_rng([seed, 0])
    n_events = 50 * r.b
    blocks = [int(rng.integers(r.b)) for _ in range(n_events)]
    x_sim, _, _ = run_simulated(r, cfg, x0, StalenessSchedule.zero_delay(blocks),
                                log_stale=False)
    x_bc, _ = bc_red(r, cfg, x0, SolverBudget(n_events // r.b), seed=seed)
    identical = np.array_equal(x_sim, x_bc)
    checks.append(CheckResult("zero_delay_replay_bit_identical", identical,
                              float(np.abs(x_sim - x_bc).max()), 0.0))

    # threaded run replays exactly from its harvested schedule
    x_th, _, _, sched = run_async_bg(r, cfg, x0, n_workers=2,
                                     budget=SolverBudget(40), seed=seed,
                                     harvest_schedule=True)
    x_replay, _, _ = run_simulated(r, cfg, x0, sched, log_stale=False)
    err = float(np.abs(x_th - x_replay).max() / max(1.0, np.abs(x_th).max()))
    checks.append(CheckResult("harvested_schedule_replays", err <= 1e-12, err, 1e-12,
                              detail=f"{len(sched)} events, max delay {sched.max_delay}"))
    return checks


# ------------------------------------------------------------------- bounds


def bg_bound_violations(trace: Trace, b_eff: int, gamma: float, L: float,
                        tau: float, lam: int, R0: float,
                        nu: float = 0.0, w: int = 1) -> tuple[int, float]:
    """Check the rate bound at every recorded update count.

    For record ``j`` with outer index ``I_j`` the bound is evaluated at
    ``t = I_j * b`` and compared against the smallest residual among strictly
    earlier records (their iterates all predate ``t``). Returns the number of
    violations and the worst bound/min ratio margin (min over records of
    ``bound - observed``).
    """
    violations = 0
    worst = math.inf
    running = math.inf
    for j, rec in enumerate(trace.records):
        if j > 0:
            t = rec.iteration * b_eff
            inputs = BoundInputs(t=t, b=b_eff, gamma=gamma, L=L, tau=tau,
                                 lam=lam, R0=R0, nu=nu, w=w)
            bound = (theoretical_bound_sg(inputs) if nu > 0
                     else theoretical_bound_bg(inputs))
            if running > bound:
                violations += 1
            worst = min(worst, bound - running)
        running = min(running, rec.res_sq)
    return violations, worst


def suite_bounds(seed: int = 0, trials: int = 500) -> list[CheckResult]:
    checks: list[CheckResult] = []
    den = ConvolutionDenoiser.gaussian(0.8)
    r, _ = make_cs_instance(8, 4, 0.9, den, 0.1, seed)
    x_star = fixed_point_direct_solve(r)
    x0 = np.zeros(r.n)
    R0 = float(np.linalg.norm(x0 - x_star))
    L = r.fidelity.lipschitz
    scale = max(1.0, float(np.linalg.norm(x_star)))

    gamma0 = step_size_bound(L, r.tau, 0)
    cfg = RedConfig(tau=r.tau, gamma=gamma0)
    budget = SolverBudget(600)
    runs = {
        "gm": (gm_red(r, cfg, x0, budget), 1, 0),
        "bc": (bc_red(r, cfg, x0, budget, seed=seed), r.b, 0),
        "sync": (sync_red(r, cfg, x0, budget, n_workers=2), 1, 0),
    }
    worst_rel = 0.0
    total_viol = 0
    for name, ((x, trace), b_eff, lam) in runs.items():
        worst_rel = max(worst_rel, float(np.linalg.norm(x - x_star)) / scale)
        v, _ = bg_bound_violations(trace, b_eff, gamma0, L, r.tau, lam, R0)
        total_viol += v
    checks.append(CheckResult("serial_solvers_reach_oracle", worst_rel <= 1e-5,
                              worst_rel, 1e-5))
    checks.append(CheckResult("theorem1_bound_serial", total_viol == 0,
                              float(total_viol), 0.0))

    lam = 3
    gamma_lam = step_size_bound(L, r.tau, lam)
    cfg_lam = RedConfig(tau=r.tau, gamma=gamma_lam)
    x, trace, reports = run_async_bg(r, cfg_lam, x0, n_workers=4,
                                     budget=SolverBudget(600 * (1 + 2 * lam)),
                                     policy=DelayPolicy("enforce", lam),
                                     seed=seed, record_every=40)
    v, _ = bg_bound_violations(trace, r.b, gamma_lam, L, r.tau, lam, R0)
    checks.append(CheckResult("theorem1_bound_async", v == 0, float(v), 0.0))
    rel = float(np.linalg.norm(x - x_star)) / scale
    checks.append(CheckResult("async_reaches_oracle", rel <= 1e-5, rel, 1e-5))

    # stochastic floor: larger minibatches settle lower at a fixed stepsize
    r8, _ = make_cs_instance(16, 4, 1.0, den, 0.2, seed + 3, ell_blocks=True)
    gamma = 0.3 * step_size_bound(r8.fidelity.lipschitz, r8.tau, 0)
    cfg8 = RedConfig(tau=r8.tau, gamma=gamma)
    x0_8 = np.zeros(r8.n)
    tails = {1: [], 4: []}
    floors_ok = True
    nu = nu_estimate(r8, [x0_8], draws=1500, seed=seed)
    for s in range(3):
        for w in (1, 4):
            x, trace = sg_red(r8, cfg8, x0_8, SolverBudget(400), w=w,
                              seed=seed + 100 * s)
            tail = [rec.res_sq for rec in trace.records
                    if rec.iteration > 0.8 * trace.final.iteration]
            tails[w].append(float(np.median(tail)))
            inputs = BoundInputs(t=trace.final.iteration, b=1, gamma=gamma,
                                 L=r8.fidelity.lipschitz, tau=r8.tau, lam=0,
                                 R0=float(np.linalg.norm(x0_8 - fixed_point_direct_solve(r8))),
                                 nu=nu, w=w)
            if trace.min_res_sq > theoretical_bound_sg(inputs):
                floors_ok = False
    med1, med4 = float(np.median(tails[1])), float(np.median(tails[4]))
    checks.append(CheckResult("sg_floor_improves_with_w", med4 < med1,
                              med4 / med1, 1.0,
                              detail=f"w1={med1:.4g} w4={med4:.4g}"))
    checks.append(CheckResult("theorem2_bound_holds", floors_ok,
                              float(floors_ok), 1.0))
    return checks


_SUITE_FNS = {
    "operators": suite_operators,
    "denoisers": suite_denoisers,
    "lemmas": suite_lemmas,
    "async": suite_async,
    "bounds": suite_bounds,
}


def run_suite(name: str, seed: int = 0, trials: int = 500) -> list[CheckResult]:
    """Run one named suite (or 'all'); unknown names raise ``KeyError``."""
    if name == "all":
        out: list[CheckResult] = []
        for key in ("operators", "denoisers", "lemmas", "async", "bounds"):
            out.extend(_SUITE_FNS[key](seed=seed, trials=trials))
        return out
    if name not in _SUITE_FNS:
        raise KeyError(f"unknown suite {name!r}; choose from {SUITES}")
    return _SUITE_FNS[name](seed=seed, trials=trials)
