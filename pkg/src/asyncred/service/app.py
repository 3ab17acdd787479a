"""HTTP facade over the reconstruction library.

Every endpoint is a stateless wrapper: requests carry complete experiment
specs, responses carry the produced artifacts (CSV text, base64 PGM bytes,
JSON reports), and nothing touches the server filesystem. Long runs execute
synchronously; callers size their budgets accordingly.
"""

from __future__ import annotations

import base64
import io

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import __version__
from ..engine import StalenessSchedule, run_simulated
from ..experiments import (ExperimentSpec, Image, build_instance,
                           bench_experiment, run_experiment, save_pgm,
                           shepp_logan, trace_to_csv)
from ..red_core import RedConfig, step_size_bound
from ..solvers import DivergenceError
from ..verify import run_suite
from .schemas import (BenchRequest, BenchResponse, BenchRow, CheckModel,
                      PhantomRequest, PhantomResponse, ReplayRequest,
                      RunRequest, RunResponse, SynthRequest, SynthResponse,
                      VerifyRequest, VerifyResponse)


def _pgm_b64(img: Image) -> str:
    return base64.b64encode(save_pgm(img)).decode("ascii")


def create_app() -> FastAPI:
    app = FastAPI(title="asyncred", version=__version__)

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "version": __version__}

    @app.get("/spec-schema")
    def spec_schema() -> dict:
        return ExperimentSpec.model_json_schema()

    @app.post("/run", response_model=RunResponse)
    def run(req: RunRequest) -> RunResponse:
        try:
            result = run_experiment(req.spec)
        except DivergenceError as exc:
            return RunResponse(status="diverged", error=str(exc))
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return RunResponse(
            status="ok",
            report=result.report,
            trace_csv=trace_to_csv(result.trace),
            final_pgm_b64=_pgm_b64(result.final_image),
        )

    @app.post("/verify", response_model=VerifyResponse)
    def verify(req: VerifyRequest) -> VerifyResponse:
        try:
            checks = run_suite(req.suite, seed=req.seed, trials=req.trials)
        except KeyError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        models = [CheckModel(name=c.name, passed=bool(c.passed),
                             value=float(c.value), threshold=float(c.threshold),
                             detail=c.detail)
                  for c in checks]
        return VerifyResponse(suite=req.suite,
                              passed=all(c.passed for c in checks),
                              checks=models)

    @app.post("/bench", response_model=BenchResponse)
    def bench(req: BenchRequest) -> BenchResponse:
        try:
            rows = bench_experiment(req.spec, req.workers, req.target_norm_res)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return BenchResponse(rows=[BenchRow(**row) for row in rows])

    @app.post("/phantom", response_model=PhantomResponse)
    def phantom(req: PhantomRequest) -> PhantomResponse:
        return PhantomResponse(pgm_b64=_pgm_b64(shepp_logan(req.size)))

    @app.post("/synth", response_model=SynthResponse)
    def synth(req: SynthRequest) -> SynthResponse:
        try:
            parts = build_instance(req.spec)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        y_csv = "\n".join(f"{v:.17g}" for v in parts.y) + "\n"
        meta = {
            "task": req.spec.task,
            "m": int(parts.red_op.fidelity.m),
            "n": int(parts.red_op.fidelity.n),
            "ell": int(parts.red_op.fidelity.ell),
            "blocks": int(parts.grid.b),
            "input_snr_db": req.spec.input_snr_db,
            "seed": req.spec.seed,
        }
        operator_txt = None
        if req.export_operator:
            if req.spec.task != "ct":
                raise HTTPException(
                    status_code=422,
                    detail="operator export is only defined for the sparse ct model")
            buf = io.StringIO()
            parts.red_op.fidelity.A.base.export_rows(buf)
            operator_txt = buf.getvalue()
        return SynthResponse(y_csv=y_csv, x_true_pgm_b64=_pgm_b64(parts.phantom),
                             meta=meta, operator_txt=operator_txt)

    @app.post("/replay", response_model=RunResponse)
    def replay(req: ReplayRequest) -> RunResponse:
        try:
            schedule = StalenessSchedule.from_csv(io.StringIO(req.schedule_csv))
            parts = build_instance(req.spec)
            r = parts.red_op
            gamma = (req.spec.gamma if req.spec.gamma != "auto"
                     else step_size_bound(r.fidelity.lipschitz, r.tau,
                                          schedule.max_delay))
            cfg = RedConfig(tau=r.tau, gamma=float(gamma))
            x, trace, _ = run_simulated(r, cfg, parts.x0, schedule,
                                        log_stale=False)
        except DivergenceError as exc:
            return RunResponse(status="diverged", error=str(exc))
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        final = Image(parts.grid.height, parts.grid.width,
                      np.clip(parts.grid.to_row_major(x), 0.0, 1.0))
        report = {
            "events": len(schedule),
            "max_delay": schedule.max_delay,
            "gamma": cfg.gamma,
            "tau": r.tau,
            "min_res_sq": trace.min_res_sq,
            "final_norm_res": trace.final.norm_res,
        }
        return RunResponse(status="ok", report=report,
                           trace_csv=trace_to_csv(trace),
                           final_pgm_b64=_pgm_b64(final))

    return app


app = create_app()
