"""Command-line front end.

The CLI is a thin client of the HTTP service: every subcommand builds a
request, sends it either to an in-process application instance (default) or
to a remote server (``--server``), and writes the returned artifacts to
local paths. Exit codes: 0 success, 2 usage or configuration error,
3 numerical divergence, 4 verification failure.

The ``ASYNC_RED_THREADS`` environment variable caps the worker pool of any
run executed in-process.
"""

from __future__ import annotations

import argparse
import base64
import json
import os
import sys
from pathlib import Path

# pin BLAS to one thread before numpy loads: the async engine parallelizes
# across block workers, and nested BLAS pools spin-wait against them
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_VERIFY_FAILED = 4


def _make_client(server: str | None):
    if server:
        import httpx

        return httpx.Client(base_url=server, timeout=None)
    from fastapi.testclient import TestClient

    from .service import app

    return TestClient(app)


def _load_spec(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise SystemExit2(f"spec file not found: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise SystemExit2(f"spec file is not valid JSON: {exc}")


class SystemExit2(Exception):
    """Configuration/usage problem; maps to exit code 2."""


def _prepare_out_dir(out_dir: str, force: bool) -> Path:
    path = Path(out_dir)
    if path.exists() and any(path.iterdir()) and not force:
        raise SystemExit2(
            f"output directory {out_dir} is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _post(client, url: str, payload: dict):
    resp = client.post(url, json=payload)
    if resp.status_code >= 400:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        raise SystemExit2(f"request rejected ({resp.status_code}): {detail}")
    return resp.json()


def _write_run_artifacts(body: dict, spec: dict, out: Path) -> None:
    (out / "spec.json").write_text(json.dumps(spec, indent=2) + "\n")
    (out / "trace.csv").write_text(body["trace_csv"])
    (out / "final.pgm").write_bytes(base64.b64decode(body["final_pgm_b64"]))
    (out / "report.json").write_text(json.dumps(body["report"], indent=2) + "\n")


def cmd_run(client, args) -> int:
    spec = _load_spec(args.spec)
    out = _prepare_out_dir(args.out_dir, args.force)
    body = _post(client, "/run", {"spec": spec})
    if body["status"] == "diverged":
        print(f"solver diverged: {body['error']}", file=sys.stderr)
        return EXIT_DIVERGED
    _write_run_artifacts(body, spec, out)
    print(f"run complete: artifacts in {out}")
    return EXIT_OK


def cmd_verify(client, args) -> int:
    body = _post(client, "/verify", {"suite": args.suite, "seed": args.seed,
                                     "trials": args.trials})
    for check in body["checks"]:
        status = "PASS" if check["passed"] else "FAIL"
        extra = f"  [{check['detail']}]" if check.get("detail") else ""
        print(f"{status}  {check['name']}: value={check['value']:.6g} "
              f"threshold={check['threshold']:.6g}{extra}")
    n_fail = sum(not c["passed"] for c in body["checks"])
    print(f"suite {args.suite}: {len(body['checks']) - n_fail}/{len(body['checks'])} passed")
    return EXIT_OK if body["passed"] else EXIT_VERIFY_FAILED


def cmd_bench(client, args) -> int:
    spec = _load_spec(args.spec)
    workers = [int(v) for v in args.workers.split(",") if v]
    if not workers:
        raise SystemExit2("--workers needs a comma-separated list of counts")
    body = _post(client, "/bench", {"spec": spec, "workers": workers,
                                    "target_norm_res": args.target_norm_res})
    print("workers,updates_per_sec,wall_ms_to_target_res")
    rows = body["rows"]
    for row in rows:
        wall = row["wall_ms_to_target_res"]
        print(f"{row['workers']},{row['updates_per_sec']:.6g},"
              f"{'' if wall is None else format(wall, '.6g')}")
    by_workers = {row["workers"]: row["updates_per_sec"] for row in rows}
    if 1 in by_workers:
        for n, rate in sorted(by_workers.items()):
            if n > 1 and rate < by_workers[1]:
                print(f"warning: {n} workers slower than 1 "
                      f"({rate:.3g} vs {by_workers[1]:.3g} updates/s)",
                      file=sys.stderr)
    return EXIT_OK


def cmd_phantom(client, args) -> int:
    body = _post(client, "/phantom", {"size": args.size})
    Path(args.out).write_bytes(base64.b64decode(body["pgm_b64"]))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_synth(client, args) -> int:
    spec = _load_spec(args.spec)
    out = _prepare_out_dir(args.out_dir, args.force)
    body = _post(client, "/synth", {"spec": spec,
                                    "export_operator": args.export_operator})
    (out / "y.csv").write_text(body["y_csv"])
    (out / "x_true.pgm").write_bytes(base64.b64decode(body["x_true_pgm_b64"]))
    (out / "meta.json").write_text(json.dumps(body["meta"], indent=2) + "\n")
    if body.get("operator_txt"):
        (out / "operator.txt").write_text(body["operator_txt"])
    print(f"synthesized measurements in {out}")
    return EXIT_OK


def cmd_replay(client, args) -> int:
    spec = _load_spec(args.spec)
    sched_path = Path(args.schedule)
    if not sched_path.exists():
        raise SystemExit2(f"schedule file not found: {args.schedule}")
    out = _prepare_out_dir(args.out_dir, args.force)
    body = _post(client, "/replay", {"spec": spec,
                                     "schedule_csv": sched_path.read_text()})
    if body["status"] == "diverged":
        print(f"replay diverged: {body['error']}", file=sys.stderr)
        return EXIT_DIVERGED
    _write_run_artifacts(body, spec, out)
    print(f"replay complete: artifacts in {out}")
    return EXIT_OK


def cmd_schema(client, args) -> int:
    resp = client.get("/spec-schema")
    Path(args.out).write_text(json.dumps(resp.json(), indent=2) + "\n")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import app

    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="asyncred",
        description="Asynchronous block-parallel RED reconstruction")
    parser.add_argument("--server", default=None,
                        help="base URL of a running service; default runs in-process")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute an experiment spec")
    p.add_argument("spec")
    p.add_argument("-o", "--out-dir", required=True)
    p.add_argument("--force", action="store_true",
                   help="overwrite a non-empty output directory")

    p = sub.add_parser("verify", help="run a property suite")
    p.add_argument("suite",
                   choices=["operators", "denoisers", "lemmas", "async",
                            "bounds", "all"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=500)

    p = sub.add_parser("bench", help="scaling table over worker counts")
    p.add_argument("spec")
    p.add_argument("--workers", required=True, help="e.g. 1,2,4,8")
    p.add_argument("--target-norm-res", type=float, default=1e-3)

    p = sub.add_parser("phantom", help="emit a head phantom as 16-bit PGM")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("-o", "--out", required=True)

    p = sub.add_parser("synth", help="emit measurements and ground truth")
    p.add_argument("spec")
    p.add_argument("-o", "--out-dir", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--export-operator", action="store_true",
                   help="also write the sparse ct operator as row/col/weight text")

    p = sub.add_parser("replay", help="deterministically replay a schedule")
    p.add_argument("schedule")
    p.add_argument("spec")
    p.add_argument("-o", "--out-dir", required=True)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("schema", help="write the experiment spec JSON schema")
    p.add_argument("-o", "--out", default="spec.schema.json")

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "serve":
        return cmd_serve(args)
    handlers = {
        "run": cmd_run,
        "verify": cmd_verify,
        "bench": cmd_bench,
        "phantom": cmd_phantom,
        "synth": cmd_synth,
        "replay": cmd_replay,
        "schema": cmd_schema,
    }
    try:
        client = _make_client(args.server)
    except Exception as exc:  # connection/setup problems are config errors
        print(f"cannot reach service: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        with client:
            return handlers[args.command](client, args)
    except SystemExit2 as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
