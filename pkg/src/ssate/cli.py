"""Command-line interface.

``ssate estimate``  point estimates with perturbation-resampling inference
``ssate simulate``  Monte-Carlo benchmark (or, with ``--coverage``, interval coverage)
``ssate generate``  write a simulated dataset as CSV

Exit codes: 0 success, 1 input error, 2 estimation error, 3 internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import traceback
from dataclasses import asdict

from .data import (
    SIMULATION_ESTIMATORS,
    ModelConfig,
    RunConfig,
    load_run_config,
    parse_estimators,
    read_csv,
    run_config_from_mapping,
    write_csv,
)
from .errors import EstimationError, InputError
from .estimators import EstimateReport
from .report import atomic_write, csv_text, jsonl, text_table, versions
from .resampling import ResampleSummary, resample_all
from .simulation import SCENARIOS, generate_dataset, normalize_scenario, run_benchmark, run_coverage

RECORD_KEYS = ("estimator", "delta", "mu1", "mu0", "se_sd", "se_mad", "ci_lo", "ci_hi", "pvalue")
CELL_KEYS = ("scenario", "n", "N", "estimator", "bias", "rmse", "mse", "re", "reps", "failures",
             "delta_true", "delta_true_se", "seed")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(message)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _prepare_out(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _write_manifest(out: str, manifest: dict) -> None:
    atomic_write(os.path.join(out, "manifest.json"), json.dumps(manifest, indent=2) + "\n")


# ---------------------------------------------------------------------------
# estimate


def _estimate_records(results: dict) -> list:
    records = []
    for kind, res in results.items():
        rec = dict.fromkeys(RECORD_KEYS)
        rec["estimator"] = kind
        if isinstance(res.point, Exception):
            rec["error"] = f"{type(res.point).__name__}: {res.point}"
            records.append(rec)
            continue
        point: EstimateReport = res.point
        rec.update(delta=point.delta, mu1=point.mu1, mu0=point.mu0)
        if isinstance(res.summary, ResampleSummary):
            s = res.summary.as_dict()
            rec.update({k: s[k] for k in ("se_sd", "se_mad", "ci_lo", "ci_hi", "pvalue")})
            diag = dict(point.diagnostics, draws_used=s["draws_used"], draws_excluded=s["draws_excluded"])
        else:
            diag = dict(point.diagnostics)
            if isinstance(res.summary, Exception):
                rec["error"] = f"{type(res.summary).__name__}: {res.summary}"
        rec["diagnostics"] = diag
        records.append(rec)
    return records


def run_estimate(data_path, run: RunConfig, out: str, *, resample: bool = True) -> int:
    data = read_csv(data_path)
    model = run.model
    if model.count_log_transform:
        data = data.with_log_counts()
    if resample:
        results = resample_all(data, model, run.estimators)
    else:
        from .estimators import FitContext, estimate
        from .resampling import ResampledEstimate

        ctx = FitContext(data, model)
        results = {}
        for kind in run.estimators:
            try:
                results[kind] = ResampledEstimate(estimate(kind, ctx))
            except (EstimationError, InputError) as exc:
                results[kind] = ResampledEstimate(exc)
    records = _estimate_records(results)
    if all(isinstance(r.point, InputError) for r in results.values()):
        raise next(iter(results.values())).point
    _prepare_out(out)
    atomic_write(os.path.join(out, "estimates.jsonl"), jsonl(records))
    atomic_write(os.path.join(out, "estimates.txt"), text_table(records, RECORD_KEYS))
    _write_manifest(
        out,
        {
            "command": "estimate",
            "data": os.path.abspath(os.fspath(data_path)),
            "data_sha256": _sha256(data_path),
            "resample": resample,
            "config": run.as_dict(),
            "versions": versions(),
        },
    )
    sys.stdout.write(text_table(records, RECORD_KEYS))
    failed = [r for r in records if r.get("delta") is None]
    for r in failed:
        sys.stderr.write(f"ssate: {r['estimator']}: {r['error']}\n")
    if len(failed) == len(records):
        return 2
    return 0


# ---------------------------------------------------------------------------
# simulate


def run_simulate(spec: dict, out: str) -> int:
    model = ModelConfig(**spec["config"])
    scenarios = [normalize_scenario(s) for s in spec["scenarios"]]
    _prepare_out(out)
    if spec["coverage"]:
        rep = run_coverage(
            spec["n"], spec["N"], spec["sims"], spec["draws"], spec["seed"], scenario=scenarios[0], config=model
        )
        summary = {k: v for k, v in asdict(rep).items() if k != "rows"}
        summary = {"scenario": scenarios[0], **summary}
        atomic_write(os.path.join(out, "coverage.jsonl"), jsonl([summary]))
        cols = ["scenario", "n", "N", "emp_se", "ase", "ase_mad", "coverage", "bias", "rmse", "failures"]
        atomic_write(os.path.join(out, "coverage.txt"), text_table([summary], cols))
        atomic_write(
            os.path.join(out, "coverage_sims.csv"),
            csv_text(rep.rows, ["sim", "delta", "se_sd", "se_mad", "ci_lo", "ci_hi", "excluded"]),
        )
        sys.stdout.write(text_table([summary], cols))
    else:
        result = run_benchmark(
            scenarios, [(spec["n"], spec["N"])], tuple(spec["estimators"]), spec["reps"], spec["seed"], config=model
        )
        cells = [asdict(c) for c in result.cells]
        atomic_write(os.path.join(out, "benchmark.jsonl"), jsonl(cells))
        table = text_table(cells, ["scenario", "n", "N", "estimator", "bias", "rmse", "re", "reps", "failures"])
        atomic_write(os.path.join(out, "benchmark.txt"), table)
        atomic_write(os.path.join(out, "benchmark.csv"), csv_text(cells, CELL_KEYS))
        sys.stdout.write(table)
    _write_manifest(out, {"command": "simulate", **spec, "versions": versions()})
    return 0


# ---------------------------------------------------------------------------
# argument handling


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ssate", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("estimate", help="estimate treatment effects from a CSV file")
    e.add_argument("--data", help="pooled-sample CSV (empty y = unlabeled)")
    e.add_argument("--config", help="JSON config file (seed required)")
    e.add_argument("--estimators", help="comma-separated estimator names (overrides the config)")
    e.add_argument("--out", required=True, help="output directory")
    e.add_argument("--no-resample", action="store_true", help="point estimates only")
    e.add_argument("--manifest", help="re-run exactly from a manifest.json written by an earlier run")

    s = sub.add_parser("simulate", help="Monte-Carlo benchmark or coverage experiment")
    s.add_argument("--scenario", default="both_correct", help=f"comma-separated, from {list(SCENARIOS)}")
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--N", type=int, default=1112)
    s.add_argument("--reps", type=int, default=1000)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--estimators", default=",".join(SIMULATION_ESTIMATORS))
    s.add_argument("--config", help="JSON config file for model settings")
    s.add_argument("--coverage", action="store_true", help="run the resampling coverage experiment")
    s.add_argument("--sims", type=int, default=200, help="simulations for --coverage")
    s.add_argument("--draws", type=int, default=500, help="perturbation draws per simulation for --coverage")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--manifest", help="re-run exactly from a manifest.json written by an earlier run")

    g = sub.add_parser("generate", help="write a simulated dataset as CSV")
    g.add_argument("--scenario", default="both_correct")
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--N", type=int, default=1112)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True, help="CSV path")
    return p


def _load_manifest(path, command: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise InputError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}: invalid manifest: {exc.msg}") from None
    if manifest.get("command") != command:
        raise InputError(f"{path}: manifest is for {manifest.get('command')!r}, not {command!r}")
    return manifest


def _cmd_estimate(args) -> int:
    if args.manifest:
        m = _load_manifest(args.manifest, "estimate")
        if not os.path.exists(m["data"]) or _sha256(m["data"]) != m["data_sha256"]:
            raise InputError(f"data file {m['data']} is missing or differs from the manifest checksum")
        return run_estimate(m["data"], run_config_from_mapping(m["config"]), args.out, resample=m["resample"])
    if not args.data or not args.config:
        raise InputError("--data and --config are required (or --manifest)")
    run = load_run_config(args.config)
    if args.estimators:
        run = RunConfig(run.model, parse_estimators(args.estimators))
    return run_estimate(args.data, run, args.out, resample=not args.no_resample)


def _cmd_simulate(args) -> int:
    if args.manifest:
        m = _load_manifest(args.manifest, "simulate")
        spec = {k: m[k] for k in ("scenarios", "n", "N", "reps", "seed", "estimators", "coverage", "sims", "draws",
                                  "config")}
        return run_simulate(spec, args.out)
    if args.reps < 2:
        raise InputError(f"--reps must be at least 2, got {args.reps}")
    if not 2 <= args.n <= args.N:
        raise InputError(f"sizes must satisfy 2 <= n <= N (n={args.n}, N={args.N})")
    model = ModelConfig()
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InputError(f"{args.config}:{exc.lineno}: invalid config: {exc.msg}") from None
        raw.pop("estimators", None)
        model = run_config_from_mapping(raw, require_seed=False).model
    spec = {
        "scenarios": [normalize_scenario(s) for s in args.scenario.split(",") if s.strip()],
        "n": args.n,
        "N": args.N,
        "reps": args.reps,
        "seed": args.seed,
        "estimators": [e for e in parse_estimators(args.estimators) if e != "cc_naive"] or ["ss_dr"],
        "coverage": bool(args.coverage),
        "sims": args.sims,
        "draws": args.draws,
        "config": model.as_dict(),
    }
    return run_simulate(spec, args.out)


def _cmd_generate(args) -> int:
    data = generate_dataset(normalize_scenario(args.scenario), args.n, args.N, args.seed)
    write_csv(data, args.out)
    return 0


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        handler = {"estimate": _cmd_estimate, "simulate": _cmd_simulate, "generate": _cmd_generate}[args.command]
        return handler(args)
    except InputError as exc:
        sys.stderr.write(f"ssate: input error: {exc}\n")
        return 1
    except EstimationError as exc:
        sys.stderr.write(f"ssate: estimation error: {exc}\n")
        return 2
    except OSError as exc:
        sys.stderr.write(f"ssate: input error: {exc}\n")
        return 1
    except Exception:  # noqa: BLE001
        sys.stderr.write("ssate: internal error\n" + traceback.format_exc())
        return 3


if __name__ == "__main__":
    sys.exit(main())
