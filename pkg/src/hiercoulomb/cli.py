"""Command-line entry point: ``sample``, ``zcheck``, ``experiment`` and ``verify``.

Exit codes: 0 success, 1 acceptance failure, 2 malformed configuration,
3 resolution failure. Errors are also written to stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .experiments import ConfigError, ExperimentConfig, ReplicateJob, run_experiment
from .geometry import GeometryError, ResolutionError, to_float
from .partition import PartitionError, build_logz_table, logz, validate_ratio_lower_bounds, z2_oracle
from .samplers import McmcParams, stream
from .statistics import BATCH, _plain

OUT_ENV = "HIERCOULOMB_OUT"
EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_RESOLUTION = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _out_path(path: str | None, default: str) -> Path:
    base = Path(os.environ.get(OUT_ENV, "."))
    p = Path(path) if path else Path(default)
    return p if p.is_absolute() else base / p


def _write_json(path: Path, doc: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_plain(doc), indent=1, sort_keys=True) + "\n")


def _meta(command: str, config: dict, seed: int | None) -> dict:
    return {"command": command, "version": __version__, "seed": seed, "config": config}


# ---- sample ---------------------------------------------------------------------------------

def _sample_batch(args):
    job, seed, b, size = args
    return [c.points for c in job.draws(stream(seed, b), size)]


def cmd_sample(a) -> int:
    if a.n < 0 or a.count < 1 or not (a.beta >= 0 and math.isfinite(a.beta)):
        raise ConfigError("need n >= 0, count >= 1 and finite beta >= 0")
    if a.method == "exact" and a.beta == 0:
        method = "iid"
    else:
        method = a.method
    table = None
    if method == "exact":
        table = build_logz_table(a.dim, a.beta, max(a.n_max or a.n, 2), level_cap=a.level_cap)
    mcmc = McmcParams.defaults(a.n, a.beta) if method == "mcmc" else None
    job = ReplicateJob(method, a.dim, a.n, a.beta, (), table, mcmc)
    sizes = [min(BATCH, a.count - s) for s in range(0, a.count, BATCH)]
    tasks = [(job, a.seed, b, size) for b, size in enumerate(sizes)]
    if a.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=a.jobs) as ex:
            parts = list(ex.map(_sample_batch, tasks))
    else:
        parts = [_sample_batch(t) for t in tasks]
    out = _out_path(a.out, "points.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["replicate_id", "point_index"] + [f"coord_{i + 1}" for i in range(a.dim)])
        rid = 0
        for part in parts:
            for pts in part:
                for i, x in enumerate(to_float(pts)):
                    w.writerow([rid, i] + [repr(float(v)) for v in x])
                rid += 1
    config = {"dim": a.dim, "n": a.n, "beta": a.beta, "method": a.method, "count": a.count,
              "n_max": a.n_max, "level_cap": a.level_cap}
    _write_json(out.with_suffix(out.suffix + ".json"),
                {**_meta("sample", config, a.seed), "points_csv": out.name})
    return EXIT_OK


# ---- zcheck ------------------------------------------------------------------------------------

def cmd_zcheck(a) -> int:
    if a.n_max < 0 or not a.beta > 0:
        raise ConfigError("need n_max >= 0 and beta > 0")
    table = build_logz_table(a.dim, a.beta, max(a.n_max, 1), level_cap=a.level_cap)
    out = _out_path(a.out, "logz.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    levels = range(table.levels) if (a.dim == 3 and a.all_levels) else [0]
    with out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "level", "logz_lo", "logz_hi", "width"])
        for k in levels:
            for n in range(a.n_max + 1):
                lo, hi = logz(table, n, k)
                w.writerow([n, k, repr(lo), repr(hi), repr(hi - lo)])
    ratio = validate_ratio_lower_bounds(table)
    doc = _meta("zcheck", {"dim": a.dim, "beta": a.beta, "n_max": a.n_max,
                           "level_cap": a.level_cap}, None)
    doc.update({"table_csv": out.name, "ratio_bounds": ratio.to_dict(),
                "certified_levels": table.certified_levels() if a.dim == 3 else None,
                "max_width": float(np.max(table.widths()))})
    if a.n_max >= 2:
        orc = z2_oracle(a.dim, a.beta)
        lo, hi = logz(table, 2)
        doc["z2"] = {"logz_lo": lo, "logz_hi": hi, "oracle_log": math.log(orc["series"]),
                     "contains_oracle": lo <= math.log(orc["series"]) <= hi}
    _write_json(out.with_suffix(".json"), doc)
    print(json.dumps({"ratio_bounds_passed": ratio.passed, "z2": doc.get("z2")}))
    return EXIT_OK if ratio.passed else EXIT_FAIL


# ---- experiment -----------------------------------------------------------------------------------

def cmd_experiment(a) -> int:
    try:
        text = sys.stdin.read() if a.config == "-" else Path(a.config).read_text()
        raw = json.loads(text)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    cfg = ExperimentConfig.from_dict(raw)
    report, tidy = run_experiment(cfg, jobs=a.jobs)
    out = _out_path(a.out or cfg.out, f"{cfg.experiment}.json")
    doc = {**_meta("experiment", cfg.to_dict(), cfg.seed), "report": report.to_dict(timing=a.timing)}
    _write_json(out, doc)
    csv_path = out.with_suffix(".csv")
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "replicate", "statistic", "value"])
        for n, r, name, v in tidy:
            w.writerow([n, r, name, repr(v)])
    print(json.dumps({"experiment": cfg.experiment, "passed": report.passed,
                      "verdicts": report.verdicts, "report": str(out)}))
    return EXIT_OK if report.passed else EXIT_FAIL


# ---- verify ----------------------------------------------------------------------------------------

def cmd_verify(a) -> int:
    from .acceptance import report_bytes, verify

    only = None
    if a.only:
        try:
            only = {int(x) for x in a.only.split(",")}
        except ValueError as exc:
            raise ConfigError("--only takes comma-separated criterion numbers") from exc
        if not only <= set(range(1, 15)):
            raise ConfigError("criteria are numbered 1 to 14")
    results, timing = verify(a.seed, a.quick, only, echo=lambda s: print(s, flush=True))
    out = _out_path(a.out, "verify_report.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(report_bytes(results, a.seed, a.quick))
    passed = all(r.passed for r in results)
    print(json.dumps({"passed": passed, "failed": [r.id for r in results if not r.passed],
                      "report": str(out), "seconds": {k: round(v, 1) for k, v in timing.items()}}))
    return EXIT_OK if passed else EXIT_FAIL


# ---- parser -------------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hiercoulomb", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("sample", help="draw configurations and write them as CSV")
    s.add_argument("--dim", type=int, choices=(1, 2, 3), required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--beta", type=float, required=True)
    s.add_argument("--method", choices=("exact", "mcmc", "iid"), default="exact")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--out")
    s.add_argument("--n-max", type=int, default=None)
    s.add_argument("--level-cap", type=int, default=40)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sample)

    z = sub.add_parser("zcheck", help="build a log Z table and check the ratio bounds")
    z.add_argument("--dim", type=int, choices=(1, 2, 3), required=True)
    z.add_argument("--beta", type=float, required=True)
    z.add_argument("--n-max", type=int, required=True)
    z.add_argument("--level-cap", type=int, default=40)
    z.add_argument("--all-levels", action="store_true", help="write every tree level (3D)")
    z.add_argument("--out")
    z.set_defaults(func=cmd_zcheck)

    e = sub.add_parser("experiment", help="run a named experiment from a JSON config")
    e.add_argument("--config", required=True, help="path to JSON config, or - for stdin")
    e.add_argument("--out")
    e.add_argument("--jobs", type=int, default=1)
    e.add_argument("--timing", action="store_true", help="include wall-clock runtime in the report")
    e.set_defaults(func=cmd_experiment)

    v = sub.add_parser("verify", help="run the acceptance suite")
    v.add_argument("--quick", action="store_true")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--only", help="comma-separated criterion numbers")
    v.add_argument("--out")
    v.add_argument("--jobs", type=int, default=1)
    v.set_defaults(func=cmd_verify)
    return p


def _fail(code: int, kind: str, exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "jobs", 1) < 1:
            raise ConfigError("--jobs must be >= 1")
        if hasattr(args, "seed") and not 0 <= args.seed < 2**64:
            raise ConfigError("seed must fit in 64 bits")
        return args.func(args)
    except ResolutionError as exc:
        return _fail(EXIT_RESOLUTION, "resolution", exc)
    except UsageError as exc:
        return _fail(EXIT_CONFIG, "usage", exc)
    except (ConfigError, GeometryError, PartitionError, ValueError) as exc:
        return _fail(EXIT_CONFIG, "config", exc)


if __name__ == "__main__":
    sys.exit(main())
