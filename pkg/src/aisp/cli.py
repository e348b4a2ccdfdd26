"""Command-line front end: ingest or simulate data, run an estimator, report.

Reports are newline-delimited JSON (default) or TSV, one record per
(feature, replicate) followed by one summary record per feature when more
than one replicate was run. Floats are written with 17 significant digits.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import ObservedData, StatisticSpec
from .engine import PHASE_REPLICATE, CEConfig, adaptive_ce_run, derive_seed, replicate_metrics
from .errors import (
    AispError,
    ContractViolation,
    MatrixParseError,
    ThresholdNotReached,
)
from .oracle import crude_pvalue, exact_pvalue

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_PARSE = 4
EXIT_ESTIMATOR = 5

STATISTIC_FLAGS = {
    "one-group-mean": "one-group-mean",
    "diff-means": "diff-means",
    "t": "student-t",
    "mod-t": "moderated-t",
}

# Reference p-values are enumerated automatically only below this many assignments.
AUTO_EXACT_LIMIT = 10**6

RUN_FIELDS = (
    "record", "feature_id", "replicate", "method", "status", "p_hat", "se",
    "iterations", "gamma", "gamma_trace", "samples_adaptive", "samples_estimate",
    "seed", "master_seed", "data_digest", "swapped", "statistic", "s0", "count", "total",
    "elapsed", "error",
)
SUMMARY_FIELDS = (
    "runs", "mse", "are", "mcre", "mean_p_hat", "sd_p_hat", "reference_p",
    "reference_source", "outliers",
)
TSV_FIELDS = RUN_FIELDS + SUMMARY_FIELDS


@dataclass(frozen=True)
class SimulateSpec:
    n1: int
    mu1: float
    sigma1: float
    n2: int
    mu2: float
    sigma2: float
    data_seed: int = 0

    def __post_init__(self):
        if self.n1 < 1 or self.n2 < 0:
            raise ContractViolation("simulation needs n1 >= 1 and n2 >= 0")
        if not (self.sigma1 > 0 and (self.n2 == 0 or self.sigma2 > 0)):
            raise ContractViolation("simulation standard deviations must be positive")

    @classmethod
    def parse(cls, text: str, data_seed: int = 0) -> "SimulateSpec":
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 6:
            raise ContractViolation("--simulate expects n1,mu1,sigma1,n2,mu2,sigma2")
        try:
            n1, n2 = int(parts[0]), int(parts[3])
            mu1, s1, mu2, s2 = (float(parts[i]) for i in (1, 2, 4, 5))
        except ValueError as exc:
            raise ContractViolation(f"bad --simulate value: {exc}") from None
        return cls(n1, mu1, s1, n2, mu2, s2, data_seed)


@dataclass(frozen=True)
class RunRequest:
    method: str
    statistic: StatisticSpec
    config: CEConfig
    input_path: Optional[str] = None
    simulate: Optional[SimulateSpec] = None
    group_sizes: Optional[tuple] = None
    n_perms: int = 10**6
    replicates: int = 1
    reference_p: Optional[float] = None
    output: str = "json"
    workers: int = 1

    def __post_init__(self):
        if self.method not in ("aisp", "crude", "exact"):
            raise ContractViolation(f"unknown method {self.method!r}")
        if (self.input_path is None) == (self.simulate is None):
            raise ContractViolation("give exactly one of --input or --simulate")
        if self.replicates < 1:
            raise ContractViolation("replicates must be >= 1")
        if self.output not in ("json", "tsv"):
            raise ContractViolation(f"unknown output format {self.output!r}")


def simulate_dataset(spec: SimulateSpec) -> ObservedData:
    """Normal draws from ``data_seed``: group 1 first, then group 2."""
    rng = np.random.default_rng(spec.data_seed)
    g1 = rng.normal(spec.mu1, spec.sigma1, spec.n1)
    if spec.n2 == 0:
        return ObservedData.one_group(g1)
    g2 = rng.normal(spec.mu2, spec.sigma2, spec.n2)
    return ObservedData.two_group(g1, g2)


def _parse_float(cell: str, row: int, col: int) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise MatrixParseError(f"non-numeric cell {cell!r} at row {row}, column {col}", row, col) from None
    if not math.isfinite(value):
        raise MatrixParseError(f"non-finite cell {cell!r} at row {row}, column {col}", row, col)
    return value


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_matrix(path: str, group_sizes: Optional[tuple] = None) -> list[tuple[str, ObservedData]]:
    """Read a features-by-samples TSV into one dataset per row.

    A first row with no numeric cell after its first column is a header;
    a partly numeric first row is data, so a stray bad cell is reported
    rather than swallowed. A first column holds row identifiers when rows
    have one more cell than there are samples (or, without group sizes,
    when it is non-numeric). ``group_sizes`` is ``(k, m)`` for two groups
    or ``None`` for a one-group test over every sample column.
    """
    with open(path, encoding="utf-8") as fh:
        lines = [line.rstrip("\r\n") for line in fh]
    rows = [(i + 1, line.split("\t")) for i, line in enumerate(lines) if line.strip()]
    if not rows:
        raise MatrixParseError("empty input table")
    if not any(_is_number(c) for c in rows[0][1][1:]):
        rows = rows[1:]
    if not rows:
        raise MatrixParseError("input table has a header but no data rows")

    width = len(rows[0][1])
    n_samples = sum(group_sizes) if group_sizes else None
    if n_samples is None:
        has_id = not _is_number(rows[0][1][0])
    elif width == n_samples + 1:
        has_id = True
    elif width == n_samples:
        has_id = False
    else:
        raise MatrixParseError(
            f"row {rows[0][0]} has {width} columns but group sizes sum to {n_samples}", rows[0][0]
        )

    out = []
    for lineno, cells in rows:
        if len(cells) != width:
            raise MatrixParseError(f"row {lineno} has {len(cells)} columns, expected {width}", lineno)
        fid = cells[0] if has_id else f"row{lineno}"
        start = 1 if has_id else 0
        values = [_parse_float(c, lineno, j + 1) for j, c in enumerate(cells) if j >= start]
        if group_sizes:
            k, m = group_sizes
            data = ObservedData.two_group(values[:k], values[k:])
        else:
            data = ObservedData.one_group(values)
        out.append((fid, data))
    return out


def data_digest(data: ObservedData) -> str:
    """64-bit BLAKE2b checksum of the parsed values and group layout."""
    h = hashlib.blake2b(digest_size=8)
    h.update(np.asarray(data.values, dtype="<f8").tobytes())
    h.update(str((data.group1_size, data.swapped)).encode())
    return h.hexdigest()


# -- execution -----------------------------------------------------------------


def _config_record(request: RunRequest) -> dict:
    if request.method == "crude":
        return {"n_perms": request.n_perms}
    if request.method == "exact":
        return {}
    cfg = request.config.to_dict()
    cfg.pop("seed")
    return cfg


def _run_one(job):
    """Run one (feature, replicate) job; returns a plain-dict record."""
    request, fid, data, r = job
    seed = derive_seed(request.config.seed, PHASE_REPLICATE, r)
    rec = {
        "record": "run",
        "feature_id": fid,
        "replicate": r,
        "method": request.method,
        "seed": seed,
        "master_seed": request.config.seed,
        "data_digest": data_digest(data),
        "swapped": data.swapped,
        "statistic": request.statistic.kind,
        "s0": request.statistic.s0,
        "config": _config_record(request),
    }
    try:
        if request.method == "exact":
            res = exact_pvalue(data, request.statistic)
            rec.update(status="ok", p_hat=res.p, se=0.0, count=res.count, total=res.total)
            rec["seed"] = None
            return rec
        if request.method == "crude":
            report = crude_pvalue(data, request.statistic, request.n_perms, seed)
        else:
            config = CEConfig(**{**request.config.to_dict(), "seed": seed}, workers=request.config.workers)
            report = adaptive_ce_run(data, request.statistic, config)
        status = "ok"
    except ThresholdNotReached as exc:
        report, status = exc.report, "threshold_not_reached"
        rec["error"] = str(exc)
    except AispError as exc:
        rec.update(status="error", error=f"{type(exc).__name__}: {exc}")
        return rec
    rec.update(
        status=status,
        method=report.method,
        p_hat=report.p_hat,
        se=report.se,
        iterations=report.iterations,
        gamma=report.gamma,
        gamma_trace=list(report.gamma_trace),
        samples_adaptive=report.samples_adaptive,
        samples_estimate=report.samples_estimate,
        elapsed=report.elapsed,
    )
    return rec


def _reference(request: RunRequest, data: ObservedData):
    if request.reference_p is not None:
        return request.reference_p, "user"
    size = math.comb(data.n, data.k) if data.is_two_group else 2**data.n
    if request.method != "exact" and size <= AUTO_EXACT_LIMIT:
        try:
            return exact_pvalue(data, request.statistic).p, "exact"
        except AispError:
            return None, None
    return None, None


def _summaries(request: RunRequest, features, records) -> list[dict]:
    out = []
    by_feature: dict[str, list[dict]] = {}
    for rec in records:
        by_feature.setdefault(rec["feature_id"], []).append(rec)
    for fid, data in features:
        recs = by_feature.get(fid, [])
        good = [r["p_hat"] for r in recs if r.get("status") == "ok"]
        outliers = [r["p_hat"] for r in recs if r.get("status") == "threshold_not_reached"]
        if len(good) < 2:
            continue
        ref, source = _reference(request, data)
        if ref is None or ref <= 0:
            ref, source = float(np.mean(good)), "replicate-mean"
        if ref <= 0:
            continue
        summ = replicate_metrics(good, ref)
        rec = {"record": "summary", "feature_id": fid, "method": recs[0]["method"]}
        rec.update(summ.__dict__)
        rec.update(reference_source=source, outliers=len(outliers))
        if outliers:
            all_runs = replicate_metrics(good + outliers, ref)
            rec["all_runs"] = dict(all_runs.__dict__)
        out.append(rec)
    return out


def run(request: RunRequest, features) -> tuple[int, list[dict]]:
    """Execute every (feature, replicate) job; returns (exit code, records)."""
    jobs = [(request, fid, data, r) for fid, data in features for r in range(request.replicates)]
    if request.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=request.workers) as pool:
            records = list(pool.map(_run_one, jobs))
    else:
        records = [_run_one(job) for job in jobs]
    records += _summaries(request, features, records)
    code = EXIT_ESTIMATOR if any(r.get("status") == "error" for r in records) else EXIT_OK
    return code, records


# -- serialization -------------------------------------------------------------


def _fmt_float(x: float) -> str:
    if not math.isfinite(x):
        return "null"
    return format(x, ".17g")


def dumps(obj) -> str:
    """Compact JSON with floats written to 17 significant digits."""
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(str(k))}:{dumps(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(dumps(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _tsv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return "" if not math.isfinite(value) else format(float(value), ".17g")
    if isinstance(value, (list, tuple)):
        return ",".join(_tsv_cell(v) for v in value)
    return str(value).replace("\t", " ").replace("\n", " ")


def write_records(records: list[dict], fmt: str, stream) -> None:
    if fmt == "json":
        for rec in records:
            stream.write(dumps(rec) + "\n")
        return
    stream.write("\t".join(TSV_FIELDS) + "\n")
    for rec in records:
        stream.write("\t".join(_tsv_cell(rec.get(f)) for f in TSV_FIELDS) + "\n")


def _error_record(kind: str, exc: Exception, code: int, **extra) -> str:
    rec = {"record": "error", "kind": kind, "exit_code": code, "message": str(exc)}
    rec.update(extra)
    return dumps(rec)


# -- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="aisp",
        description="Estimate small permutation-test p-values by adaptive importance sampling.",
    )
    p.add_argument("--method", choices=("aisp", "crude", "exact"), default="aisp")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="TSV matrix, one feature per row")
    src.add_argument("--simulate", help="n1,mu1,sigma1,n2,mu2,sigma2 (n2 = 0 for one group)")
    p.add_argument("--data-seed", type=int, default=0, help="seed for --simulate")
    p.add_argument("--group-sizes", help="K,M sample counts of the two groups in --input")
    p.add_argument("--statistic", choices=tuple(STATISTIC_FLAGS), default=None)
    p.add_argument("--s0", type=float, default=0.0, help="moderated-t fudge constant")
    p.add_argument("--rho", type=float, default=0.1)
    p.add_argument("--n-update", type=int, default=2000)
    p.add_argument("--m-estimate", type=int, default=10_000)
    p.add_argument("--max-iters", type=int, default=20)
    p.add_argument("--alpha", type=float, default=1.0, help="CE smoothing weight")
    p.add_argument("--n-perms", type=int, default=10**6, help="draws for --method crude")
    p.add_argument("--seed", type=int, default=None, help="master seed (required for aisp/crude)")
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--reference-p", type=float, default=None)
    p.add_argument("--output", choices=("json", "tsv"), default="json")
    p.add_argument("--workers", type=int, default=1)
    return p


def _request_from_args(args) -> RunRequest:
    if args.method != "exact" and args.seed is None:
        raise ContractViolation(f"--seed is required for --method {args.method}")
    group_sizes = None
    if args.group_sizes:
        try:
            k, m = (int(v) for v in args.group_sizes.split(","))
        except ValueError:
            raise ContractViolation("--group-sizes expects K,M") from None
        group_sizes = (k, m)
    simulate = SimulateSpec.parse(args.simulate, args.data_seed) if args.simulate else None
    two_group = bool(group_sizes) or (simulate is not None and simulate.n2 > 0)
    kind = STATISTIC_FLAGS[args.statistic] if args.statistic else (
        "diff-means" if two_group else "one-group-mean"
    )
    config = CEConfig(
        rho=args.rho,
        n_update=args.n_update,
        m_estimate=args.m_estimate,
        max_iters=args.max_iters,
        alpha=args.alpha,
        seed=args.seed if args.seed is not None else 0,
    )
    return RunRequest(
        method=args.method,
        statistic=StatisticSpec(kind, args.s0),
        config=config,
        input_path=args.input,
        simulate=simulate,
        group_sizes=group_sizes,
        n_perms=args.n_perms,
        replicates=args.replicates,
        reference_p=args.reference_p,
        output=args.output,
        workers=args.workers,
    )


def main(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    args = build_parser().parse_args(argv)
    try:
        request = _request_from_args(args)
    except AispError as exc:
        stderr.write(_error_record("usage", exc, EXIT_USAGE) + "\n")
        return EXIT_USAGE
    try:
        if request.simulate is not None:
            features = [("sim", simulate_dataset(request.simulate))]
        else:
            features = load_matrix(request.input_path, request.group_sizes)
    except OSError as exc:
        stderr.write(_error_record("io", exc, EXIT_IO) + "\n")
        return EXIT_IO
    except MatrixParseError as exc:
        stderr.write(_error_record("parse", exc, EXIT_PARSE, row=exc.row, column=exc.column) + "\n")
        return EXIT_PARSE
    except AispError as exc:
        stderr.write(_error_record("usage", exc, EXIT_USAGE) + "\n")
        return EXIT_USAGE
    for fid, data in features:
        try:
            request.statistic.check_design(data)
        except AispError as exc:
            stderr.write(_error_record("usage", exc, EXIT_USAGE, feature_id=fid) + "\n")
            return EXIT_USAGE
    code, records = run(request, features)
    write_records(records, request.output, stdout)
    for rec in records:
        if rec.get("status") == "error":
            stderr.write(_error_record("estimator", rec["error"], EXIT_ESTIMATOR, feature_id=rec["feature_id"]) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
