"""Scenario runner: ``geochords run <scenario.json> --out DIR`` and
``geochords replay <report.json>``.

Exit codes: 0 success, 2 validation or domain error, 3 numerical failure
(a partial report is still written).
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import fnmatch
import io
import json
import math
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .bvp import (
    PointPair,
    condition_from_dict,
    count_growth,
    find_orthogonal_tangent_chords,
    kernel_dimension,
    morse_index,
    solve_family,
    validate_condition,
)
from .geodesic import IntegrationError, conjugate_points, jacobi_propagate, shoot
from .intersection import intersection_matrix
from .metric import DomainError, MetricError, is_strictly_convex, metric_from_dict
from .perturbation import (
    BifurcationSuspectError,
    SeparationFailedError,
    perturb_and_verify,
    probe_checksum,
    shear_check,
)

REPORT_SCHEMA_VERSION = 1
EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3
DEFAULT_REPLAY_TOLERANCE = 1e-9


class ValidationFailure(Exception):
    """Scenario or report rejected before any computation."""


class NumericalFailure(Exception):
    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


# ---------------------------------------------------------------------------
# scenario loading


def load_schema() -> dict:
    return json.loads(resources.files("geochords").joinpath("scenario.schema.json").read_text())


def validate_scenario(scenario: dict) -> None:
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(scenario), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for e in errors:
            path = "/".join(str(p) for p in e.absolute_path) or "<root>"
            lines.append(f"{path}: {e.message}")
        raise ValidationFailure("scenario does not match the schema:\n  " + "\n  ".join(lines))


def _conditions(scenario):
    raw = scenario.get("condition")
    if raw is None:
        return []
    raw = raw if isinstance(raw, list) else [raw]
    return [condition_from_dict(c) for c in raw]


def prepare(scenario: dict):
    """Schema check plus construction and validation of the metric and the
    boundary conditions."""
    validate_scenario(scenario)
    try:
        metric = metric_from_dict(scenario["metric"])
        conds = _conditions(scenario)
        for c in conds:
            validate_condition(metric, c)
    except (DomainError, MetricError, ValueError, KeyError, TypeError) as exc:
        raise ValidationFailure(f"invalid metric or condition: {exc}") from exc
    task = scenario["task"]
    if task in ("find", "intersect", "perturb-verify") and not conds:
        raise ValidationFailure(f"task {task!r} needs a condition")
    if task in ("find", "intersect", "perturb-verify", "ot-chords") and "L" not in scenario.get("caps", {}):
        raise ValidationFailure(f"task {task!r} needs caps.L")
    if task == "count-growth":
        pts = scenario.get("points", {})
        if "p" not in pts or "q" not in pts or "t_grid" not in scenario.get("caps", {}):
            raise ValidationFailure("count-growth needs points.p, points.q and caps.t_grid")
    if task == "shear" and "shear" not in scenario:
        raise ValidationFailure("shear task needs a shear block")
    if task == "check-nondegenerate" and not scenario.get("segments"):
        raise ValidationFailure("check-nondegenerate needs segments")
    return metric, conds


# ---------------------------------------------------------------------------
# tasks


def _family_rows(families):
    rows = []
    for f in families:
        for s in f.solutions:
            rows.append([s.length, s.energy, s.kernel_dimension, s.index, s.classification, s.residual_norm,
                         s.equivalence_key])
    rows.sort(key=lambda r: (r[0], r[6]))
    return ["length", "energy", "kernel_dimension", "index", "classification", "residual_norm",
            "equivalence_key"], rows


def _solve_all(metric, conds, caps, tol, workers, seed):
    return [
        solve_family(metric, c, caps["L"], multistart=caps.get("multistart", 100), seed=seed, workers=workers,
                     tolerance=tol.get("integration", 1e-10), dedup_tol=tol.get("dedup", 1e-6))
        for c in conds
    ]


def _sorted_family_dict(f):
    d = f.to_dict()
    d["solutions"] = sorted(d["solutions"], key=lambda s: (s["length"], s["equivalence_key"]))
    d["search_log"] = {k: v for k, v in d["search_log"].items()}
    return d


def execute(scenario: dict, workers: int = 1, seed: int | None = None) -> dict:
    """Run a validated scenario; returns ``{"result", "summary"}``."""
    metric, conds = prepare(scenario)
    task = scenario["task"]
    caps = scenario.get("caps", {})
    tol = scenario.get("tolerances", {})
    seed = caps.get("seed", 0) if seed is None else seed
    itol = tol.get("intersection", 1e-7)

    if task == "find":
        fams = _solve_all(metric, conds, caps, tol, workers, seed)
        cols, rows = _family_rows(fams)
        return {"result": {"families": [_sorted_family_dict(f) for f in fams]}, "summary": (cols, rows)}

    if task == "intersect":
        fams = _solve_all(metric, conds, caps, tol, workers, seed)
        paths = sorted((s for f in fams for s in f.solutions), key=lambda s: (s.length, s.equivalence_key))
        M = intersection_matrix([s.path for s in paths], itol)
        cols = ["row"] + [f"col_{j}" for j in range(len(paths))]
        rows = [[i] + [int(c) for c in M.counts[i]] for i in range(len(paths))]
        return {
            "result": {
                "families": [_sorted_family_dict(f) for f in fams],
                "counts": M.counts.tolist(),
                "locations": [x.tolist() for x in M.locations],
                "cluster_diameters": list(M.cluster_diameters),
                "consistency_errors": list(map(str, M.consistency_errors)),
            },
            "summary": (cols, rows),
        }

    if task == "perturb-verify":
        pert = scenario.get("perturbation", {})
        rep = perturb_and_verify(
            metric, conds if len(conds) > 1 else conds[0], caps["L"], multistart=caps.get("multistart", 100),
            seed=seed, eta=pert.get("eta", 0.1), eps=pert.get("eps", 0.02), retries=pert.get("retries", 5),
            max_rounds=pert.get("max_rounds", 10), tolerance=itol,
        )
        d = rep.to_dict()
        d["final_probe_checksum"] = probe_checksum(rep.final_metric)
        cols = ["round", "total_events", "dip_points", "splits"]
        rows = [[r["round"], int(np.sum(r["counts"])), len(r["locations"]), len(r.get("split", []))]
                for r in rep.rounds]
        out = {"result": d, "summary": (cols, rows)}
        if not rep.success:
            raise NumericalFailure("perturbation budget exhausted before the intersection matrix vanished", out)
        return out

    if task == "count-growth":
        pts = scenario["points"]
        res = count_growth(metric, pts["p"], pts["q"], caps["t_grid"], multistart=caps.get("multistart", 2000),
                           seed=seed, workers=workers)
        rows = [[t, n] for t, n in res]
        return {"result": {"counts": rows}, "summary": (["cap", "count"], rows)}

    if task == "ot-chords":
        chords = find_orthogonal_tangent_chords(metric, caps["L"], multistart=caps.get("multistart", 100), seed=seed)
        rows = [[c.path.speed * c.path.t_end, c.residual_norm] for c in chords]
        rows.sort()
        return {"result": {"count": len(chords), "chords": rows}, "summary": (["length", "residual_norm"], rows)}

    if task == "convexity":
        r = is_strictly_convex(metric, samples=tol.get("convexity_samples", 100), seed=seed)
        row = [r.strictly_convex, r.min_curvature]
        return {"result": {"strictly_convex": r.strictly_convex, "min_kappa": r.min_curvature,
                           "argmin": r.argmin.tolist()},
                "summary": (["strictly_convex", "min_kappa"], [row])}

    if task == "check-nondegenerate":
        out, rows = [], []
        for seg in scenario["segments"]:
            p, v = np.asarray(seg["p"], float), np.asarray(seg["v"], float)
            path = shoot(metric, p, v, tolerance=tol.get("integration", 1e-10), variational=True)
            if path.exited:
                raise NumericalFailure("segment leaves the chart")
            cond = PointPair(p, path.end_point)
            rep = jacobi_propagate(path)
            conj = conjugate_points(rep)
            kd = kernel_dimension(path, cond)
            idx = morse_index(path, cond)
            item = {"length": path.length, "kernel_dimension": kd, "index": idx,
                    "conjugate_times": [[c.t, c.multiplicity] for c in conj]}
            out.append(item)
            first = conj[0].t if conj else float("nan")
            rows.append([path.length, kd, idx, len(conj), first])
        return {"result": {"segments": out},
                "summary": (["length", "kernel_dimension", "index", "conjugate_count", "first_conjugate_time"], rows)}

    if task == "shear":
        res = shear_check(metric, scenario["shear"], tol.get("integration", 1e-10), seed)
        cols = ["eps", "geodesic_residual", "tilt_cos", "tilt_error", "outside_mismatches", "c0_norm",
                "c0_norm_half_eps", "halving_ratio"]
        return {"result": res, "summary": (cols, [[res[k] for k in cols]])}

    raise ValidationFailure(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# output


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def summary_csv(cols, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        obj = float(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def build_report(scenario, workers, seed, status, payload=None, error=None) -> dict:
    report = {
        "header": {
            "schema_version": REPORT_SCHEMA_VERSION,
            "tool_version": __version__,
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        },
        "scenario": scenario,
        "run": {"workers": workers, "seed": seed},
        "status": status,
    }
    if payload is not None:
        report["result"] = payload["result"]
        cols, rows = payload["summary"]
        report["summary"] = {"columns": cols, "rows": rows}
    if error is not None:
        report["error"] = error
    return _jsonable(report)


def write_outputs(out_dir: Path, report: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if "summary" in report:
        s = report["summary"]
        (out_dir / "summary.csv").write_text(summary_csv(s["columns"], s["rows"]))


def run(scenario_path, out_dir, workers: int = 1, seed: int | None = None) -> int:
    out_dir = Path(out_dir)
    try:
        scenario = json.loads(Path(scenario_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read scenario: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        payload = execute(scenario, workers=workers, seed=seed)
    except ValidationFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalFailure as exc:
        write_outputs(out_dir, build_report(scenario, workers, seed, "numerical-failure", exc.partial, str(exc)))
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (IntegrationError, BifurcationSuspectError, SeparationFailedError, np.linalg.LinAlgError,
            FloatingPointError) as exc:
        write_outputs(out_dir, build_report(scenario, workers, seed, "numerical-failure", None, str(exc)))
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    write_outputs(out_dir, build_report(scenario, workers, seed, "ok", payload))
    return EXIT_OK


# ---------------------------------------------------------------------------
# replay


def diff_trees(old, new, tolerances: dict | None = None, default: float = DEFAULT_REPLAY_TOLERANCE, path="") -> list:
    """Field-by-field comparison.  Numeric leaves differing at all are
    listed with a ``within`` flag against ``|a - b| <= tol * max(1, |a|)``;
    structural or string mismatches are never within tolerance."""
    tolerances = tolerances or {}
    out = []
    if isinstance(old, dict) and isinstance(new, dict):
        for k in sorted(set(old) | set(new)):
            sub = f"{path}.{k}" if path else str(k)
            if k not in old or k not in new:
                out.append({"field": sub, "recorded": old.get(k), "recomputed": new.get(k), "within": False})
            else:
                out += diff_trees(old[k], new[k], tolerances, default, sub)
        return out
    if isinstance(old, list) and isinstance(new, list):
        if len(old) != len(new):
            return [{"field": path, "recorded": len(old), "recomputed": len(new), "within": False}]
        for i, (a, b) in enumerate(zip(old, new)):
            out += diff_trees(a, b, tolerances, default, f"{path}[{i}]")
        return out
    num = (int, float)
    if isinstance(old, num) and isinstance(new, num) and not isinstance(old, bool) and not isinstance(new, bool):
        if old == new:
            return []
        tol = default
        for pattern, value in tolerances.items():
            if fnmatch.fnmatchcase(path, pattern):
                tol = value
        d = abs(old - new)
        return [{"field": path, "recorded": old, "recomputed": new, "abs_diff": d, "tolerance": tol,
                 "within": bool(d <= tol * max(1.0, abs(old)))}]
    if old != new:
        return [{"field": path, "recorded": old, "recomputed": new, "within": False}]
    return []


def replay(report_path, tolerances: dict | None = None, default: float = DEFAULT_REPLAY_TOLERANCE,
           out_dir=None) -> tuple[int, list]:
    try:
        report = json.loads(Path(report_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read report: {exc}", file=sys.stderr)
        return EXIT_VALIDATION, []
    version = report.get("header", {}).get("schema_version")
    if version != REPORT_SCHEMA_VERSION:
        print(f"error: report schema version {version!r} is not supported (expected {REPORT_SCHEMA_VERSION})",
              file=sys.stderr)
        return EXIT_VALIDATION, []
    scenario, run_opts = report["scenario"], report.get("run", {})
    try:
        payload = execute(scenario, workers=run_opts.get("workers", 1), seed=run_opts.get("seed"))
        status = "ok"
    except ValidationFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION, []
    except NumericalFailure as exc:
        payload, status = exc.partial, "numerical-failure"
    fresh = build_report(scenario, run_opts.get("workers", 1), run_opts.get("seed"), status, payload)
    diff = diff_trees({k: report.get(k) for k in ("status", "result", "summary")},
                      {k: fresh.get(k) for k in ("status", "result", "summary")}, tolerances, default)
    if scenario.get("task") == "perturb-verify" and "result" in report:
        rebuilt = metric_from_dict(report["result"]["final_metric"])
        chk = probe_checksum(rebuilt)
        if chk != report["result"].get("final_probe_checksum"):
            diff.append({"field": "result.final_probe_checksum(rebuilt)", "recorded":
                         report["result"].get("final_probe_checksum"), "recomputed": chk, "within": False})
    if out_dir is not None:
        write_outputs(Path(out_dir), fresh)
    code = EXIT_OK if all(d["within"] for d in diff) else EXIT_NUMERICAL
    return code, diff


# ---------------------------------------------------------------------------
# entry point


def _parse_tolerance(items):
    out = {}
    for it in items or []:
        key, _, val = it.partition("=")
        if not _:
            raise argparse.ArgumentTypeError(f"tolerance override {it!r} must look like FIELD=VALUE")
        out[key] = float(val)
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="geochords", description="Geodesic chord and segment scenarios.")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run a scenario file")
    p_run.add_argument("scenario")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--workers", type=int, default=1)
    p_run.add_argument("--seed", type=int, default=None, help="overrides caps.seed")
    p_rep = sub.add_parser("replay", help="rerun a report and diff the numbers")
    p_rep.add_argument("report")
    p_rep.add_argument("--tolerance", action="append", metavar="FIELD=VALUE",
                       help="per-field tolerance (glob on dotted field paths); repeatable")
    p_rep.add_argument("--default-tolerance", type=float, default=DEFAULT_REPLAY_TOLERANCE)
    p_rep.add_argument("--out", default=None, help="write the recomputed report here")
    args = parser.parse_args(argv)
    if args.command == "run":
        if args.workers < 1:
            parser.error("--workers must be >= 1")
        return run(args.scenario, args.out, args.workers, args.seed)
    code, diff = replay(args.report, _parse_tolerance(args.tolerance), args.default_tolerance, args.out)
    print(json.dumps(_jsonable(diff), indent=2))
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
