"""Test-split metrics: optimality gaps, constraint errors, violation counts,
and wall time, with two-level max/geometric-mean aggregation.

Per instance, inequality and equality errors are aggregated over constraint
rows (max and gmean), then over instances. Optimality gaps are signed (the
nonconvex family's oracle is local, so negative gaps are possible); geometric
means are taken over the positive part with a small floor.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, fields
from typing import Callable, Sequence

import numpy as np

from .constraints import ConstraintSet
from .errors import ContractError
from .models import Mlp, forward
from .problems import Dataset, ProblemInstance
from .repair import RepairConfig, correction_descent, posthoc_project, snare_repair

EVAL_METHODS = ("snare", "soft", "soft-epochs-then-hard", "penalty-grad", "posthoc")

GMEAN_FLOOR = 1e-16
VIOLATION_THRESHOLD = 1e-4

REPORT_COLUMNS = [
    "method",
    "seed",
    "tol",
    "max_opt_gap",
    "gmean_opt_gap",
    "max_ineq_error",
    "gmean_ineq_error",
    "max_eq_error",
    "gmean_eq_error",
    "n_ineq_violations",
    "n_eq_violations",
    "wall_time_per_instance",
]

CURVE_COLUMNS = [
    "epoch",
    "seed",
    "gmean_opt_gap",
    "max_opt_gap",
    "gmean_ineq_viol",
    "max_ineq_viol",
    "gmean_eq_viol",
    "max_eq_viol",
]


def gmean(values, floor: float = GMEAN_FLOOR) -> float:
    """Geometric mean with a floor absorbing zeros."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ContractError("gmean of an empty collection")
    return float(np.exp(np.mean(np.log(np.maximum(arr, floor)))))


def optimality_gap(y: np.ndarray, instance: ProblemInstance) -> float:
    """f_x(y) - f_x* against the cached oracle objective (signed)."""
    if instance.f_star is None:
        raise ContractError(
            f"instance {instance.index} has no cached oracle solution; run oracle_solve first"
        )
    return instance.family.objective(np.asarray(y, dtype=np.float64)) - instance.f_star


def constraint_errors(cs: ConstraintSet, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(inequality violations, equality errors) per constraint row."""
    v = cs.violation(y)
    eq = cs.equality_mask
    return v[~eq], v[eq]


@dataclass
class MetricsReport:
    method: str
    seed: int
    tol: float
    max_opt_gap: float
    gmean_opt_gap: float
    max_ineq_error: float
    gmean_ineq_error: float
    max_eq_error: float
    gmean_eq_error: float
    n_ineq_violations: float
    n_eq_violations: float
    wall_time_per_instance: float

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        vals = dict(d)
        vals["seed"] = int(vals["seed"])
        for f in fields(cls):
            if f.name not in ("method", "seed"):
                vals[f.name] = float(vals[f.name])
        return cls(**vals)


def split_metrics(gaps, ineq_rows, eq_rows) -> dict:
    """Two-level aggregation of per-instance gap and constraint-error vectors."""
    gaps = np.asarray(gaps, dtype=np.float64)
    out = {
        "max_opt_gap": float(gaps.max()) if gaps.size else 0.0,
        "gmean_opt_gap": gmean(np.maximum(gaps, 0.0)) if gaps.size else 0.0,
    }
    for tag, rows in (("ineq", ineq_rows), ("eq", eq_rows)):
        per_max = [float(r.max()) for r in rows if r.size]
        per_gmean = [gmean(r) for r in rows if r.size]
        out[f"max_{tag}_error"] = max(per_max) if per_max else 0.0
        out[f"gmean_{tag}_error"] = gmean(per_gmean) if per_gmean else 0.0
    return out


def violation_counts(rows: Sequence[np.ndarray], threshold: float = VIOLATION_THRESHOLD) -> float:
    """Mean over instances of the number of rows violated beyond `threshold`."""
    if not rows:
        return 0.0
    return float(np.mean([int(np.sum(r > threshold)) for r in rows]))


def evaluate_split(
    ds: Dataset,
    indices: Sequence[int],
    predict: Callable[[int], np.ndarray],
    method: str,
    seed: int,
    tol: float,
) -> MetricsReport:
    """Run `predict` over instances, timing it, and aggregate all metrics.

    `predict(i)` returns the final (already repaired/projected/corrected)
    output for instance i; wall time covers exactly those calls.
    """
    gaps, ineq_rows, eq_rows = [], [], []
    elapsed = 0.0
    for i in indices:
        t0 = time.perf_counter()
        y = predict(i)
        elapsed += time.perf_counter() - t0
        inst = ds.instance(i)
        gaps.append(optimality_gap(y, inst))
        iv, ev = constraint_errors(ds.constraint_set(i), y)
        ineq_rows.append(iv)
        eq_rows.append(ev)
    agg = split_metrics(gaps, ineq_rows, eq_rows)
    return MetricsReport(
        method=method,
        seed=seed,
        tol=tol,
        n_ineq_violations=violation_counts(ineq_rows),
        n_eq_violations=violation_counts(eq_rows),
        wall_time_per_instance=elapsed / max(len(list(indices)), 1),
        **agg,
    )


def method_predictor(
    method: str,
    model: Mlp,
    ds: Dataset,
    tol: float = 1e-6,
    lam: float = 0.01,
    max_iters: int = 100,
    correction_steps: int = 10,
    correction_lr: float = 1e-2,
) -> Callable[[int], np.ndarray]:
    """Inference map for one trained model under a method's repair semantics.

    The snare-style methods run the iterative repair with zero slack at the
    requested tolerance; posthoc projects; penalty-grad applies its fixed
    correction steps; soft returns the raw prediction.
    """
    if method not in EVAL_METHODS:
        raise ContractError(f"unknown method {method!r}; expected one of {EVAL_METHODS}")

    def predict(i: int) -> np.ndarray:
        y_hat = forward(model, ds.x[i]).data
        cs = ds.constraint_set(i)
        if method in ("snare", "soft-epochs-then-hard"):
            cfg = RepairConfig(lam=lam, tol=tol, max_iters=max_iters)
            return snare_repair(y_hat, cs, cfg)[0].data
        if method == "posthoc":
            return posthoc_project(y_hat, cs).y
        if method == "penalty-grad":
            return correction_descent(y_hat, cs, correction_steps, correction_lr).data
        return y_hat

    return predict


def aggregate_reports(reports: Sequence[MetricsReport]) -> list[MetricsReport]:
    """Mean and std rows over seeds for each (method, tol) group."""
    groups: dict[tuple[str, float], list[MetricsReport]] = {}
    for r in reports:
        groups.setdefault((r.method, r.tol), []).append(r)
    out = []
    numeric = [f.name for f in fields(MetricsReport) if f.name not in ("method", "seed", "tol")]
    for (method, tol), rs in groups.items():
        for stat, fn in (("mean", np.mean), ("std", np.std)):
            vals = {name: float(fn([getattr(r, name) for r in rs])) for name in numeric}
            out.append(MetricsReport(method=f"{method}:{stat}", seed=-1, tol=tol, **vals))
    return out


def reports_to_csv(reports: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in reports:
        d = r.to_dict()
        writer.writerow([_fmt(d[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def reports_from_csv(text: str) -> list[MetricsReport]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [MetricsReport.from_dict(row) for row in rows]


def reports_to_json(reports: Sequence[MetricsReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=0, sort_keys=True)


def reports_from_json(text: str) -> list[MetricsReport]:
    return [MetricsReport.from_dict(d) for d in json.loads(text)]


def curves_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in CURVE_COLUMNS])
    return buf.getvalue()


def curves_from_csv(text: str) -> list[dict]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        parsed = {"epoch": int(row["epoch"]), "seed": int(row["seed"])}
        for k in CURVE_COLUMNS[2:]:
            parsed[k] = float(row[k])
        out.append(parsed)
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)
