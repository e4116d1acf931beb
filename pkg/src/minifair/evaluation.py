"""Group RMSE, Welch's t-test and trace serialization."""
from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from minifair import mf
from minifair.data import RatingSet
from minifair.errors import EmptyGroup, InsufficientSamples

VARIANCE_FLOOR = 1e-12
ALPHA = 0.01


def _betacf(a: float, b: float, x: float, max_iter: int = 500, eps: float = 3e-16) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: float) -> float:
    if math.isnan(t) or math.isnan(df):
        return math.nan
    if math.isinf(t):
        return 0.0
    p = regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
    return min(1.0, max(0.0, p))


def welch_t_test(a, b) -> tuple[float, float]:
    """Two-sided Welch t-test; returns ``(t, p)``.

    Sample variances are floored at ``VARIANCE_FLOOR`` so constant samples
    give a finite (typically huge) t instead of dividing by zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise InsufficientSamples(f"need at least 2 samples per group, got {len(a)} and {len(b)}")
    na, nb = len(a), len(b)
    va = max(float(a.var(ddof=1)), VARIANCE_FLOOR)
    vb = max(float(b.var(ddof=1)), VARIANCE_FLOOR)
    sa, sb = va / na, vb / nb
    t = (float(a.mean()) - float(b.mean())) / math.sqrt(sa + sb)
    df = (sa + sb) ** 2 / (sa * sa / (na - 1) + sb * sb / (nb - 1))
    return t, student_t_two_sided_p(t, df)


@dataclass(frozen=True)
class GroupReport:
    rmse_protected: float
    rmse_unprotected: float
    rmse_diff: float
    n_protected: int
    n_unprotected: int
    t_statistic: float
    p_value: float
    significant: bool


def _per_user_means(test: RatingSet, se: np.ndarray) -> np.ndarray:
    users, _, _ = test.to_arrays()
    uniq, inv = np.unique(users, return_inverse=True)
    return np.bincount(inv, weights=se) / np.bincount(inv)


def group_report(m: mf.MfModel, test_protected: RatingSet, test_unprotected: RatingSet,
                 unit: str = "rating") -> GroupReport:
    """Per-group RMSE plus a Welch test on squared errors.

    ``unit="user"`` tests per-user mean squared errors instead of per-rating
    ones.
    """
    if len(test_protected) == 0 or len(test_unprotected) == 0:
        raise EmptyGroup("both groups need test ratings")
    se_p = mf.squared_errors(m, test_protected)
    se_u = mf.squared_errors(m, test_unprotected)
    rp = float(np.sqrt(np.mean(se_p)))
    ru = float(np.sqrt(np.mean(se_u)))
    if unit == "user":
        sample_p, sample_u = _per_user_means(test_protected, se_p), _per_user_means(test_unprotected, se_u)
    elif unit == "rating":
        sample_p, sample_u = se_p, se_u
    else:
        raise ValueError(f"unknown t-test unit {unit!r}")
    try:
        t, p = welch_t_test(sample_p, sample_u)
    except InsufficientSamples:
        t, p = math.nan, math.nan
    return GroupReport(rp, ru, rp - ru, len(se_p), len(se_u), t, p, bool(p < ALPHA))


def combined_rmse(report: GroupReport) -> float:
    n = report.n_protected + report.n_unprotected
    return math.sqrt((report.n_protected * report.rmse_protected ** 2
                      + report.n_unprotected * report.rmse_unprotected ** 2) / n)


@dataclass(frozen=True)
class TracePoint:
    iteration: int
    n_known: int
    acq_protected: int
    acq_unprotected: int
    rmse_all: float
    rmse_protected: float
    rmse_unprotected: float
    rmse_diff: float
    t_stat: float
    p_value: float


@dataclass
class SimulationTrace:
    points: list[TracePoint] = field(default_factory=list)
    strategy: str = ""
    mode: str = ""
    seed: int = 0

    def append(self, point: TracePoint) -> None:
        if self.points:
            last = self.points[-1]
            if point.iteration <= last.iteration:
                raise ValueError("trace iterations must be strictly increasing")
            if point.n_known < last.n_known:
                raise ValueError("known-set size must be non-decreasing")
        self.points.append(point)

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(p, name) for p in self.points])

    def at(self, iteration: int) -> TracePoint | None:
        for p in self.points:
            if p.iteration == iteration:
                return p
        return None


ROLLING_WINDOW = 10
CSV_HEADER = [f.name for f in fields(TracePoint)] + ["rolling_rmse_all_w10"]


def rolling_mean(values, window: int = ROLLING_WINDOW) -> np.ndarray:
    """Mean of the last ``min(k + 1, window)`` values at every position k."""
    values = np.asarray(values, dtype=np.float64)
    out = np.empty_like(values)
    for k in range(len(values)):
        out[k] = values[max(0, k - window + 1): k + 1].mean()
    return out


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    s = f"{v:.6f}"
    return "0.000000" if s == "-0.000000" else s


def trace_rows(trace: SimulationTrace) -> list[list[str]]:
    # rolling mean over the printed values so a parsed file re-serializes byte for byte
    printed = [float(_fmt(float(p.rmse_all))) for p in trace.points]
    rolling = rolling_mean(printed) if printed else []
    rows = []
    for p, r in zip(trace.points, rolling):
        rows.append([_fmt(getattr(p, name)) for name in CSV_HEADER[:-1]] + [_fmt(float(r))])
    return rows


def write_atomic(path: str | Path, text: str) -> None:
    """Write UTF-8 text via a temp file in the same directory and rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header: list[str], rows: list[list[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def trace_to_csv(trace: SimulationTrace, path: str | Path) -> None:
    if not trace.points:
        raise ValueError("refusing to write an empty trace")
    write_atomic(path, csv_text(CSV_HEADER, trace_rows(trace)))


def read_trace_csv(path: str | Path) -> SimulationTrace:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected trace header in {path}")
        trace = SimulationTrace()
        for row in reader:
            vals = dict(zip(header, row))
            trace.append(TracePoint(
                iteration=int(vals["iteration"]),
                n_known=int(vals["n_known"]),
                acq_protected=int(vals["acq_protected"]),
                acq_unprotected=int(vals["acq_unprotected"]),
                rmse_all=float(vals["rmse_all"]),
                rmse_protected=float(vals["rmse_protected"]),
                rmse_unprotected=float(vals["rmse_unprotected"]),
                rmse_diff=float(vals["rmse_diff"]),
                t_stat=float(vals["t_stat"]),
                p_value=float(vals["p_value"]),
            ))
    return trace
