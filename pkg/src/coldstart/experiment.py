"""Prefix-assignment experiment: success and quality curves, breakpoint, intersection.

The cluster model is fit once on full histories and frozen; each user's rating
prefix of length t is assigned against those fixed centroids and compared with
the assignment of the full row. The per-t evaluation is batched: one sparse
matrix of all selected users' prefixes per t, so curve generation stays fast
at dataset scale and is bit-stable for any worker thread count.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import sparse

from .dataset import BY_ITEM_INDEX, PrefixOrdering, RatingMatrix
from .errors import DegenerateModelError, NoIntersectionError
from .kmeans import ClusterModel, _assign_all
from .quality import davies_bouldin

SEGMENTED_LINEAR = "segmented_linear"
KNEEDLE = "kneedle"
EXP_TANGENT = "exp_tangent"


class SuccessPoint(NamedTuple):
    t: int
    success_fraction: float
    n_evaluated: int


class QualityPoint(NamedTuple):
    t: int
    current_quality_mean: float
    reference_quality_mean: float


@dataclass(frozen=True)
class SuccessCurve:
    """Fraction of users whose length-t prefix lands in their final cluster.

    Only users with at least t ratings contribute at t; the curve stops once
    nobody is left to evaluate.
    """

    points: tuple[SuccessPoint, ...]


@dataclass(frozen=True)
class QualityCurve:
    """Mean signed cluster-quality term of prefix-assigned vs final clusters.

    Prefixes saturate at each user's history length, so every user contributes
    at every t and the two series coincide exactly once t covers the longest
    history.
    """

    points: tuple[QualityPoint, ...]


class LineFit(NamedTuple):
    slope: float
    intercept: float
    sse: float


@dataclass(frozen=True)
class BreakpointReport:
    t_star: int
    method: str
    left_fit: LineFit
    right_fit: LineFit
    total_sse: float
    search_range: tuple[int, int]


@dataclass(frozen=True)
class IntersectionReport:
    log_fit: tuple[float, float]  # (a, b) of y = a + b*ln t
    reference_level: float
    t_cross: float
    extrapolated: bool


def _prefix_ranks(m: RatingMatrix, ordering: PrefixOrdering) -> np.ndarray:
    """Within-row rank of every stored rating under the prefix ordering."""
    starts = np.repeat(m.indptr[:-1], np.diff(m.indptr))
    if ordering.kind == "by_item_index":
        return np.arange(m.n_ratings, dtype=np.int64) - starts
    if m.timestamps is None:
        raise ValueError("by_timestamp ordering needs a matrix with timestamps")
    owner = np.repeat(np.arange(m.n_users), np.diff(m.indptr))
    order = np.lexsort((m.indices, m.timestamps, owner))
    ranks = np.empty(m.n_ratings, dtype=np.int64)
    ranks[order] = np.arange(m.n_ratings, dtype=np.int64) - starts
    return ranks


def _gather_users(m: RatingMatrix, users: np.ndarray):
    """Concatenated row segments (positions into the nnz arrays) for the given users."""
    lens = m.indptr[users + 1] - m.indptr[users]
    total = int(lens.sum())
    seg = np.repeat(np.arange(len(users)), lens)
    shift = np.concatenate([[0], np.cumsum(lens)[:-1]])
    pos = np.arange(total) - shift[seg] + np.repeat(m.indptr[users], lens)
    return pos, seg, lens


def _validate_users(model: ClusterModel, m: RatingMatrix, users) -> np.ndarray:
    users = np.asarray(users, dtype=np.int64)
    if users.size == 0:
        raise ValueError("user list is empty")
    if users.min() < 0 or users.max() >= m.n_users:
        raise ValueError("user index out of range")
    if m.n_items != model.n_items:
        raise ValueError("matrix item space does not match the model")
    return users


def _prefix_labels(
    model: ClusterModel,
    m: RatingMatrix,
    users: np.ndarray,
    t_max: int,
    ordering: PrefixOrdering,
    threads: int,
):
    """Yield (t, labels of every user's min(t, history)-length prefix) for t = 1..t_max."""
    rank = _prefix_ranks(m, ordering)
    pos, _, lens = _gather_users(m, users)
    sub_idx = m.indices[pos].astype(np.int32)
    sub_val = m.values[pos]
    sub_rank = rank[pos]
    for t in range(1, t_max + 1):
        keep = sub_rank < t
        counts = np.minimum(lens, t)
        indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        X = sparse.csr_matrix(
            (sub_val[keep], sub_idx[keep], indptr), shape=(len(users), m.n_items)
        )
        sq = np.concatenate([[0.0], np.cumsum(X.data**2)])
        xnorms = sq[indptr[1:]] - sq[indptr[:-1]]
        labels, _ = _assign_all(X, xnorms, model.centroids, threads)
        yield t, labels


def _final_labels(
    model: ClusterModel, m: RatingMatrix, users: np.ndarray, threads: int
) -> np.ndarray:
    """Assignment of each user's full row against the frozen centroids."""
    pos, _, lens = _gather_users(m, users)
    indptr = np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)
    X = sparse.csr_matrix(
        (m.values[pos], m.indices[pos].astype(np.int32), indptr),
        shape=(len(users), m.n_items),
    )
    sq = np.concatenate([[0.0], np.cumsum(X.data**2)])
    xnorms = sq[indptr[1:]] - sq[indptr[:-1]]
    labels, _ = _assign_all(X, xnorms, model.centroids, threads)
    return labels


def success_curve(
    model: ClusterModel,
    m: RatingMatrix,
    users,
    t_max: int,
    ordering: PrefixOrdering = BY_ITEM_INDEX,
    *,
    threads: int = 1,
) -> SuccessCurve:
    """Per-prefix-length agreement with the final cluster over users with >= t ratings."""
    users = _validate_users(model, m, users)
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    final = _final_labels(model, m, users, threads)
    lens = m.indptr[users + 1] - m.indptr[users]
    t_stop = min(t_max, int(lens.max()))
    points = []
    for t, labels in _prefix_labels(model, m, users, t_stop, ordering, threads):
        active = lens >= t
        n_eval = int(active.sum())
        if n_eval == 0:
            break
        frac = float((labels[active] == final[active]).mean())
        points.append(SuccessPoint(t, frac, n_eval))
    return SuccessCurve(points=tuple(points))


def quality_curve(
    model: ClusterModel,
    m: RatingMatrix,
    users,
    t_max: int,
    ordering: PrefixOrdering = BY_ITEM_INDEX,
    *,
    threads: int = 1,
) -> QualityCurve:
    """Mean signed quality of prefix-assigned clusters versus final clusters.

    Every user contributes at every t with a prefix capped at their history
    length, so the reference series is constant and the current series meets
    it exactly at saturation.
    """
    users = _validate_users(model, m, users)
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    terms = davies_bouldin(model, m).per_cluster_db_term
    final = _final_labels(model, m, users, threads)
    ref_terms = terms[final]
    if np.isnan(ref_terms).any():
        raise DegenerateModelError("a final cluster has no usable quality term")
    reference = float(np.mean(-ref_terms))
    points = []
    for t, labels in _prefix_labels(model, m, users, t_max, ordering, threads):
        cur_terms = terms[labels]
        if np.isnan(cur_terms).any():
            raise DegenerateModelError(
                f"prefix assignment at t={t} reached a cluster with no quality term"
            )
        points.append(QualityPoint(t, float(np.mean(-cur_terms)), reference))
    return QualityCurve(points=tuple(points))


def split_by_min_count(m: RatingMatrix) -> tuple[int, np.ndarray, np.ndarray]:
    """Users holding exactly the dataset's minimum rating count, and everyone else."""
    lengths = m.row_lengths()
    mn = int(lengths.min())
    return mn, np.flatnonzero(lengths == mn), np.flatnonzero(lengths > mn)


def _ols_line(t: np.ndarray, y: np.ndarray) -> LineFit:
    slope, intercept = np.polyfit(t, y, 1)
    resid = y - (slope * t + intercept)
    return LineFit(float(slope), float(intercept), float(resid @ resid))


def _exp_tangent_model(t: np.ndarray, amp: float, tau: float, knee: float) -> np.ndarray:
    """Exponential rise that continues along its own tangent beyond the knee."""
    head = amp * (1.0 - np.exp(-t / tau))
    slope = amp / tau * np.exp(-knee / tau)
    y_knee = amp * (1.0 - np.exp(-knee / tau))
    return np.where(t <= knee, head, y_knee + slope * (t - knee))


def _fit_exp_tangent(tr: np.ndarray, yr: np.ndarray, candidates: list[int]):
    """Best integer knee for the joint exponential-plus-tangent model.

    The tangent graft is C1-smooth, so no line-based split can see it; the
    knee is only identifiable through the exponential's global shape, which
    this joint least-squares fit uses.
    """
    from scipy.optimize import OptimizeWarning, curve_fit

    best = None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OptimizeWarning)
        for ts in candidates:
            p0 = (max(float(yr.max()), 1e-9), max(ts / 3.0, 1.0))
            try:
                params, _ = curve_fit(
                    lambda tt, amp, tau: _exp_tangent_model(tt, amp, tau, ts),
                    tr,
                    yr,
                    p0=p0,
                    maxfev=2000,
                )
            except RuntimeError:
                continue
            resid = yr - _exp_tangent_model(tr, params[0], params[1], ts)
            total = float(resid @ resid)
            if best is None or total < best[0]:
                best = (total, ts, float(params[0]), float(params[1]))
    if best is None:
        raise ValueError("exp_tangent fit failed at every candidate knee")
    return best


def detect_breakpoint(
    curve: SuccessCurve,
    method: str = SEGMENTED_LINEAR,
    t_min: int | None = None,
    t_max: int | None = None,
) -> BreakpointReport:
    """Locate the prefix length where curve growth changes regime.

    segmented_linear scans every integer candidate t* in (t_min, t_max),
    fits an ordinary least-squares line to the points at t < t* and another
    to the points from t* on, and keeps the candidate with the smallest
    summed SSE (ties to the smallest t*); it pinpoints slope discontinuities.
    kneedle takes the point farthest from the chord between the curve's
    endpoints after min-max normalization. exp_tangent jointly fits an
    exponential rise grafted onto its own tangent at the knee — the right
    model when the regime change is smooth rather than a slope break.
    All methods require at least 4 points on each side of every candidate.

    For segmented_linear, total_sse is left SSE + right SSE; for the other
    methods the side fits are descriptive and total_sse is the chosen
    model's own residual SSE (kneedle reports the two-line total).
    """
    if method not in (SEGMENTED_LINEAR, KNEEDLE, EXP_TANGENT):
        raise ValueError(f"unknown method {method!r}")
    t = np.array([p.t for p in curve.points], dtype=np.float64)
    y = np.array([p.success_fraction for p in curve.points], dtype=np.float64)
    lo = int(t[0]) if t_min is None else int(t_min)
    hi = int(t[-1]) if t_max is None else int(t_max)
    in_range = (t >= lo) & (t <= hi)
    tr, yr = t[in_range], y[in_range]
    # Candidate split points: >= 4 points on each side, strictly inside [lo, hi].
    # The left segment is t < t*, the right t >= t*: on a continuous hinge the
    # knee point lies on both lines, and this split makes the smallest zero-SSE
    # candidate the knee itself.
    candidates = [
        int(ts)
        for ts in tr
        if lo < ts < hi and (tr < ts).sum() >= 4 and (tr >= ts).sum() >= 4
    ]
    if not candidates:
        raise ValueError(
            "too few points for breakpoint detection "
            "(need >= 4 on each side of a candidate)"
        )

    if method == SEGMENTED_LINEAR:
        fits = []
        for ts in candidates:
            left = tr < ts
            lf = _ols_line(tr[left], yr[left])
            rf = _ols_line(tr[~left], yr[~left])
            fits.append((lf.sse + rf.sse, ts, lf, rf))
        # ties go to the smallest t*; "tie" tolerates float dust so that the
        # exactly-recoverable cases (piecewise-linear, flat) stay deterministic
        min_total = min(f[0] for f in fits)
        tol = 1e-9 * (1.0 + min_total)
        total, t_star, lf, rf = next(f for f in fits if f[0] <= min_total + tol)
    elif method == EXP_TANGENT:
        total, t_star, amp, tau = _fit_exp_tangent(tr, yr, candidates)
        left = tr < t_star
        lf = _ols_line(tr[left], yr[left])
        # the grafted tangent itself, as a line in t
        slope = amp / tau * np.exp(-t_star / tau)
        y_knee = amp * (1.0 - np.exp(-t_star / tau))
        resid = yr[~left] - (y_knee + slope * (tr[~left] - t_star))
        rf = LineFit(float(slope), float(y_knee - slope * t_star), float(resid @ resid))
    else:
        tn = (tr - tr[0]) / (tr[-1] - tr[0])
        span = yr.max() - yr.min()
        yn = (yr - yr.min()) / span if span > 0 else np.zeros_like(yr)
        # distance from each normalized point to the endpoint chord
        dx, dy = tn[-1] - tn[0], yn[-1] - yn[0]
        norm = np.hypot(dx, dy)
        dist = np.abs(dx * (yn - yn[0]) - dy * (tn - tn[0])) / norm
        allowed = np.isin(tr, candidates)
        dist = np.where(allowed, dist, -np.inf)
        t_star = int(tr[int(np.argmax(dist))])
        left = tr < t_star
        lf = _ols_line(tr[left], yr[left])
        rf = _ols_line(tr[~left], yr[~left])
        total = lf.sse + rf.sse

    return BreakpointReport(
        t_star=t_star,
        method=method,
        left_fit=lf,
        right_fit=rf,
        total_sse=total,
        search_range=(lo, hi),
    )


def regression_intersection(curve: QualityCurve) -> IntersectionReport:
    """Where the log-fit of the current series reaches the reference level.

    Fits y = a + b*ln t to the current series; a non-positive b means the
    series is not converging upward and there is no crossing to report.
    """
    if len(curve.points) < 3:
        raise ValueError("need at least 3 points to fit the regression")
    t = np.array([p.t for p in curve.points], dtype=np.float64)
    cur = np.array([p.current_quality_mean for p in curve.points])
    ref = float(np.mean([p.reference_quality_mean for p in curve.points]))
    b, a = np.polyfit(np.log(t), cur, 1)
    if b <= 0:
        raise NoIntersectionError(
            f"current-quality log fit has slope {b:.6g} <= 0; curves do not cross"
        )
    exponent = (ref - a) / b
    t_cross = float(np.exp(np.clip(exponent, -745.0, 709.0)))
    if exponent > 709.0:
        t_cross = float("inf")
    return IntersectionReport(
        log_fit=(float(a), float(b)),
        reference_level=ref,
        t_cross=t_cross,
        extrapolated=not (t[0] <= t_cross <= t[-1]),
    )


def write_success_csv(curve: SuccessCurve, dest: str | Path) -> None:
    with open(dest, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "success_fraction", "n_evaluated"])
        for p in curve.points:
            w.writerow([p.t, repr(p.success_fraction), p.n_evaluated])


def read_success_csv(source: str | Path) -> SuccessCurve:
    with open(source, "r", encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows or rows[0] != ["t", "success_fraction", "n_evaluated"]:
        raise ValueError(f"not a success-curve CSV: {source}")
    points = tuple(
        SuccessPoint(int(r[0]), float(r[1]), int(r[2])) for r in rows[1:]
    )
    return SuccessCurve(points=points)


def write_quality_csv(curve: QualityCurve, dest: str | Path) -> None:
    with open(dest, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "current_quality_mean", "reference_quality_mean"])
        for p in curve.points:
            w.writerow([p.t, repr(p.current_quality_mean), repr(p.reference_quality_mean)])


def read_quality_csv(source: str | Path) -> QualityCurve:
    with open(source, "r", encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows or rows[0] != ["t", "current_quality_mean", "reference_quality_mean"]:
        raise ValueError(f"not a quality-curve CSV: {source}")
    points = tuple(
        QualityPoint(int(r[0]), float(r[1]), float(r[2])) for r in rows[1:]
    )
    return QualityCurve(points=points)


def write_breakpoint_report(report: BreakpointReport, dest: str | Path) -> None:
    """Plain-text key=value block consumed by humans and the run summary."""
    with open(dest, "w", encoding="utf-8") as fh:
        fh.write(f"t_star={report.t_star}\n")
        fh.write(f"method={report.method}\n")
        fh.write(f"left_slope={report.left_fit.slope!r}\n")
        fh.write(f"right_slope={report.right_fit.slope!r}\n")
        fh.write(f"total_sse={report.total_sse!r}\n")
