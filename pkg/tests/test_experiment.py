import numpy as np
import pytest

from coldstart import experiment as xp
from coldstart.dataset import BY_ITEM_INDEX, BY_TIMESTAMP
from coldstart.errors import NoIntersectionError
from coldstart.kmeans import KMeansConfig, fit


def _curve(ts, ys, n=100):
    pts = tuple(
        xp.SuccessPoint(int(t), float(y), n) for t, y in zip(ts, ys)
    )
    return xp.SuccessCurve(pts)


# ---------------------------------------------------------------- success curve

def test_success_curve_toy(mk_matrix):
    # user 3 has a single rating; user 2's 1-prefix is pulled into the
    # low-norm cluster by the zero-filled unrated dimension
    m = mk_matrix(
        [
            [1.0, 1.0],
            [1.2, 0.9],
            [9.0, 9.0],
            [1.1, np.nan],
        ]
    )
    model = fit(m, KMeansConfig(n_clusters=2, seed=0))
    sc = xp.success_curve(model, m, [0, 1, 2, 3], t_max=5)
    assert sc.points == (
        xp.SuccessPoint(1, 0.75, 4),
        xp.SuccessPoint(2, 1.0, 3),
    )


def test_success_curve_saturates_at_full_history(mk_matrix):
    rng = np.random.default_rng(0)
    dense = np.where(rng.random((12, 8)) < 0.7, rng.uniform(1, 5, (12, 8)), np.nan)
    dense[np.isnan(dense).all(axis=1), 0] = 3.0
    m = mk_matrix(dense)
    model = fit(m, KMeansConfig(n_clusters=3, seed=1))
    users = list(range(12))
    sc = xp.success_curve(model, m, users, t_max=20)
    max_len = int(m.row_lengths().max())
    assert sc.points[-1].t == max_len
    # every user's own-length prefix is their whole row, so the curve's
    # last point (where only the longest histories remain) must be 1.0
    assert sc.points[-1].success_fraction == 1.0
    fractions = [p.success_fraction for p in sc.points]
    assert all(0.0 <= f <= 1.0 for f in fractions)
    evaluated = [p.n_evaluated for p in sc.points]
    assert evaluated == sorted(evaluated, reverse=True)


def test_success_curve_ordering_matters(mk_matrix):
    # timestamps reverse the item order for one user, changing their 1-prefix
    m = mk_matrix(
        [[1.0, 9.0], [1.1, 8.9], [9.0, 1.0]],
        timestamps=[[1, 2], [1, 2], [2, 1]],
    )
    model = fit(m, KMeansConfig(n_clusters=2, seed=0))
    by_idx = xp.success_curve(model, m, [0, 1, 2], 2, BY_ITEM_INDEX)
    by_ts = xp.success_curve(model, m, [0, 1, 2], 2, BY_TIMESTAMP)
    assert by_idx.points[0] != by_ts.points[0]


def test_success_curve_by_timestamp_requires_timestamps(mk_matrix):
    m = mk_matrix([[1.0, 2.0]] * 4)
    model = fit(m, KMeansConfig(n_clusters=2, seed=0))
    with pytest.raises(ValueError, match="timestamp"):
        xp.success_curve(model, m, [0, 1], 2, BY_TIMESTAMP)


def test_success_curve_validates_users(mk_matrix):
    m = mk_matrix([[1.0, 2.0]] * 4)
    model = fit(m, KMeansConfig(n_clusters=2, seed=0))
    with pytest.raises(ValueError):
        xp.success_curve(model, m, [9], 2)
    with pytest.raises(ValueError):
        xp.success_curve(model, m, [], 2)
    with pytest.raises(ValueError):
        xp.success_curve(model, m, [0], 0)


# ---------------------------------------------------------------- quality curve

def _three_tier_matrix(mk_matrix):
    rows = [
        [1.0, 1.0, 1.0],
        [1.2, 0.8, 1.1],
        [0.9, 1.1, 0.9],
        [1.1, 1.0, 1.2],
        [6.0, 6.0, 6.0],
        [6.3, 5.8, 6.1],
        [5.9, 6.2, 5.7],
        [12.0, 12.0, 12.0],
        [11.7, 12.2, 12.1],
        [12.3, 11.9, 11.8],
    ]
    return mk_matrix(rows)


def test_quality_curve_reference_constant_and_saturation_exact(mk_matrix):
    m = _three_tier_matrix(mk_matrix)
    model = fit(m, KMeansConfig(n_clusters=3, seed=0))
    users = list(range(m.n_users))
    qc = xp.quality_curve(model, m, users, t_max=6)
    refs = {p.reference_quality_mean for p in qc.points}
    assert len(refs) == 1
    # prefixes cap at each user's history, so from t = 3 on the prefix IS the
    # full row and the two series coincide bit for bit
    for p in qc.points:
        if p.t >= 3:
            assert p.current_quality_mean == p.reference_quality_mean
    # short prefixes of the high-norm users land in the middle cluster,
    # whose quality term differs
    assert qc.points[0].current_quality_mean != qc.points[0].reference_quality_mean


def test_quality_curve_runs_past_saturation(mk_matrix):
    m = _three_tier_matrix(mk_matrix)
    model = fit(m, KMeansConfig(n_clusters=3, seed=0))
    qc = xp.quality_curve(model, m, list(range(m.n_users)), t_max=9)
    assert len(qc.points) == 9  # every user contributes at every t


# ---------------------------------------------------------------- cohort split

def test_split_by_min_count(mk_matrix):
    m = mk_matrix(
        [
            [1.0, 2.0, np.nan],
            [1.0, np.nan, np.nan],
            [3.0, np.nan, np.nan],
            [1.0, 2.0, 3.0],
        ]
    )
    mn, exact, rest = xp.split_by_min_count(m)
    assert mn == 1
    assert exact.tolist() == [1, 2]
    assert rest.tolist() == [0, 3]


# ---------------------------------------------------------------- breakpoint detection

def test_segmented_linear_recovers_piecewise_exactly():
    t = np.arange(1, 61)
    y = np.where(t < 25, 0.5 + 0.02 * (t - 25.0), 0.5 + 0.001 * (t - 25.0))
    rep = xp.detect_breakpoint(_curve(t, y))
    assert rep.method == xp.SEGMENTED_LINEAR
    assert rep.t_star == 25
    assert rep.total_sse == pytest.approx(0.0, abs=1e-18)
    assert rep.left_fit.slope == pytest.approx(0.02)
    assert rep.right_fit.slope == pytest.approx(0.001)
    assert rep.search_range == (1, 60)


def test_segmented_linear_flat_curve_ties_to_smallest():
    rep = xp.detect_breakpoint(_curve(range(1, 21), [0.5] * 20))
    assert rep.t_star == 5  # smallest candidate with 4 points on the left


def test_detect_breakpoint_respects_search_range():
    t = np.arange(1, 61)
    y = np.where(t < 25, 0.5 + 0.02 * (t - 25.0), 0.5 + 0.001 * (t - 25.0))
    rep = xp.detect_breakpoint(_curve(t, y), t_min=10, t_max=50)
    assert rep.t_star == 25
    assert rep.search_range == (10, 50)


def test_detect_breakpoint_needs_enough_points():
    with pytest.raises(ValueError, match="too few"):
        xp.detect_breakpoint(_curve(range(1, 8), np.linspace(0, 1, 7)))
    with pytest.raises(ValueError, match="method"):
        xp.detect_breakpoint(_curve(range(1, 21), [0.5] * 20), method="zigzag")


def test_kneedle_matches_chord_oracle():
    t = np.arange(1, 41, dtype=float)
    y = 1.0 - np.exp(-t / 6.0)
    rep = xp.detect_breakpoint(_curve(t, y), method=xp.KNEEDLE)
    # independent chord computation on the normalized curve
    tn = (t - t[0]) / (t[-1] - t[0])
    yn = (y - y.min()) / (y.max() - y.min())
    dist = np.abs(tn * (yn[-1] - yn[0]) - yn * (tn[-1] - tn[0]) + 0.0)
    chord = np.abs(
        (tn[-1] - tn[0]) * (yn - yn[0]) - (yn[-1] - yn[0]) * (tn - tn[0])
    ) / np.hypot(tn[-1] - tn[0], yn[-1] - yn[0])
    inside = (t >= 5) & (t <= 37)  # candidate window for 40 points
    expect = int(t[np.argmax(np.where(inside, chord, -np.inf))])
    assert rep.t_star == expect
    assert rep.method == xp.KNEEDLE


def test_exp_tangent_finds_smooth_knee():
    rng = np.random.default_rng(3)
    t = np.arange(1, 61, dtype=float)
    y = xp._exp_tangent_model(t, 0.8, 10.0, 25) + rng.normal(0, 0.005, t.size)
    rep = xp.detect_breakpoint(_curve(t, y), method=xp.EXP_TANGENT)
    assert 22 <= rep.t_star <= 28
    # the reported right fit is the tangent line at the knee
    assert rep.right_fit.slope == pytest.approx(0.8 / 10.0 * np.exp(-rep.t_star / 10.0), rel=0.3)


# ---------------------------------------------------------------- quality intersection

def _quality(ts, cur, ref):
    pts = tuple(
        xp.QualityPoint(int(t), float(c), float(ref)) for t, c in zip(ts, cur)
    )
    return xp.QualityCurve(pts)


def test_regression_intersection_closed_form():
    t = np.arange(1, 41)
    cur = -7.5 + 1.0 * np.log(t)
    rep = xp.regression_intersection(_quality(t, cur, -3.58857))
    a, b = rep.log_fit
    assert a == pytest.approx(-7.5, abs=1e-9)
    assert b == pytest.approx(1.0, abs=1e-9)
    assert rep.t_cross == pytest.approx(np.exp(3.91143), abs=1e-6)
    assert abs(rep.t_cross - 50.0) <= 0.1
    assert rep.extrapolated  # 50 lies beyond the last observed t of 40


def test_regression_intersection_inside_range_not_extrapolated():
    t = np.arange(1, 101)
    cur = -7.5 + 1.0 * np.log(t)
    rep = xp.regression_intersection(_quality(t, cur, -3.58857))
    assert not rep.extrapolated
    assert rep.t_cross == pytest.approx(49.97, abs=0.01)


def test_regression_intersection_rejects_downward_trend():
    t = np.arange(1, 31)
    cur = -1.0 - 0.5 * np.log(t)
    with pytest.raises(NoIntersectionError):
        xp.regression_intersection(_quality(t, cur, -0.5))


def test_regression_intersection_needs_three_points():
    with pytest.raises(ValueError):
        xp.regression_intersection(_quality([1, 2], [0.1, 0.2], 1.0))


# ---------------------------------------------------------------- CSV round trips

def test_success_csv_round_trip(tmp_path):
    curve = _curve([1, 2, 3, 4], [0.0, 0.25, 0.5, 1.0], n=8)
    path = tmp_path / "success.csv"
    xp.write_success_csv(curve, path)
    text = path.read_text()
    assert text.splitlines()[0] == "t,success_fraction,n_evaluated"
    back = xp.read_success_csv(path)
    assert back == curve


def test_quality_csv_round_trip(tmp_path):
    curve = _quality([1, 2, 3], [-1.5, -1.2, -1.0], -0.9)
    path = tmp_path / "quality.csv"
    xp.write_quality_csv(curve, path)
    assert path.read_text().splitlines()[0] == (
        "t,current_quality_mean,reference_quality_mean"
    )
    back = xp.read_quality_csv(path)
    assert back == curve


def test_read_success_csv_rejects_wrong_header(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ValueError, match="not a success-curve CSV"):
        xp.read_success_csv(p)


def test_breakpoint_report_file(tmp_path):
    t = np.arange(1, 61)
    y = np.where(t < 25, 0.5 + 0.02 * (t - 25.0), 0.5 + 0.001 * (t - 25.0))
    rep = xp.detect_breakpoint(_curve(t, y))
    dest = tmp_path / "threshold.txt"
    xp.write_breakpoint_report(rep, dest)
    lines = dest.read_text().splitlines()
    keys = [ln.split("=")[0] for ln in lines]
    assert keys == ["t_star", "method", "left_slope", "right_slope", "total_sse"]
    assert lines[0] == "t_star=25"
    assert lines[1] == "method=segmented_linear"
