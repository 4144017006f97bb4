import json
import subprocess
import sys

import numpy as np
import pytest

from coldstart import cli
from coldstart.cli import (
    EXIT_INTERNAL,
    EXIT_METHODOLOGY,
    EXIT_OK,
    EXIT_USAGE,
    RunConfig,
    main,
    parse_config_file,
)


# ---------------------------------------------------------------- smoke inputs

def _write_jester(path, n_users=30, rated=60, seed=0):
    """Three taste blocs at different rating magnitudes.

    The magnitude tiers make short zero-filled prefixes drift through the
    lower-norm clusters before settling, so success and quality curves
    actually rise instead of starting saturated.
    """
    rng = np.random.default_rng(seed)
    tier_mean = [-6.0, 1.0, 8.0]
    lines = []
    for u in range(n_users):
        mean = tier_mean[u % 3]
        cells = ["99"] * 100
        for i in range(rated):
            cells[i] = f"{np.clip(mean + rng.normal(0, 1.0), -10, 10):.2f}"
        lines.append(",".join([str(rated)] + cells))
    path.write_text("\n".join(lines) + "\n")


def _write_movielens(path, seed=1):
    """40 users in three value tiers; 10 users hold the 5-rating minimum."""
    rng = np.random.default_rng(seed)
    tier_vals = [(1, 2), (3, 3), (4, 5)]
    lines = []
    for u in range(40):
        n = 5 if u < 10 else int(rng.integers(8, 13))
        items = rng.choice(30, size=n, replace=False)
        lo, hi = tier_vals[u % 3]
        for j, it in enumerate(items):
            val = int(rng.integers(lo, hi + 1))
            lines.append(f"{u}::{it}::{val}::{100000 + u * 100 + j}")
    path.write_text("\n".join(lines) + "\n")


@pytest.fixture(scope="module")
def jester_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("data") / "jester.csv"
    _write_jester(p)
    return p


@pytest.fixture(scope="module")
def ml_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("data") / "ratings.dat"
    _write_movielens(p)
    return p


ARTIFACTS = [
    "canonical.csv", "model.txt", "success.csv",
    "quality.csv", "threshold.txt", "summary.json", "resolved.config",
]


# ---------------------------------------------------------------- pipelines

def test_pipeline_jester_end_to_end(jester_file, tmp_path, capsys):
    out = tmp_path / "out"
    rc = main([
        "pipeline", "--dataset", "jester", "--input", str(jester_file),
        "--k-coeff", "10", "--min-ratings", "50", "--sample", "20",
        "--t-max", "80", "--seed", "0", "--out", str(out),
    ])
    assert rc == EXIT_OK
    for name in ARTIFACTS:
        assert (out / name).exists(), name
    summary = json.loads((out / "summary.json").read_text())
    # one merged report with keys from every stage
    for key in ("dataset", "n_users", "sse", "curve_users", "breakpoint_t_star"):
        assert key in summary, key
    assert summary["n_users"] == 30
    stdout = capsys.readouterr().out
    assert "ingest: 30 users" in stdout
    assert "threshold: t_star=" in stdout


def test_pipeline_movielens_writes_min_cohort(ml_file, tmp_path):
    out = tmp_path / "out"
    rc = main([
        "pipeline", "--dataset", "movielens", "--input", str(ml_file),
        "--k-coeff", "10", "--min-ratings", "6", "--sample", "10",
        "--t-max", "12", "--seed", "0", "--out", str(out),
    ])
    assert rc == EXIT_OK
    cohort = (out / "success_mincohort.csv").read_text().splitlines()
    assert cohort[0] == "t,success_fraction,n_evaluated"
    # the exactly-5-ratings cohort: 10 users, curve stops at their length
    assert len(cohort) == 1 + 5
    assert cohort[1].endswith(",10")
    summary = json.loads((out / "summary.json").read_text())
    assert summary["min_cohort_ratings"] == 5
    assert summary["min_cohort_count"] == 10


def test_pipeline_runs_sweep_when_coeffs_given(jester_file, tmp_path):
    out = tmp_path / "out"
    rc = main([
        "pipeline", "--dataset", "jester", "--input", str(jester_file),
        "--k-coeff", "10", "--coeffs", "10,30", "--min-ratings", "50",
        "--sample", "20", "--t-max", "80", "--seed", "0", "--out", str(out),
    ])
    assert rc == EXIT_OK
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0] == "k_coeff,n_clusters,ndcg_mean,map_mean"
    assert len(lines) == 4  # header + 2 rows + best-by footer
    assert lines[-1].startswith("# best_by_ndcg=")


def test_stages_rerun_independently(jester_file, tmp_path):
    out = tmp_path / "out"
    common = [
        "--dataset", "jester", "--input", str(jester_file),
        "--k-coeff", "10", "--min-ratings", "50", "--sample", "20",
        "--t-max", "80", "--seed", "0", "--out", str(out),
    ]
    for stage in ("ingest", "fit", "curves", "threshold"):
        assert main([stage, *common]) == EXIT_OK
    first = (out / "threshold.txt").read_text()
    # threshold recomputes from the stored curves and reproduces itself
    assert main(["threshold", *common]) == EXIT_OK
    assert (out / "threshold.txt").read_text() == first


def test_pipeline_is_deterministic(jester_file, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        rc = main([
            "pipeline", "--dataset", "jester", "--input", str(jester_file),
            "--k-coeff", "10", "--min-ratings", "50", "--sample", "20",
            "--t-max", "80", "--seed", "3", "--out", str(out),
        ])
        assert rc == EXIT_OK
        outs.append(out)
    for name in ("model.txt", "success.csv", "quality.csv", "threshold.txt"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


# ---------------------------------------------------------------- config handling

def test_flags_override_config_file(jester_file, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "# comment line\n"
        "dataset = jester\n"
        f"input = {jester_file}\n"
        "k_coeff = 7\n"
        "seed = 5\n"
    )
    out = tmp_path / "out"
    rc = main(["ingest", "--config", str(cfg), "--k-coeff", "3", "--out", str(out)])
    assert rc == EXIT_OK
    resolved = dict(
        line.split(" = ", 1) for line in (out / "resolved.config").read_text().splitlines()
    )
    assert resolved["k_coeff"] == "3"     # flag wins
    assert resolved["seed"] == "5"        # file value kept
    assert resolved["dataset"] == "jester"
    keys = list(resolved)
    assert keys == sorted(keys)


def test_unknown_config_key_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("dataset = jester\nk_coef = 7\n")
    rc = main(["ingest", "--config", str(cfg), "--input", "x", "--out", str(tmp_path / "o")])
    assert rc == EXIT_USAGE
    err = capsys.readouterr().err
    assert "k_coef" in err and ":2" in err


def test_parse_config_file_types(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("t_max = 42\nkmeans_conv_tol = 1e-4\nordering = by_timestamp\n")
    values = parse_config_file(cfg)
    assert values == {"t_max": 42, "kmeans_conv_tol": 1e-4, "ordering": "by_timestamp"}


@pytest.mark.parametrize(
    "field, value",
    [
        ("dataset", "netflix"),
        ("k_coeff", 0),
        ("sample_size", -1),
        ("ordering", "sideways"),
        ("breakpoint_method", "eyeball"),
        ("threads", -2),
    ],
)
def test_run_config_rejects_bad_values(field, value):
    with pytest.raises(cli.UsageError):
        RunConfig(**{field: value})


def test_run_config_ordering_resolution():
    from coldstart.dataset import BY_ITEM_INDEX, BY_TIMESTAMP

    assert RunConfig(dataset="movielens").resolved_ordering() == BY_TIMESTAMP
    assert RunConfig(dataset="jester").resolved_ordering() == BY_ITEM_INDEX
    assert (
        RunConfig(dataset="jester", ordering="by_timestamp").resolved_ordering()
        == BY_TIMESTAMP
    )


# ---------------------------------------------------------------- exit codes

def test_missing_input_is_usage_error(tmp_path, capsys):
    rc = main(["fit", "--dataset", "jester", "--out", str(tmp_path / "o")])
    assert rc == EXIT_USAGE
    assert "input" in capsys.readouterr().err


def test_nonexistent_input_is_usage_error(tmp_path):
    rc = main([
        "ingest", "--dataset", "jester", "--input", str(tmp_path / "nope.csv"),
        "--out", str(tmp_path / "o"),
    ])
    assert rc == EXIT_USAGE


def test_malformed_input_is_usage_error(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("1,2,3\n")
    rc = main([
        "ingest", "--dataset", "jester", "--input", str(bad),
        "--out", str(tmp_path / "o"),
    ])
    assert rc == EXIT_USAGE
    assert "line 1" in capsys.readouterr().err


def test_sweep_without_coeffs_is_usage_error(jester_file, tmp_path, capsys):
    rc = main([
        "sweep", "--dataset", "jester", "--input", str(jester_file),
        "--out", str(tmp_path / "o"),
    ])
    assert rc == EXIT_USAGE
    assert "coeffs" in capsys.readouterr().err


def test_threshold_without_curves_or_input_is_usage_error(tmp_path, capsys):
    rc = main(["threshold", "--dataset", "jester", "--out", str(tmp_path / "o")])
    assert rc == EXIT_USAGE
    assert "curve" in capsys.readouterr().err.lower()


def test_degenerate_clustering_is_methodology_error(tmp_path, capsys):
    # identical users: the two centroids coincide and quality is undefined
    rows = []
    for _ in range(6):
        cells = ["99"] * 100
        for i in range(55):
            cells[i] = "1.5"
        rows.append(",".join(["55"] + cells))
    data = tmp_path / "flat.csv"
    data.write_text("\n".join(rows) + "\n")
    rc = main([
        "pipeline", "--dataset", "jester", "--input", str(data),
        "--k-coeff", "3", "--min-ratings", "50", "--sample", "6",
        "--out", str(tmp_path / "o"),
    ])
    assert rc == EXIT_METHODOLOGY
    assert "methodology error" in capsys.readouterr().err


def test_unexpected_exception_is_internal_error(jester_file, tmp_path, capsys, monkeypatch):
    def boom(*args, **kwargs):
        raise RuntimeError("wires crossed")

    monkeypatch.setattr(cli.xp, "success_curve", boom)
    rc = main([
        "curves", "--dataset", "jester", "--input", str(jester_file),
        "--k-coeff", "10", "--min-ratings", "50", "--sample", "20",
        "--out", str(tmp_path / "o"),
    ])
    # curves needs a model on disk first
    assert rc in (EXIT_USAGE, EXIT_INTERNAL)


def test_unexpected_exception_in_fit_is_internal_error(jester_file, tmp_path, capsys, monkeypatch):
    monkeypatch.setattr(cli.km, "fit", lambda *a, **k: (_ for _ in ()).throw(RuntimeError("x")))
    rc = main([
        "fit", "--dataset", "jester", "--input", str(jester_file),
        "--k-coeff", "10", "--out", str(tmp_path / "o"),
    ])
    assert rc == EXIT_INTERNAL
    assert "Traceback" in capsys.readouterr().err


def test_curves_before_fit_tells_user_to_fit(jester_file, tmp_path, capsys):
    rc = main([
        "curves", "--dataset", "jester", "--input", str(jester_file),
        "--k-coeff", "10", "--min-ratings", "50", "--sample", "20",
        "--out", str(tmp_path / "o"),
    ])
    assert rc == EXIT_USAGE
    assert "fit" in capsys.readouterr().err


# ---------------------------------------------------------------- installed script

def test_console_script_help_and_exit_codes():
    res = subprocess.run(
        ["coldstart", "--help"], capture_output=True, text=True, timeout=60
    )
    assert res.returncode == 0
    assert "pipeline" in res.stdout
    res = subprocess.run(
        ["coldstart", "fit", "--dataset", "jester"],
        capture_output=True, text=True, timeout=60,
    )
    assert res.returncode == EXIT_USAGE


def test_module_invocation_matches_script():
    res = subprocess.run(
        [sys.executable, "-m", "coldstart.cli", "--help"],
        capture_output=True, text=True, timeout=60,
    )
    assert res.returncode == 0
    assert "threshold" in res.stdout
