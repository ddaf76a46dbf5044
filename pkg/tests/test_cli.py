import dataclasses
import json

import pytest

from crtsim.census import DEFAULT_PROFILES, load_census, write_census
from crtsim.cli import main
from crtsim.closed_form import POWER_CURVE_HEADER
from crtsim.engine import COMPARE_HEADER, RESULTS_HEADER
from crtsim.randomization import load_pool

SUBCOMMANDS = ("generate-census", "build-pool", "power-formula", "simulate",
               "fit-icc", "compare")


def run_cli(capsys, *argv):
    try:
        code = main(list(argv))
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else 0
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def census_file(tmp_path_factory, census):
    path = tmp_path_factory.mktemp("cli") / "census.csv"
    write_census(census, path)
    return path


# ---------------------------------------------------------------------------
# parser behavior
# ---------------------------------------------------------------------------

def test_help_exits_zero_everywhere(capsys):
    code, out, _ = run_cli(capsys, "--help")
    assert code == 0
    for name in SUBCOMMANDS:
        assert name in out
    flags = {
        "generate-census": ["--profiles", "--default", "--seed", "--out"],
        "build-pool": ["--census", "--n-per-arm", "--attempts", "--threshold",
                       "--seed", "--out"],
        "power-formula": ["--m", "--villages-per-arm", "--c", "--pi0", "--pi1",
                          "--icc", "--alpha", "--curve"],
        "simulate": ["--config", "--out", "--desk-scale", "--workers"],
        "fit-icc": ["--census", "--level", "--n-quad", "--out"],
        "compare": ["--sim", "--icc", "--alpha", "--out"],
    }
    for name, expected in flags.items():
        code, out, _ = run_cli(capsys, name, "--help")
        assert code == 0
        for flag in expected:
            assert flag in out


def test_unknown_subcommand_exits_one(capsys):
    code, _, err = run_cli(capsys, "frobnicate")
    assert code == 1
    assert "invalid choice" in err


def test_missing_required_flag_exits_one(capsys):
    code, _, err = run_cli(capsys, "power-formula", "--pi0", "0.7")
    assert code == 1


# ---------------------------------------------------------------------------
# generate-census
# ---------------------------------------------------------------------------

def test_generate_census_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    code, out, _ = run_cli(capsys, "generate-census", "--default",
                           "--seed", "42", "--out", str(a))
    assert code == 0
    assert "12 areas" in out
    code, _, _ = run_cli(capsys, "generate-census", "--default",
                         "--seed", "42", "--out", str(b))
    assert code == 0
    assert a.read_bytes() == b.read_bytes()
    census = load_census(a)
    assert len(census.analysis_villages) == 200


def test_generate_census_rejects_short_profiles(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(
        [dataclasses.asdict(p) for p in DEFAULT_PROFILES[:11]]))
    code, _, err = run_cli(capsys, "generate-census", "--profiles", str(bad),
                           "--out", str(tmp_path / "x.csv"))
    assert code == 1
    assert "11" in err


# ---------------------------------------------------------------------------
# build-pool
# ---------------------------------------------------------------------------

def test_build_pool_defaults_and_determinism(tmp_path, capsys, census_file,
                                             census):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    code, out, _ = run_cli(capsys, "build-pool", "--census", str(census_file),
                           "--n-per-arm", "60", "--attempts", "500",
                           "--seed", "11", "--out", str(a))
    assert code == 0
    assert "avg SMD <= 0.2" in out  # the documented default threshold
    code, _, _ = run_cli(capsys, "build-pool", "--census", str(census_file),
                         "--n-per-arm", "60", "--attempts", "500",
                         "--seed", "11", "--out", str(b))
    assert code == 0
    assert a.read_bytes() == b.read_bytes()
    pool = load_pool(a, census)
    assert all(d.avg_smd <= 0.2 for d in pool.draws)


def test_build_pool_zero_attempts_exits_one(tmp_path, capsys, census_file):
    code, _, err = run_cli(capsys, "build-pool", "--census", str(census_file),
                           "--n-per-arm", "60", "--attempts", "0",
                           "--out", str(tmp_path / "p.csv"))
    assert code == 1
    assert "attempts" in err


def test_build_pool_missing_census_exits_one(tmp_path, capsys):
    code, _, err = run_cli(capsys, "build-pool",
                           "--census", str(tmp_path / "nope.csv"),
                           "--n-per-arm", "60", "--attempts", "10",
                           "--out", str(tmp_path / "p.csv"))
    assert code == 1


# ---------------------------------------------------------------------------
# power-formula
# ---------------------------------------------------------------------------

def test_power_formula_prints_design_value(capsys):
    code, out, _ = run_cli(capsys, "power-formula", "--villages-per-arm", "60",
                           "--c", "6", "--pi0", "0.70", "--pi1", "0.85",
                           "--icc", "0.048")
    assert code == 0
    assert out.strip() == "0.794"


def test_power_formula_null_prints_alpha(capsys):
    code, out, _ = run_cli(capsys, "power-formula", "--m", "140",
                           "--pi0", "0.7", "--pi1", "0.7", "--icc", "0.048")
    assert code == 0
    assert out.strip() == "0.050"


def test_power_formula_curve_output(tmp_path, capsys):
    a, b = tmp_path / "curve.csv", tmp_path / "curve2.csv"
    args = ("power-formula", "--villages-per-arm", "60", "--pi0", "0.70",
            "--pi1", "0.85", "--icc", "0.048", "--m-max", "50")
    code, _, _ = run_cli(capsys, *args, "--curve", str(a))
    assert code == 0
    lines = a.read_text().splitlines()
    assert lines[0] == ",".join(POWER_CURVE_HEADER)
    assert len(lines) == 51
    code, _, _ = run_cli(capsys, *args, "--curve", str(b))
    assert a.read_bytes() == b.read_bytes()


def test_power_formula_effect_curve(tmp_path, capsys):
    path = tmp_path / "effect.csv"
    code, _, _ = run_cli(capsys, "power-formula", "--m", "140",
                         "--pi0", "0.70", "--pi1", "0.85", "--icc", "0.048",
                         "--effect-curve", str(path))
    assert code == 0
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(POWER_CURVE_HEADER)
    assert len(lines) > 10


def test_power_formula_bad_rate_exits_one(capsys):
    code, _, err = run_cli(capsys, "power-formula", "--m", "140",
                           "--pi0", "0.7", "--pi1", "1.0", "--icc", "0.048")
    assert code == 1
    assert "pi1" in err


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def write_config(tmp_path):
    cfg = {
        "census": {"profiles": "default", "seed": 3},
        "pool": {"n_attempts": 1500, "threshold": 0.2},
        "grid": {"cer": [0.7], "delta": [0.15], "n_per_arm": [60],
                 "coef_sets": [2], "icc_v": [0.24]},
        "n_reps_null": 5, "n_reps_alt": 8,
        "master_seed": 5,
    }
    path = tmp_path / "study.json"
    path.write_text(json.dumps(cfg))
    return path


def test_simulate_round_trip(tmp_path, capsys):
    config = write_config(tmp_path)
    out_dir = tmp_path / "out"
    code, out, _ = run_cli(capsys, "simulate", "--config", str(config),
                           "--out", str(out_dir), "--workers", "1")
    assert code == 0
    results = out_dir / "results.csv"
    assert results.exists()
    lines = results.read_text().splitlines()
    assert lines[0] == ",".join(RESULTS_HEADER)
    assert len(lines) == 4  # one scenario, three methods
    first = results.read_bytes()
    code, _, _ = run_cli(capsys, "simulate", "--config", str(config),
                         "--out", str(out_dir), "--workers", "1")
    assert code == 0
    assert results.read_bytes() == first


def test_simulate_malformed_config_names_field(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text(json.dumps({"census": {"profiles": "default"}}))
    code, _, err = run_cli(capsys, "simulate", "--config", str(path),
                           "--out", str(tmp_path / "o"))
    assert code == 1
    assert "config.grid" in err


def test_simulate_rejects_bad_workers(tmp_path, capsys):
    config = write_config(tmp_path)
    code, _, err = run_cli(capsys, "simulate", "--config", str(config),
                           "--out", str(tmp_path / "o"), "--workers", "0")
    assert code == 1
    assert "workers" in err


# ---------------------------------------------------------------------------
# fit-icc
# ---------------------------------------------------------------------------

def test_fit_icc_stdout_and_file(tmp_path, capsys, census_file):
    code, out, _ = run_cli(capsys, "fit-icc", "--census", str(census_file),
                           "--level", "health_zone")
    assert code == 0
    report = json.loads(out)
    assert report["level"] == "health_zone"
    assert report["converged"] is True

    path = tmp_path / "fit.json"
    code, out, _ = run_cli(capsys, "fit-icc", "--census", str(census_file),
                           "--level", "health_zone", "--out", str(path))
    assert code == 0
    assert json.loads(path.read_text()) == report


def test_fit_icc_bad_level_exits_one(capsys, census_file):
    code, _, err = run_cli(capsys, "fit-icc", "--census", str(census_file),
                           "--level", "district")
    assert code == 1


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

def results_csv(tmp_path):
    rows = [
        ["a", "0.7", "0.15", "60", "2", "0.24", "naive", "100", "60",
         "0.6", "0.049", "0.504", "0.696", "0.0"],
        ["a", "0.7", "0.15", "60", "2", "0.24", "quasibinomial", "100", "64",
         "0.64", "0.048", "0.546", "0.734", "0.0"],
        ["a", "0.7", "0.15", "60", "2", "0.24", "beta", "100", "62",
         "0.62", "0.0485", "0.525", "0.715", "0.0"],
        ["b", "0.9", "0.15", "60", "2", "0.24", "naive", "100", "90",
         "0.9", "0.03", "0.841", "0.959", "0.0"],
    ]
    path = tmp_path / "results.csv"
    path.write_text(",".join(RESULTS_HEADER) + "\n"
                    + "\n".join(",".join(r) for r in rows) + "\n")
    return path


def test_compare_joins_and_warns(tmp_path, capsys):
    sim = results_csv(tmp_path)
    out_path = tmp_path / "table.csv"
    code, out, err = run_cli(capsys, "compare", "--sim", str(sim),
                             "--icc", "0.048", "--out", str(out_path))
    assert code == 0
    lines = out_path.read_text().splitlines()
    assert lines[0] == ",".join(COMPARE_HEADER)
    assert len(lines) == 3
    first = dict(zip(COMPARE_HEADER, lines[1].split(",")))
    assert first["formula_power"] == "0.794"
    assert first["beta_rate"] == "0.62"
    # cer 0.9 + delta 0.15 exceeds 1: no formula value for that cell
    assert "cer=0.9" in err
    second = dict(zip(COMPARE_HEADER, lines[2].split(",")))
    assert second["formula_power"] == ""


def test_compare_missing_results_exits_one(tmp_path, capsys):
    code, _, err = run_cli(capsys, "compare", "--sim",
                           str(tmp_path / "none.csv"), "--icc", "0.048",
                           "--out", str(tmp_path / "t.csv"))
    assert code == 1
