import math

import pytest
from hypothesis import given, settings, strategies as st

from kinetics import cli
from kinetics.config import (EXPERIMENTS, ConfigError, RunConfig, parse_config, serialize_config,
                             validate)

SMALL_LINEAR = """experiment = linear-decay  # small grid
spatial_n = 7
velocity_n = 9
eta_max = 4
tau_end = 1.0
dtau = 0.1
"""


def test_minimal_config_gets_defaults():
    c = parse_config("experiment = linear-decay\n")
    assert c == RunConfig(experiment="linear-decay")
    assert c.h == 0.05 and c.spatial_n == 9 and c.velocity_n == 11 and c.eta_max == 5.0
    assert c.step == pytest.approx(0.5 * math.pi / 0.05 / 400)
    assert c.steps == round(3.0 / c.step)


def test_trajectory_presets_default_to_audit_scale():
    assert parse_config("experiment = trajectory-audit").h == 0.5
    assert parse_config("experiment = reverse-reflection-demo").h == 0.5
    assert parse_config("experiment = trajectory-audit\nh = 0.2").h == 0.2


def test_comments_and_blank_lines():
    c = parse_config("# header\n\nexperiment = operator-audit   # trailing\n  seed = 7 \n")
    assert c.experiment == "operator-audit" and c.seed == 7


@pytest.mark.parametrize("text, field", [
    ("experiment = linear-decay\nh = -1", "h"),
    ("experiment = linear-decay\nh = 2", "h"),
    ("experiment = linear-decay\nbeta = 1.5", "beta"),
    ("experiment = linear-decay\nspatial_n = 8", "spatial_n"),
    ("experiment = linear-decay\nvelocity_n = 9\neta_max = 6", "eta_max"),
    ("experiment = linear-decay\ntau_end = 40", "tau_end"),
    ("experiment = linear-decay\namplitude = 0.5", "amplitude"),
    ("experiment = warp-drive", "experiment"),
    ("experiment = linear-decay\nbogus = 1", "bogus"),
    ("experiment = linear-decay\nspatial_n = nine", "spatial_n"),
    ("experiment = linear-decay\nh = nan", "h"),
    ("experiment = linear-decay\nh = 0.1\nh = 0.2", "h"),
    ("h = 0.1", "experiment"),
    ("experiment linear-decay", "line 1"),
])
def test_config_errors_name_the_field(text, field):
    with pytest.raises(ConfigError, match=field):
        parse_config(text)


@settings(max_examples=40, deadline=None)
@given(exp=st.sampled_from(EXPERIMENTS), h=st.floats(0.01, 1.0), seed=st.integers(0, 2**40),
       n=st.sampled_from([5, 7, 9, 11]), amp=st.floats(0, 1e-2))
def test_serialize_parse_round_trip(exp, h, seed, n, amp):
    c = validate(RunConfig(experiment=exp, h=h, seed=seed, spatial_n=n, amplitude=amp, tau_end=0.5))
    assert parse_config(serialize_config(c)) == c


def test_list_experiments(capsys):
    assert cli.main(["list-experiments"]) == 0
    names = [line.split("\t")[0] for line in capsys.readouterr().out.splitlines()]
    assert names == list(EXPERIMENTS)


def test_usage_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("experiment = linear-decay\nh = -1\n")
    assert cli.main(["run", "--config", str(bad)]) == 2
    assert "h:" in capsys.readouterr().err
    assert cli.main(["run", "--config", str(tmp_path / "missing.cfg")]) == 2
    good = tmp_path / "good.cfg"
    good.write_text(SMALL_LINEAR)
    assert cli.main(["run", "--config", str(good), "--threads", "0"]) == 2


def test_runtime_failure_exits_1(tmp_path, monkeypatch, capsys):
    def boom(run):
        raise ValueError("synthetic failure")

    monkeypatch.setitem(cli.PRESETS, "linear-decay", boom)
    cfg = tmp_path / "c.cfg"
    cfg.write_text(SMALL_LINEAR)
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "linear-decay" in err and "synthetic failure" in err


@pytest.fixture(scope="module")
def linear_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("runs")
    cfg = base / "lin.cfg"
    cfg.write_text(SMALL_LINEAR)
    codes = [cli.main(["run", "--config", str(cfg), "--out", str(base / d)]) for d in ("a", "b")]
    return base, codes


def test_small_linear_run_passes(linear_runs):
    base, codes = linear_runs
    assert codes == [0, 0]
    text = (base / "a" / "manifest.txt").read_text()
    assert "overall = PASS" in text
    for name in ("conservation_drift", "lambda_hat_l2", "fit_quality_l2"):
        assert f"PASS\t{name}\t" in text
    assert "[config]" in text and "experiment = linear-decay" in text
    files = text.split("[files]")[1].split()
    assert {"decay.tsv", "conservation.tsv", "manifest.txt"} <= set(files)


def test_small_linear_run_is_deterministic(linear_runs):
    base, _ = linear_runs
    for name in ("decay.tsv", "conservation.tsv"):
        assert (base / "a" / name).read_bytes() == (base / "b" / name).read_bytes()


def test_decay_table_layout(linear_runs):
    base, _ = linear_runs
    lines = (base / "a" / "decay.tsv").read_text().splitlines()
    header = lines[0].split("\t")
    assert header[0] == "tau"
    rows = [list(map(float, line.split("\t"))) for line in lines[1:]]
    assert len(rows) == 11 and all(len(r) == len(header) for r in rows)
    assert rows[0][0] == 0.0 and rows[-1][0] == pytest.approx(1.0)


def test_tsv_formatting():
    text = cli.tsv(["a", "b"], [(1.0, "x"), (0.5, True)])
    assert text.splitlines() == ["a\tb", "1.000000000000e+00\tx", "5.000000000000e-01\tTrue"]
