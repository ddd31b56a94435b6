import json
import logging

import numpy as np
import pytest

from twinalign.geometry import OUConfig, Path, generate_ou_path
from twinalign.harness import ConfigError, load_config, load_track, parse_config, read_log, summarize, write_log, write_track
from twinalign.harness.cli import EXIT_CONFIG, EXIT_GATE, EXIT_OK, main
from twinalign.harness.io import TrackFormatError, format_log
from twinalign.harness.plots import emit_plots
from twinalign.runtime import AlignmentEvent, LogRecord


def rec(t=0.0, event=AlignmentEvent.NOMINAL, long=0.0, d=0.0, dv=0.0, sigma=0.0):
    return LogRecord(t, event, sigma + 0.2, sigma + long, sigma - 0.2 + long, sigma, d, 0.0, 5.0 + dv, 5.0, 0.0, 0.0, 0.0)


# --------------------------------------------------------------------------
# config


def test_defaults_and_sections():
    cfg = parse_config("", environ={})
    assert cfg.training.epochs == 20 and cfg.alignment.K_d == 1.5 and cfg.generator.n_horizon == 40
    cfg = parse_config("training:\n  epochs: 3\nplant:\n  tau_a: 0.2\n", environ={})
    assert cfg.training.epochs == 3 and cfg.plant.tau_a == 0.2


@pytest.mark.parametrize(
    "text,line",
    [
        ("run:\n  seed: 1\n  bogus: 2\n", 3),
        ("nosuch:\n  a: 1\n", 1),
        ("training:\n  epochs: 20\n  lam: 1.5\n", 3),
        ("generator:\n  n_horizon: 40\n  chunk: 15\n", 2),
        ("training:\n  epochs: many\n", 2),
    ],
)
def test_config_errors_name_the_line(text, line):
    with pytest.raises(ConfigError, match=rf"exp\.yaml:{line}"):
        parse_config(text, "exp.yaml", environ={})


def test_environment_override():
    cfg = parse_config("training:\n  epochs: 3\n", environ={"TWIN_TRAINING_EPOCHS": "7", "TWIN_RUN_SEED": "4"})
    assert cfg.training.epochs == 7 and cfg.run.seed == 4
    with pytest.raises(ConfigError, match="TWIN_TRAINING_LAM"):
        parse_config("", environ={"TWIN_TRAINING_LAM": "2.0"})


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml", environ={})


# --------------------------------------------------------------------------
# track and log files


def test_track_round_trip(tmp_path):
    p = generate_ou_path(OUConfig(seed=3, n_points=200))
    f = tmp_path / "t.csv"
    write_track(p, f)
    assert load_track(f) == p
    q = Path(p.waypoints, np.linspace(3, 9, len(p)))
    write_track(q, f)
    assert load_track(f) == q
    assert f.read_bytes().startswith(b"x,y,v_target\n")


@pytest.mark.parametrize(
    "text,where",
    [("a,b\n1,2\n", "header"), ("x,y\n0,0\n1\n", ":3:"), ("x,y\n0,0\n1,nan\n", ":3:"), ("x,y\n0,0\n1,zz\n", ":3:"), ("", "empty")],
)
def test_track_format_errors(tmp_path, text, where):
    f = tmp_path / "bad.csv"
    f.write_text(text)
    with pytest.raises(TrackFormatError, match=where):
        load_track(f)


def test_log_round_trip(tmp_path):
    records = [rec(0.1 * i, AlignmentEvent.FREEZE if i == 2 else AlignmentEvent.NOMINAL, 0.01 * i, -0.02, 0.1) for i in range(5)]
    f = tmp_path / "log.csv"
    write_log(records, f)
    assert f.read_text().splitlines()[0] == ",".join(LogRecord.CSV_COLUMNS)
    back = read_log(f)
    assert format_log(back) == format_log(records)
    assert back[2].event is AlignmentEvent.FREEZE


# --------------------------------------------------------------------------
# metrics


def test_summary_examples():
    m = summarize([rec(long=0.1), rec(long=-0.3)])
    assert m.mean_long == pytest.approx(0.2) and m.max_long == pytest.approx(0.3)
    z = summarize([rec(), rec(), rec()])
    assert (z.mean_long, z.max_long, z.mean_lat, z.max_lat, z.mean_vel, z.max_vel) == (0, 0, 0, 0, 0, 0)
    with pytest.raises(ValueError):
        summarize([])


def test_summary_streaming_equals_batch():
    rng = np.random.default_rng(0)
    events = list(AlignmentEvent)
    records = [rec(0.1 * i, events[rng.integers(4)], *rng.normal(0, 0.1, 3), sigma=0.8 * i) for i in range(500)]
    batch = summarize(records)
    stream = summarize(r for r in records)
    assert stream == batch
    longs = np.abs([r.sigma_ref - r.sigma_R for r in records])
    assert batch.mean_long == pytest.approx(longs.mean(), abs=1e-12) and batch.max_long == longs.max()
    assert sum(batch.counts.values()) == batch.n_steps == 500
    assert batch.mean_lat <= batch.max_lat and batch.mean_vel <= batch.max_vel
    assert batch.distance == pytest.approx(0.8 * 499)


# --------------------------------------------------------------------------
# plots


def test_plot_has_three_panels(tmp_path):
    records = [rec(0.1 * i, AlignmentEvent.FREEZE if i % 7 == 0 else AlignmentEvent.NOMINAL, 0.01, 0.02, 0.05, 0.8 * i) for i in range(50)]
    out = emit_plots(records, tmp_path / "fig.svg")
    svg = (tmp_path / "fig.svg").read_text()
    assert out and svg.count('<g id="axes_') == 3
    assert "time [s]" in svg and "lateral d [m]" in svg
    emit_plots(records, tmp_path / "fig2.svg")
    assert (tmp_path / "fig2.svg").read_text() == svg


def test_empty_log_writes_no_plot(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        assert emit_plots([], tmp_path / "none.svg") is None
    assert not (tmp_path / "none.svg").exists()
    assert "empty" in caplog.text


# --------------------------------------------------------------------------
# command line


def test_cli_missing_model_is_a_config_error(tmp_path, capsys):
    assert main(["gen-path", "-o", str(tmp_path), "--length", "120"]) == EXIT_OK
    assert (tmp_path / "track.csv").exists()
    code = main(["run-alignment", "-o", str(tmp_path), "--model", str(tmp_path / "nope.bin")])
    assert code == EXIT_CONFIG
    assert "nope.bin" in capsys.readouterr().err


def test_cli_bad_config_exit_code(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("alignment:\n  K_d: -1\n")
    assert main(["-c", str(cfg), "gen-path", "-o", str(tmp_path)]) == EXIT_CONFIG


def test_cli_eval_gates(tmp_path, capsys):
    good, bad = tmp_path / "good.csv", tmp_path / "bad.csv"
    write_log([rec(0.1 * i, d=0.01, sigma=i) for i in range(10)], good)
    write_log([rec(0.1 * i, d=0.4, sigma=i) for i in range(10)], bad)
    assert main(["eval", "--log", str(good)]) == EXIT_OK
    assert main(["eval", "--log", str(bad)]) == EXIT_GATE
    out = capsys.readouterr().out
    assert "FAIL mean_lat" in out
    assert main(["eval", "--log", str(good), "--json"]) == EXIT_OK
    last = capsys.readouterr().out.splitlines()[0]
    assert json.loads(last)["n_steps"] == 10


def test_cli_end_to_end_small(tmp_path):
    cfg = tmp_path / "small.yaml"
    cfg.write_text(
        "run:\n  track_length: 150\n  max_time: 60\n"
        "generator:\n  hidden: [16]\n  n_horizon: 20\n"
        "training:\n  n_samples: 300\n  epochs: 1\n  batch_size: 128\n"
    )
    base = ["-c", str(cfg), "-o", str(tmp_path / "out")]
    for cmd in (["gen-path"], ["rollout-expert"], ["collect"], ["train"], ["run-alignment"]):
        assert main([*cmd, *base]) == EXIT_OK, cmd
    out = tmp_path / "out"
    for name in ("track.csv", "expert_rollout.csv", "dataset.bin", "model.bin", "model_training.json",
                 "log.csv", "log_metrics.json", "log.svg"):
        assert (out / name).exists(), name
    assert main(["plot", *base, "--log", str(out / "log.csv"), "--out", str(out / "again.pdf")]) == EXIT_OK
    assert (out / "again.pdf").read_bytes()[:4] == b"%PDF"
