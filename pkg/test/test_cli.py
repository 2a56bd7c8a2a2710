import json
import logging
from pathlib import Path
from typing import Any

import pandas as pd
import pytest
import yaml

from medchain.cli import main, TRACE_COLUMNS
from medchain.errors import exception_class_for_reason
from medchain.scenario import resolve_scenario_path


def _error(capsys: pytest.CaptureFixture[str]) -> dict[str, Any]:
    line = capsys.readouterr().err.strip().splitlines()[-1]
    error: dict[str, Any] = json.loads(line)
    assert exception_class_for_reason(error["error"]).exit_code == error["exit_code"]
    return error


def test_optimize_urgent_channel(capsys: pytest.CaptureFixture[str]) -> None:
    """The trace is followed by a summary comparing BCO with the grid search."""
    assert main(["optimize", "paper_default", "--channel", "1"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()

    assert lines[0] == ",".join(TRACE_COLUMNS)
    assert len(lines) == 1 + 9 + 1
    summary = lines[-1]
    assert summary.startswith("channel=1 bco m=8 n=3 ")
    assert "iterations=8 " in summary
    assert "exhaustive m=8 n=3 " in summary
    assert summary.endswith("evaluations=420 match=True")


def test_optimize_default_channel_matches(capsys: pytest.CaptureFixture[str]) -> None:
    """Test the normal channel reaches the grid optimum."""
    assert main(["optimize", "paper_default"]) == 0
    summary = capsys.readouterr().out.strip().splitlines()[-1]
    assert summary.startswith("channel=3 bco m=21 n=20 ")
    assert summary.endswith("match=True")


def test_queue_sweep(tmp_path: Path) -> None:
    """One row per entity and service rate; equal priority is 1/(mu - 42) for everyone."""
    output = tmp_path / "queue.csv"
    assert main(["queue", "paper_default", "--output", str(output)]) == 0
    frame = pd.read_csv(output)
    assert len(frame) == 3 * 21
    assert sorted(frame["service_rate"].unique()) == [45.0, 50.0, 60.0]

    at_50 = frame[frame["service_rate"] == 50.0]
    assert at_50["equal"].tolist() == pytest.approx([0.125] * 21)
    assert at_50["priority"].iloc[0] == pytest.approx(1.0 / 48.0)
    assert at_50["rank"].tolist() == list(range(1, 22))


def test_queue_single_rate(tmp_path: Path) -> None:
    """Test --service-rate overrides the sweep."""
    output = tmp_path / "queue.csv"
    assert main(["queue", "paper_default", "--service-rate", "60", "--output", str(output)]) == 0
    frame = pd.read_csv(output)
    assert frame["service_rate"].tolist() == [60.0] * 21


def test_queue_coupled_to_slow_channel(capsys: pytest.CaptureFixture[str]) -> None:
    """mu = n/L of the urgent channel cannot carry 42 tx/s: a runtime error."""
    assert main(["queue", "paper_default", "--coupled", "1"]) == 3
    error = _error(capsys)
    assert error["error"] == "Instability"
    assert error["exit_code"] == 3
    assert error["margin"] < 0


def test_channels_table(tmp_path: Path) -> None:
    """Optimized channels list their trace, the fixed channel its single configuration."""
    output = tmp_path / "channels.csv"
    assert main(["channels", "paper_default", "--output", str(output)]) == 0
    frame = pd.read_csv(output)
    assert frame.groupby("channel").size().to_dict() == {1: 9, 2: 21, 3: 21, 4: 1}

    fixed = frame[frame["channel"] == 4].iloc[0]
    assert (fixed["mode"], fixed["m"], fixed["n"]) == ("fixed", 8, 80)


def test_synth_features_and_monitor(tmp_path: Path) -> None:
    """A synthetic cohort flows through feature extraction and monitoring."""
    signals = tmp_path / "signals.csv"
    features = tmp_path / "features.csv"
    monitor = tmp_path / "monitor.csv"

    assert main(["synth", "--patients", "2", "--channels", "4", "--length", "64", "--injected", "3", "--output", str(signals)]) == 0
    assert main(["features", str(signals), "--window-length", "32", "--output", str(features)]) == 0
    assert main(["monitor", str(signals), "--window-length", "64", "--output", str(monitor)]) == 0

    assert len(pd.read_csv(signals)) == 2 * 4 * 3 * 64
    assert len(pd.read_csv(features)) == 2 * 4 * 3 * 2

    table = pd.read_csv(monitor)
    assert len(table) == 2 * 4
    assert set(table["status"]) == {"major"}
    assert table.groupby("patient")["exceeds"].sum().tolist() == [3, 3]


def test_simulate_is_deterministic(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    """Two runs with the same seed write identical reports."""
    first, second = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "paper_default", "--seed", "3", "--events", "--output-dir", str(first)]) == 0
    assert main(["simulate", "paper_default", "--seed", "3", "--events", "--output-dir", str(second)]) == 0

    printed = capsys.readouterr().out.split()
    assert printed[:4] == [str(first / f"{name}.csv") for name in ("entities", "channels", "dispatch", "events")]
    for name in ("entities", "channels", "dispatch", "events"):
        assert (first / f"{name}.csv").read_text() == (second / f"{name}.csv").read_text()

    dispatch = pd.read_csv(first / "dispatch.csv")
    assert len(dispatch) > 0
    assert dispatch["committed_at"].notna().all()
    assert set(dispatch["channel"]) <= {1, 2, 3}


def test_simulate_compare_and_replications(tmp_path: Path) -> None:
    """Both disciplines are reported for every seed."""
    assert main(["simulate", "paper_default", "--seed", "1", "--replications", "2", "--compare", "--output-dir", str(tmp_path)]) == 0
    entities = pd.read_csv(tmp_path / "entities.csv")
    assert entities.groupby(["discipline", "seed"]).size().to_dict() == {
        ("equal", 1): 21,
        ("equal", 2): 21,
        ("priority", 1): 21,
        ("priority", 2): 21,
    }
    assert not (tmp_path / "events.csv").exists()


def test_simulate_workers_match_threads(tmp_path: Path) -> None:
    """Replications on worker processes write the same reports as in threads."""
    threads, processes = tmp_path / "threads", tmp_path / "processes"
    argv = ["simulate", "paper_default", "--seed", "4", "--replications", "2"]
    assert main([*argv, "--output-dir", str(threads)]) == 0
    assert main([*argv, "--workers", "2", "--output-dir", str(processes)]) == 0
    for name in ("entities", "channels", "dispatch"):
        assert (threads / f"{name}.csv").read_text() == (processes / f"{name}.csv").read_text()


def test_missing_scenario(capsys: pytest.CaptureFixture[str]) -> None:
    """Test a configuration error exits 2 with a JSON line."""
    assert main(["queue", "no_such_scenario"]) == 2
    assert _error(capsys)["error"] == "ConfigurationError"


def test_unknown_channel(capsys: pytest.CaptureFixture[str]) -> None:
    """Test optimizing a channel the scenario does not have."""
    assert main(["optimize", "paper_default", "--channel", "9"]) == 2
    error = _error(capsys)
    assert (error["error"], error["field"]) == ("ReferentialError", "channels")


def test_bad_signal_file(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    """Test a malformed signal CSV reports its row."""
    path = tmp_path / "bad.csv"
    path.write_text("patient,channel,session,sample_index,value\nP1,1,middle,0,1.0\n", encoding="utf-8")
    assert main(["features", str(path)]) == 2
    error = _error(capsys)
    assert (error["error"], error["row"]) == ("SignalParseError", 2)


@pytest.mark.parametrize(
    "argv",
    [["bogus"], [], ["simulate", "paper_default", "--replications", "0"], ["simulate", "paper_default", "--workers", "0"]],
)
def test_usage_errors(argv: list[str], capsys: pytest.CaptureFixture[str]) -> None:
    """Test usage errors exit 1."""
    assert main(argv) == 1
    error = _error(capsys)
    assert (error["error"], error["exit_code"]) == ("UsageError", 1)


def test_optimize_warns_on_non_unimodal_profile(
    tmp_path: Path, caplog: pytest.LogCaptureFixture, capsys: pytest.CaptureFixture[str]
) -> None:
    """Six slow validators after fifteen fast ones make the greedy stop early, with warnings."""
    document = yaml.safe_load(resolve_scenario_path("paper_default").read_text(encoding="utf-8"))
    document["validators"] = [{"id": i, "compute": 100.0 if i <= 15 else 10.0, "price": 0.01} for i in range(1, 22)]
    document["channels"][2]["weights"] = {"alpha": 0.5, "beta": 0.45, "gamma": 0.05}
    path = tmp_path / "slow_tail.yaml"
    path.write_text(yaml.safe_dump(document, sort_keys=False), encoding="utf-8")

    with caplog.at_level(logging.WARNING, logger="medchain.cli"):
        assert main(["optimize", str(path), "--channel", "3"]) == 0
    summary = capsys.readouterr().out.strip().splitlines()[-1]
    assert summary.startswith("channel=3 bco m=15 ")
    assert "exhaustive m=21 " in summary
    assert summary.endswith("match=False")
    assert "is not unimodal" in caplog.text
    assert "above the exhaustive optimum" in caplog.text


def test_failures_are_logged(caplog: pytest.LogCaptureFixture, capsys: pytest.CaptureFixture[str]) -> None:
    """A failing command logs an error before the JSON line."""
    with caplog.at_level(logging.ERROR, logger="medchain.cli"):
        assert main(["queue", "no_such_scenario"]) == 2
    assert any(r.levelno == logging.ERROR and r.message.startswith("queue failed") for r in caplog.records)
    assert _error(capsys)["error"] == "ConfigurationError"
