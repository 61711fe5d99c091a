import json
import logging

from early_stop import PatienceTracker
from launcher import run_concurrently
from progress import StepAggregator, plot_records, records_to_tsv
from runlog import log, setup_logging


def test_patience_tracker_stops_after_patience(tmp_path):
    tracker = PatienceTracker(str(tmp_path / "validation.json"), patience=2)
    assert tracker.update(3.0)
    assert tracker.update(2.5)
    assert not tracker.update(2.6)
    assert not tracker.should_stop()
    assert not tracker.update(2.5)
    assert tracker.should_stop()
    assert tracker.best == 2.5 and tracker.bad_epochs == 2


def test_patience_tracker_persists_history(tmp_path):
    path = str(tmp_path / "validation.json")
    first = PatienceTracker(path, patience=3)
    for loss in (4.0, 3.0, 3.5):
        first.update(loss)
    again = PatienceTracker(path, patience=3)
    assert list(again.history) == [4.0, 3.0, 3.5]
    assert again.best == 3.0 and again.bad_epochs == 1
    assert json.loads((tmp_path / "validation.json").read_text())["best"] == 3.0


def test_patience_tracker_reset_truncates_file(tmp_path):
    path = str(tmp_path / "validation.json")
    old = PatienceTracker(path, patience=2)
    for loss in (1.0, 2.0):
        old.update(loss)
    fresh = PatienceTracker(path, patience=2)
    fresh.reset()
    assert not fresh.history and fresh.bad_epochs == 0
    assert json.loads((tmp_path / "validation.json").read_text())["history"] == []
    assert fresh.update(5.0)


def test_patience_tracker_in_memory():
    tracker = PatienceTracker(None, patience=1, min_delta=0.1)
    tracker.update(1.0)
    assert not tracker.update(0.95)
    assert tracker.should_stop()


def test_step_aggregator_flushes(tmp_path):
    aggregator = StepAggregator(flush_every=3)
    assert aggregator.flush() == ""
    for step in range(1, 4):
        aggregator.add(step, 2.0 + step, 1e-3)
        assert aggregator.should_flush() == (step == 3)
    line = aggregator.flush()
    assert line.startswith("step 3 loss 4.0000 lr 1.00e-03")
    assert not aggregator.buffer and len(aggregator.records) == 3
    rows = aggregator.to_tsv().splitlines()
    assert rows[0] == "step\tloss\tlr\twall"
    assert rows[1].startswith("1\t3.000000\t1.000000e-03\t")
    assert records_to_tsv([]) == "step\tloss\tlr\twall\n"
    assert plot_records(aggregator.records, tmp_path / "loss.png").stat().st_size > 0


def test_run_concurrently_reports_exit_codes(tmp_path):
    commands = [["-c", "import sys; sys.exit(0)"], ["-c", "import sys; sys.exit(3)"], ["-c", "pass"]]
    assert run_concurrently(commands, max_parallel=2, cwd=tmp_path) == [0, 3, 0]


def test_log_writes_console_and_file(tmp_path, capsys):
    setup_logging(tmp_path / "run.log", "INFO")
    log("probe finished")
    logging.getLogger().handlers[0].flush()
    assert "probe finished" in capsys.readouterr().out
    assert "probe finished" in (tmp_path / "run.log").read_text(encoding="utf-8")
    setup_logging(None, "WARNING")
    assert logging.getLogger().level == logging.WARNING
