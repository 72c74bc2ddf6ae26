import csv
import json

import pytest

from library.errors import InvalidInputError
from library.stats import METRICS_FILE, aggregate, convergence_report, epochs_to_target, first_epoch_below, \
    human_size, process_memory, read_metrics, write_csv


def _run(tmp_path, name, losses, ters=None):
    run_dir = tmp_path / name
    run_dir.mkdir()
    with open(run_dir / METRICS_FILE, "w") as stream:
        for epoch, loss in enumerate(losses, start=1):
            ter = None if ters is None else ters[epoch - 1]
            stream.write(json.dumps({"epoch": epoch, "cv_loss": loss, "ter": ter}) + "\n")
    return str(run_dir)


def test_read_metrics(tmp_path):
    run_dir = _run(tmp_path, "a", [3.0, 2.0])
    assert [r["cv_loss"] for r in read_metrics(run_dir)] == [3.0, 2.0]
    with pytest.raises(InvalidInputError, match="metrics.jsonl"):
        read_metrics(str(tmp_path))


def test_epochs_to_target():
    curve = [(1, 3.0), (2, 1.5), (3, 1.0)]
    assert epochs_to_target(curve, 1.5) == 2
    assert epochs_to_target(curve, 0.5) is None


def test_first_epoch_below():
    records = [{"epoch": 1, "ter": None}, {"epoch": 2, "ter": 0.6}, {"epoch": 3, "ter": 0.4}]
    assert first_epoch_below(records, "ter", 0.5) == 3
    assert first_epoch_below(records, "ter", 0.1) is None


def test_aggregate():
    assert aggregate([1.0, 3.0, None]) == (2.0, 1.0)
    assert aggregate([None, None]) == (None, None)
    assert aggregate([2.0]) == (2.0, 0.0)


def test_convergence_report(tmp_path):
    reference = _run(tmp_path, "single", [3.0, 2.0, 1.0])
    faster = _run(tmp_path, "multi", [2.5, 1.0])
    header, rows, summary_header, summary = convergence_report([reference, faster])
    assert header == ["epoch", "single", "multi"]
    assert rows == [[1, "3.000000", "2.500000"], [2, "2.000000", "1.000000"], [3, "1.000000", ""]]
    assert summary_header[0] == "run"
    assert summary == [["single", 3, "1.000000", "1.000"], ["multi", 2, "1.000000", "0.667"]]


def test_convergence_report_bad_reference(tmp_path):
    run_dir = _run(tmp_path, "a", [1.0])
    with pytest.raises(InvalidInputError):
        convergence_report([run_dir], reference=3)
    with pytest.raises(InvalidInputError):
        convergence_report([])


def test_write_csv(tmp_path):
    path = str(tmp_path / "out.csv")
    write_csv(path, ["a", "b"], [[1, ""], [2, "x"]])
    with open(path, newline="") as stream:
        assert list(csv.reader(stream)) == [["a", "b"], ["1", ""], ["2", "x"]]


def test_human_size():
    assert human_size(1024) == "1.0 KiB"
    assert human_size(3 * 1024 ** 2) == "3.0 MiB"


def test_process_memory_is_human_readable():
    assert process_memory().endswith("iB")
