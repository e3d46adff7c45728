import datetime
import json

import pytest

from authority_lock.analysis import MetricsRecord
from authority_lock.errors import InvalidArgumentError
from authority_lock.run_store import RunDirectory, calculate_file_hash, find_runs, load_metrics

STAMP = datetime.datetime(2024, 5, 1, 12, 30, 0)


def test_same_timestamp_gets_suffix(tmp_path):
    first = RunDirectory(tmp_path, "implant", timestamp=STAMP)
    second = RunDirectory(tmp_path, "implant", timestamp=STAMP)
    assert first.path.name == "run_implant_20240501_123000"
    assert second.path.name == "run_implant_20240501_123000_2"
    assert find_runs(tmp_path, "implant") == [first.path, second.path]
    assert find_runs(tmp_path, "attack") == []


def test_files_are_never_overwritten(tmp_path):
    run = RunDirectory(tmp_path, "certify", timestamp=STAMP)
    run.write_text("notes.txt", "uno")
    with pytest.raises(FileExistsError):
        run.write_text("notes.txt", "dos")
    assert (run.path / "notes.txt").read_text(encoding='utf-8') == "uno"


def test_manifest_lists_hashes_and_skips_logs(tmp_path):
    run = RunDirectory(tmp_path, "report", timestamp=STAMP)
    data = run.write_json("data.json", {"valor": 1})
    (run.path / "report.log").write_text("log", encoding='utf-8')
    run.add_error("algo falló")
    manifest = json.loads(run.finalize(extra_key="x").read_text(encoding='utf-8'))
    assert set(manifest['files']) == {"data.json"}
    assert manifest['files']['data.json']['sha256'] == calculate_file_hash(data)
    assert manifest['success'] is False
    assert manifest['errors'] == ["algo falló"]
    assert manifest['extra_key'] == "x"


def test_metrics_round_trip(tmp_path):
    run = RunDirectory(tmp_path, "implant", timestamp=STAMP)
    records = [
        MetricsRecord("mlp", "synth", 0.0, 0, acc_auth=0.9, acc_clean=0.1),
        MetricsRecord("mlp", "synth", 0.5, 1, acc_auth=0.8, acc_clean=0.2, acc_reversed=0.25, attack="adaptive"),
    ]
    run.write_metrics(records)
    assert load_metrics(run.path) == records


def test_load_metrics_requires_file(tmp_path):
    with pytest.raises(InvalidArgumentError):
        load_metrics(tmp_path)
