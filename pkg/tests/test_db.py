import os
import json
import hashlib

from icpolypseg.db import RunDB, RunManifest, hash_artifacts, sha256_file
from icpolypseg.metrics import EvalRow


def test_run_lifecycle(tmp_path):
    db = RunDB(str(tmp_path / "nested" / "runs.db"))
    db.start_run("r1", "train", 3, {"lr": 0.1}, {"data": "/d"})
    row = db.get_run("r1")
    assert row["status"] == "running" and row["seed"] == 3
    assert json.loads(row["config_json"]) == {"lr": 0.1}

    db.finish_run("r1", "ok", {"checkpoint": "/c"}, {"/c": "abc"}, config={"lr": 0.2}, seed=4)
    row = db.get_run("r1")
    assert row["status"] == "ok" and row["seed"] == 4 and row["ended_at"] is not None
    assert json.loads(row["config_json"]) == {"lr": 0.2}
    assert json.loads(row["inputs_json"]) == {"data": "/d"}
    assert json.loads(row["hashes_json"]) == {"/c": "abc"}
    assert [r["run_id"] for r in db.recent_runs()] == ["r1"]
    db.close()


def test_epochs_upsert_and_order():
    db = RunDB(":memory:")
    db.add_epoch("r", 2, 0.5, 0.6, {"p2": 0.3}, 1e-4, 1.5)
    db.add_epoch("r", 1, 0.9, 1.0)
    db.add_epoch("r", 2, 0.4, 0.55)
    rows = db.epochs("r")
    assert [r["epoch"] for r in rows] == [1, 2]
    assert rows[1]["val_loss"] == 0.55


def test_report_rows():
    db = RunDB(":memory:")
    db.add_report_rows("r", [EvalRow("val", "m", 0.9, 0.8, 0.05, 0.1), EvalRow("test", "m", 0.7, 0.6, 0.1, 0.2)])
    assert [r["dataset"] for r in db.reports("r")] == ["val", "test"]
    assert db.reports("other") == []


def test_hash_artifacts_walks_directories(tmp_path):
    (tmp_path / "d" / "sub").mkdir(parents=True)
    (tmp_path / "d" / "b.txt").write_bytes(b"b")
    (tmp_path / "d" / "sub" / "a.txt").write_bytes(b"a")
    single = tmp_path / "x.bin"
    single.write_bytes(b"xyz")
    hashes = hash_artifacts([str(tmp_path / "d"), str(single), str(tmp_path / "missing")])
    assert list(hashes) == [
        os.path.join(str(tmp_path / "d"), "b.txt"),
        os.path.join(str(tmp_path / "d" / "sub"), "a.txt"),
        str(single),
    ]
    assert sha256_file(str(single)) == hashlib.sha256(b"xyz").hexdigest()


def test_manifest_round_trip(tmp_path):
    m = RunManifest(run_id="r", command="eval", config={"threshold": 0.5}, inputs={"data": ["/a"]},
                    outputs={"report": "/r.json"}, seed=1, artifact_hashes={"/r.json": "00"},
                    started_at="t0", ended_at="t1", status="ok")
    path = str(tmp_path / "out" / "run_manifest.json")
    m.write(path)
    assert RunManifest.read(path) == m
