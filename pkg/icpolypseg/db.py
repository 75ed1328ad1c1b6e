import os
import json
import time
import hashlib
import sqlite3
from dataclasses import dataclass, field, asdict
from typing import Optional, Iterable, List, Dict, Any


class RunDB:
    """Registry of CLI runs, per-epoch training records and evaluation rows."""

    def __init__(self, path: str):
        if path != ":memory:":
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self.conn = sqlite3.connect(path)
        self.conn.row_factory = sqlite3.Row
        self._init()

    def _init(self) -> None:
        cur = self.conn.cursor()
        cur.execute("""
        CREATE TABLE IF NOT EXISTS runs (
            run_id TEXT PRIMARY KEY,
            command TEXT NOT NULL,
            seed INTEGER,
            config_json TEXT,
            inputs_json TEXT,
            outputs_json TEXT,
            hashes_json TEXT,
            started_at INTEGER NOT NULL,
            ended_at INTEGER,
            status TEXT NOT NULL DEFAULT 'running'
        );
        """)
        cur.execute("""
        CREATE TABLE IF NOT EXISTS epochs (
            run_id TEXT NOT NULL,
            epoch INTEGER NOT NULL,
            train_loss REAL NOT NULL,
            val_loss REAL NOT NULL,
            per_head_json TEXT,
            lr REAL,
            wall_time REAL,
            PRIMARY KEY (run_id, epoch)
        );
        """)
        cur.execute("""
        CREATE TABLE IF NOT EXISTS reports (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            run_id TEXT NOT NULL,
            dataset TEXT NOT NULL,
            model TEXT NOT NULL,
            mdice REAL NOT NULL,
            miou REAL NOT NULL,
            mae REAL NOT NULL,
            fnr REAL NOT NULL
        );
        """)
        self.conn.commit()

    def close(self) -> None:
        self.conn.close()

    # --- runs ---
    def start_run(self, run_id: str, command: str, seed: Optional[int], config: Optional[dict],
                  inputs: Optional[dict] = None) -> None:
        cur = self.conn.cursor()
        cur.execute("""
            INSERT INTO runs (run_id, command, seed, config_json, inputs_json, started_at, status)
            VALUES (?, ?, ?, ?, ?, ?, 'running')
            ON CONFLICT(run_id) DO UPDATE SET command=excluded.command, seed=excluded.seed,
              config_json=excluded.config_json, inputs_json=excluded.inputs_json,
              started_at=excluded.started_at, status='running'
        """, (run_id, command, seed, json.dumps(config or {}), json.dumps(inputs or {}), int(time.time())))
        self.conn.commit()

    def finish_run(self, run_id: str, status: str, outputs: Optional[dict] = None,
                   hashes: Optional[dict] = None, config: Optional[dict] = None,
                   inputs: Optional[dict] = None, seed: Optional[int] = None) -> None:
        cur = self.conn.cursor()
        cur.execute(
            "UPDATE runs SET status=?, outputs_json=?, hashes_json=?, ended_at=? WHERE run_id=?",
            (status, json.dumps(outputs or {}), json.dumps(hashes or {}), int(time.time()), run_id),
        )
        # config/inputs are only known once the command resolved them
        if config is not None:
            cur.execute("UPDATE runs SET config_json=? WHERE run_id=?", (json.dumps(config), run_id))
        if inputs is not None:
            cur.execute("UPDATE runs SET inputs_json=? WHERE run_id=?", (json.dumps(inputs), run_id))
        if seed is not None:
            cur.execute("UPDATE runs SET seed=? WHERE run_id=?", (int(seed), run_id))
        self.conn.commit()

    def get_run(self, run_id: str) -> Optional[sqlite3.Row]:
        cur = self.conn.cursor()
        cur.execute("SELECT * FROM runs WHERE run_id=?", (run_id,))
        return cur.fetchone()

    def recent_runs(self, limit: int = 20) -> List[sqlite3.Row]:
        cur = self.conn.cursor()
        cur.execute("SELECT * FROM runs ORDER BY started_at DESC, run_id DESC LIMIT ?", (int(limit),))
        return cur.fetchall()

    # --- epochs ---
    def add_epoch(self, run_id: str, epoch: int, train_loss: float, val_loss: float,
                  per_head: Optional[dict] = None, lr: Optional[float] = None,
                  wall_time: Optional[float] = None) -> None:
        cur = self.conn.cursor()
        cur.execute("""
            INSERT INTO epochs (run_id, epoch, train_loss, val_loss, per_head_json, lr, wall_time)
            VALUES (?, ?, ?, ?, ?, ?, ?)
            ON CONFLICT(run_id, epoch) DO UPDATE SET train_loss=excluded.train_loss,
              val_loss=excluded.val_loss, per_head_json=excluded.per_head_json,
              lr=excluded.lr, wall_time=excluded.wall_time
        """, (run_id, int(epoch), float(train_loss), float(val_loss), json.dumps(per_head or {}), lr, wall_time))
        self.conn.commit()

    def epochs(self, run_id: str) -> List[sqlite3.Row]:
        cur = self.conn.cursor()
        cur.execute("SELECT * FROM epochs WHERE run_id=? ORDER BY epoch", (run_id,))
        return cur.fetchall()

    # --- reports ---
    def add_report_rows(self, run_id: str, rows: Iterable[Any]) -> None:
        """`rows` are EvalRow-like objects (dataset, model, mdice, miou, mae, fnr)."""
        cur = self.conn.cursor()
        cur.executemany(
            "INSERT INTO reports (run_id, dataset, model, mdice, miou, mae, fnr) VALUES (?, ?, ?, ?, ?, ?, ?)",
            [(run_id, r.dataset, r.model, r.mdice, r.miou, r.mae, r.fnr) for r in rows],
        )
        self.conn.commit()

    def reports(self, run_id: str) -> List[sqlite3.Row]:
        cur = self.conn.cursor()
        cur.execute("SELECT * FROM reports WHERE run_id=? ORDER BY id", (run_id,))
        return cur.fetchall()


# ---------------------------
# Run manifest
# ---------------------------

def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_artifacts(paths: Iterable[str]) -> Dict[str, str]:
    """sha256 per file; directories are walked in sorted order."""
    out: Dict[str, str] = {}
    for p in paths:
        if os.path.isdir(p):
            for root, dirs, files in os.walk(p):
                dirs.sort()
                for name in sorted(files):
                    fp = os.path.join(root, name)
                    out[fp] = sha256_file(fp)
        elif os.path.isfile(p):
            out[p] = sha256_file(p)
    return out


@dataclass
class RunManifest:
    run_id: str
    command: str
    config: Dict[str, Any] = field(default_factory=dict)
    inputs: Dict[str, Any] = field(default_factory=dict)
    outputs: Dict[str, Any] = field(default_factory=dict)
    seed: Optional[int] = None
    artifact_hashes: Dict[str, str] = field(default_factory=dict)
    started_at: str = ""
    ended_at: str = ""
    status: str = "running"

    def write(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)

    @classmethod
    def read(cls, path: str) -> "RunManifest":
        with open(path, "r", encoding="utf-8") as f:
            return cls(**json.load(f))
