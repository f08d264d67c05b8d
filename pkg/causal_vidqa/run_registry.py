#!/usr/bin/env python3
"""
Run Registry
Tracks which (config, method, seed) runs have completed so sweeps skip finished
work and can resume. Uses SQLite for persistent storage.
"""

import json
import logging
import sqlite3
from datetime import datetime, timedelta
from pathlib import Path
from typing import Dict, List, Optional

from .schema import RunRecord, RunStatus

DEFAULT_DB_PATH = "runs.db"
DEFAULT_RETENTION_DAYS = 90

CREATE_RUNS_TABLE = """
    CREATE TABLE IF NOT EXISTS runs (
        run_key TEXT PRIMARY KEY,
        config_hash TEXT NOT NULL,
        method TEXT NOT NULL,
        seed INTEGER NOT NULL,
        status TEXT NOT NULL,
        metrics TEXT NOT NULL,
        record_path TEXT,
        first_completed_at TIMESTAMP NOT NULL,
        last_updated_at TIMESTAMP NOT NULL,
        attempt_count INTEGER DEFAULT 1
    )
"""

CREATE_INDEXES = (
    """CREATE INDEX IF NOT EXISTS idx_config_hash
       ON runs(config_hash)""",
    """CREATE INDEX IF NOT EXISTS idx_method_seed
       ON runs(method, seed)""",
)


class RunRegistry:
    """Manages completed-run state in SQLite database"""

    def __init__(self, db_path: str = DEFAULT_DB_PATH):
        """
        Initialize run registry

        Args:
            db_path: Path to SQLite database file
        """
        self.db_path = Path(db_path)
        self.db_path.parent.mkdir(parents=True, exist_ok=True)
        self.logger = logging.getLogger("RunRegistry")
        self._init_database()

    def _init_database(self):
        """Initialize database schema if not exists"""
        try:
            with sqlite3.connect(self.db_path) as conn:
                cursor = conn.cursor()
                cursor.execute(CREATE_RUNS_TABLE)
                for index_sql in CREATE_INDEXES:
                    cursor.execute(index_sql)
                conn.commit()
                self.logger.debug(f"Database initialized at {self.db_path}")

        except sqlite3.Error as e:
            self.logger.error(f"Database initialization error: {e}")
            raise

    @staticmethod
    def run_key(config_hash: str, method: str, seed: int) -> str:
        return f"{config_hash}_{method}_{seed}"

    def should_run(self, config_hash: str, method: str, seed: int) -> bool:
        """
        Check whether a run still needs to be executed

        Returns:
            False only when a completed record exists; diverged or failed runs are retried
        """
        key = self.run_key(config_hash, str(method), seed)
        try:
            with sqlite3.connect(self.db_path) as conn:
                cursor = conn.cursor()
                cursor.execute("SELECT status FROM runs WHERE run_key = ?", (key,))
                result = cursor.fetchone()
                if result is None:
                    return True
                if result[0] == RunStatus.COMPLETED:
                    self.logger.debug(f"Skipping completed run: {key}")
                    return False
                self.logger.info(f"Retrying {result[0]} run: {key}")
                return True

        except sqlite3.Error as e:
            self.logger.error(f"Database error checking run: {e}")
            return True

    def mark_completed(
        self, record: RunRecord, config_hash: str, record_path: Optional[str] = None
    ):
        """
        Store the outcome of a run (any status)

        Args:
            record: Finished run record
            config_hash: Hash of the run configuration
            record_path: Where the full record was written
        """
        key = self.run_key(config_hash, str(record.method), record.seed)
        now = datetime.now().isoformat()
        metrics = {
            split: {"accuracy": m.accuracy, "grounding_iou": m.grounding_iou}
            for split, m in record.final_metrics.items()
        }

        try:
            with sqlite3.connect(self.db_path) as conn:
                cursor = conn.cursor()
                cursor.execute("SELECT run_key FROM runs WHERE run_key = ?", (key,))
                if cursor.fetchone():
                    cursor.execute(
                        """
                        UPDATE runs
                        SET status = ?,
                            metrics = ?,
                            record_path = ?,
                            last_updated_at = ?,
                            attempt_count = attempt_count + 1
                        WHERE run_key = ?
                    """,
                        (str(record.status), json.dumps(metrics), record_path, now, key),
                    )
                    self.logger.info(f"Updated run record: {key}")
                else:
                    cursor.execute(
                        """
                        INSERT INTO runs
                        (run_key, config_hash, method, seed, status, metrics,
                         record_path, first_completed_at, last_updated_at, attempt_count)
                        VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, 1)
                    """,
                        (
                            key,
                            config_hash,
                            str(record.method),
                            record.seed,
                            str(record.status),
                            json.dumps(metrics),
                            record_path,
                            now,
                            now,
                        ),
                    )
                    self.logger.info(f"Created run record: {key}")
                conn.commit()

        except sqlite3.Error as e:
            self.logger.error(f"Database error marking run: {e}")
            raise

    def cleanup_old_entries(self, days: int = DEFAULT_RETENTION_DAYS) -> int:
        """
        Remove run records last updated more than `days` ago

        Returns:
            Number of records deleted
        """
        cutoff = (datetime.now() - timedelta(days=days)).isoformat()
        try:
            with sqlite3.connect(self.db_path) as conn:
                cursor = conn.cursor()
                cursor.execute("DELETE FROM runs WHERE last_updated_at < ?", (cutoff,))
                deleted_count = cursor.rowcount
                conn.commit()
                if deleted_count > 0:
                    self.logger.info(f"Cleaned up {deleted_count} old run records")
                return deleted_count

        except sqlite3.Error as e:
            self.logger.error(f"Database error during cleanup: {e}")
            return 0

    def get_statistics(self) -> Dict:
        """
        Get statistics about registered runs

        Returns:
            Dictionary with totals by status and by method
        """
        try:
            with sqlite3.connect(self.db_path) as conn:
                cursor = conn.cursor()
                cursor.execute("SELECT COUNT(*) FROM runs")
                total = cursor.fetchone()[0]
                cursor.execute("SELECT status, COUNT(*) FROM runs GROUP BY status")
                by_status = dict(cursor.fetchall())
                cursor.execute("SELECT method, COUNT(*) FROM runs GROUP BY method")
                by_method = dict(cursor.fetchall())
                return {"total_runs": total, "by_status": by_status, "by_method": by_method}

        except sqlite3.Error as e:
            self.logger.error(f"Database error getting statistics: {e}")
            return {}

    def get_run_history(self, config_hash: str, method: str, seed: int) -> Optional[Dict]:
        """
        Get the stored record for one run

        Returns:
            Dictionary with the registry row (metrics decoded) or None if not found
        """
        key = self.run_key(config_hash, str(method), seed)
        try:
            with sqlite3.connect(self.db_path) as conn:
                conn.row_factory = sqlite3.Row
                cursor = conn.cursor()
                cursor.execute("SELECT * FROM runs WHERE run_key = ?", (key,))
                result = cursor.fetchone()
                if result:
                    row = dict(result)
                    row["metrics"] = json.loads(row["metrics"])
                    return row
                return None

        except sqlite3.Error as e:
            self.logger.error(f"Database error getting run history: {e}")
            return None

    def list_runs(self, status: Optional[str] = None) -> List[Dict]:
        """All registry rows, optionally filtered by status"""
        try:
            with sqlite3.connect(self.db_path) as conn:
                conn.row_factory = sqlite3.Row
                cursor = conn.cursor()
                if status is None:
                    cursor.execute("SELECT * FROM runs ORDER BY run_key")
                else:
                    cursor.execute("SELECT * FROM runs WHERE status = ? ORDER BY run_key", (status,))
                return [dict(row) for row in cursor.fetchall()]

        except sqlite3.Error as e:
            self.logger.error(f"Database error listing runs: {e}")
            return []
