"""
Results store for run manifests and per-battery metrics.
Async SQLite via aiosqlite.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import aiosqlite
import numpy as np

from .evaluation import MetricReport
from .exceptions import ConfigError

logger = logging.getLogger(__name__)

# Manifest fields that differ between otherwise identical runs.
VOLATILE_FIELDS = ("wall_time_s",)

SCHEMA_PATH = Path(__file__).parent / "schema.sql"
SCHEMA_VERSION = 1


def default_store_path() -> Path:
    """~/.battery-forecast/runs.db, creating the directory."""
    store_dir = Path.home() / ".battery-forecast"
    store_dir.mkdir(exist_ok=True)
    return store_dir / "runs.db"


def manifest_hash(manifest: Dict[str, Any]) -> str:
    """SHA256 over the manifest without its volatile fields."""
    stable = {k: v for k, v in manifest.items() if k not in VOLATILE_FIELDS}
    return hashlib.sha256(json.dumps(stable, sort_keys=True).encode()).hexdigest()


class ResultStore:
    """Async SQLite store of runs and their metrics."""

    def __init__(self, db_path: Optional[str] = None):
        if db_path is None:
            db_path = str(default_store_path())
        self.db_path = db_path
        self._db: Optional[aiosqlite.Connection] = None

    async def connect(self):
        """Connect to the database and initialize schema."""
        Path(self.db_path).parent.mkdir(parents=True, exist_ok=True)
        self._db = await aiosqlite.connect(self.db_path)
        self._db.row_factory = aiosqlite.Row
        await self._db.execute("PRAGMA foreign_keys = ON")
        try:
            await self._initialize_schema()
        except ConfigError:
            await self.close()
            raise
        logger.info(f"Connected to results store: {self.db_path}")

    async def close(self):
        if self._db:
            await self._db.close()
            self._db = None

    async def __aenter__(self) -> "ResultStore":
        await self.connect()
        return self

    async def __aexit__(self, *exc_info):
        await self.close()

    async def _initialize_schema(self):
        """Create the tables on a fresh file; refuse files written by a newer release."""
        cursor = await self._db.execute("PRAGMA user_version")
        version = (await cursor.fetchone())[0]
        if version > SCHEMA_VERSION:
            raise ConfigError(f"Results store {self.db_path} has schema version {version}, "
                              f"newer than supported version {SCHEMA_VERSION}")
        if version == SCHEMA_VERSION:
            return
        await self._db.executescript(SCHEMA_PATH.read_text())
        await self._db.execute(f"PRAGMA user_version = {SCHEMA_VERSION}")
        await self._db.commit()
        logger.debug(f"Results schema created at version {SCHEMA_VERSION}")

    async def add_run(self, manifest: Dict[str, Any], variant: Optional[str] = None) -> int:
        """
        Record a run manifest. Returns the run ID; a manifest identical up to
        its volatile fields returns the existing ID.
        """
        digest = manifest_hash(manifest)
        cursor = await self._db.execute("SELECT id FROM runs WHERE manifest_hash = ?", (digest,))
        row = await cursor.fetchone()
        if row:
            logger.debug(f"Run already recorded as {row['id']}")
            return row["id"]

        cursor = await self._db.execute(
            """
            INSERT INTO runs (manifest_hash, command, config_hash, seed, variant, manifest)
            VALUES (?, ?, ?, ?, ?, ?)
            """,
            (
                digest,
                manifest.get("command", "unknown"),
                manifest.get("config_hash"),
                manifest.get("seed"),
                variant,
                json.dumps(manifest, sort_keys=True),
            ),
        )
        await self._db.commit()
        run_id = cursor.lastrowid
        logger.info(f"Recorded run {run_id}: {manifest.get('command')}")
        return run_id

    async def add_metrics(self, run_id: int, report: MetricReport) -> int:
        """Insert per-battery scores of a report; returns the number of new rows."""
        baseline = {(b.battery_id, b.split): b.mape for b in report.baseline}
        rows = [
            (run_id, s.split, s.battery_id, s.mape, s.mae, baseline.get((s.battery_id, s.split)))
            for s in report.per_battery
        ]
        before = self._db.total_changes
        await self._db.executemany(
            """
            INSERT OR IGNORE INTO metrics (run_id, split, battery_id, mape, mae, baseline_mape)
            VALUES (?, ?, ?, ?, ?, ?)
            """,
            rows,
        )
        await self._db.commit()
        added = self._db.total_changes - before
        logger.debug(f"Stored {added} metric rows for run {run_id}")
        return added

    async def get_run(self, run_id: int) -> Optional[Dict[str, Any]]:
        cursor = await self._db.execute("SELECT * FROM runs WHERE id = ?", (run_id,))
        row = await cursor.fetchone()
        if row is None:
            return None
        entry = dict(row)
        entry["manifest"] = json.loads(entry["manifest"])
        return entry

    async def aggregate(self, variant: Optional[str] = None) -> Dict[str, Any]:
        """
        Mean and standard deviation of split-level macro MAPE/MAE across
        every stored (run, split) pair of one variant.
        """
        cursor = await self._db.execute(
            """
            SELECT m.run_id, m.split, AVG(m.mape) AS mape, AVG(m.mae) AS mae
            FROM metrics m JOIN runs r ON r.id = m.run_id
            WHERE r.variant IS ?
            GROUP BY m.run_id, m.split
            ORDER BY m.run_id, m.split
            """,
            (variant,),
        )
        rows = await cursor.fetchall()
        mape = np.array([row["mape"] for row in rows], dtype=np.float64)
        mae = np.array([row["mae"] for row in rows], dtype=np.float64)
        runs = len({row["run_id"] for row in rows})
        return {
            "variant": variant,
            "runs": runs,
            "splits": len(rows),
            "mape_mean": float(mape.mean()) if len(rows) else None,
            "mape_sd": float(mape.std()) if len(rows) else None,
            "mae_mean": float(mae.mean()) if len(rows) else None,
            "mae_sd": float(mae.std()) if len(rows) else None,
        }

    async def aggregate_all(self) -> List[Dict[str, Any]]:
        """One aggregate per variant that has stored metrics."""
        cursor = await self._db.execute(
            """
            SELECT DISTINCT r.variant FROM runs r
            WHERE EXISTS (SELECT 1 FROM metrics m WHERE m.run_id = r.id)
            ORDER BY r.variant
            """
        )
        variants = [row["variant"] for row in await cursor.fetchall()]
        return [await self.aggregate(v) for v in variants]

    async def get_stats(self) -> Dict[str, Any]:
        """Get store statistics."""
        stats: Dict[str, Any] = {}

        cursor = await self._db.execute("SELECT COUNT(*) as total FROM runs")
        row = await cursor.fetchone()
        stats["total_runs"] = row["total"]

        cursor = await self._db.execute(
            """
            SELECT command, COUNT(*) as count
            FROM runs
            GROUP BY command
            """
        )
        rows = await cursor.fetchall()
        stats["runs_by_command"] = {row["command"]: row["count"] for row in rows}

        cursor = await self._db.execute("SELECT COUNT(*) as count FROM metrics")
        row = await cursor.fetchone()
        stats["metric_rows"] = row["count"]

        cursor = await self._db.execute(
            """
            SELECT COUNT(*) as count
            FROM runs
            WHERE created_at > datetime('now', '-1 day')
            """
        )
        row = await cursor.fetchone()
        stats["runs_last_24h"] = row["count"]

        return stats
