"""
Results store

Handles:
- Engine and session setup (SQLite by default, any SQLAlchemy URL via GAMER_RESULTS_DB)
- Schema creation
- Transactional sessions
- Indexing runs, fold metrics and inversion-curve points

File artifacts (CSV/JSON) stay the primary output; the store indexes them.
"""

import json
import logging
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, List, Optional, Union

import pandas as pd
from dotenv import load_dotenv
from sqlalchemy import create_engine, inspect, select, text
from sqlalchemy.orm import Session, sessionmaker

from records import Base, FoldMetricRecord, RunRecord, ScenarioPointRecord

logger = logging.getLogger(__name__)


class DatabaseManager:
    """Manages the results-store connection and schema"""

    def __init__(self, db_url: str, echo: bool = False):
        """
        Args:
            db_url: SQLAlchemy URL (e.g., sqlite:///runs/results.db)
            echo: Enable SQL logging if True
        """
        self.db_url = db_url
        self.engine = create_engine(db_url, pool_pre_ping=True, echo=echo)
        self.SessionLocal = sessionmaker(bind=self.engine, expire_on_commit=False)
        logger.info(f"DatabaseManager initialized with {db_url}")

    def init_db(self) -> None:
        """Create all tables that do not exist yet"""
        try:
            Base.metadata.create_all(self.engine)
            tables = inspect(self.engine).get_table_names()
            logger.info(f"✓ Results store ready: {tables}")
        except Exception as e:
            logger.error(f"✗ Failed to initialize results store: {e}")
            raise

    def get_session(self) -> Session:
        return self.SessionLocal()

    @contextmanager
    def session_scope(self):
        """
        Transactional scope: commit on success, rollback on error.

        Usage:
            with db.session_scope() as session:
                session.add(record)
        """
        session = self.SessionLocal()
        try:
            yield session
            session.commit()
        except Exception as e:
            session.rollback()
            logger.error(f"Results store error: {e}")
            raise
        finally:
            session.close()

    def health_check(self) -> bool:
        try:
            with self.engine.connect() as conn:
                conn.execute(text("SELECT 1"))
            logger.info("✓ Results store health check passed")
            return True
        except Exception as e:
            logger.error(f"✗ Results store health check failed: {e}")
            return False

    def close(self) -> None:
        try:
            self.engine.dispose()
            logger.info("✓ Results store connections closed")
        except Exception as e:
            logger.error(f"Error closing results store: {e}")

    # ------------------------------------------------------------------
    # Run index
    # ------------------------------------------------------------------

    def record_run(self, command: str, config: Dict, tool_version: str, out_dir: Union[str, Path],
                   seed: Optional[int] = None) -> int:
        with self.session_scope() as session:
            run = RunRecord(
                command=command,
                tool_version=tool_version,
                seed=seed,
                out_dir=str(out_dir),
                config_json=json.dumps(config, sort_keys=True),
            )
            session.add(run)
            session.flush()
            return run.id

    def record_fold_metrics(self, run_id: int, metrics: pd.DataFrame) -> int:
        """Insert rows of a (fold, epoch, loss, auc, acc, sens, spec) frame"""
        rows = [
            FoldMetricRecord(run_id=run_id, **{k: _plain(v) for k, v in row.items()})
            for row in metrics[["fold", "epoch", "loss", "auc", "acc", "sens", "spec"]].to_dict(orient="records")
        ]
        with self.session_scope() as session:
            session.add_all(rows)
        return len(rows)

    def record_scenario_points(self, run_id: int, curves: pd.DataFrame) -> int:
        rows = [
            ScenarioPointRecord(run_id=run_id, **{k: _plain(v) for k, v in row.items()})
            for row in curves[["scenario", "quantile", "auc", "control_auc", "drop"]].to_dict(orient="records")
        ]
        with self.session_scope() as session:
            session.add_all(rows)
        return len(rows)

    def runs(self, command: Optional[str] = None) -> List[RunRecord]:
        with self.session_scope() as session:
            query = select(RunRecord).order_by(RunRecord.id)
            if command:
                query = query.where(RunRecord.command == command)
            return list(session.scalars(query))

    def fold_metrics(self, run_id: int) -> pd.DataFrame:
        query = select(FoldMetricRecord).where(FoldMetricRecord.run_id == run_id).order_by(
            FoldMetricRecord.fold, FoldMetricRecord.epoch
        )
        with self.session_scope() as session:
            rows = [
                {"fold": r.fold, "epoch": r.epoch, "loss": r.loss, "auc": r.auc,
                 "acc": r.acc, "sens": r.sens, "spec": r.spec}
                for r in session.scalars(query)
            ]
        return pd.DataFrame(rows, columns=["fold", "epoch", "loss", "auc", "acc", "sens", "spec"])


def _plain(value):
    """numpy scalars to Python scalars; NaN to NULL"""
    if hasattr(value, "item"):
        value = value.item()
    if isinstance(value, float) and value != value:
        return None
    return value


def results_url(out_dir: Optional[Union[str, Path]] = None) -> str:
    load_dotenv()
    configured = os.getenv("GAMER_RESULTS_DB")
    if configured:
        return configured
    base = Path(out_dir) if out_dir is not None else Path(".")
    base.mkdir(parents=True, exist_ok=True)
    return f"sqlite:///{(base / 'results.db').resolve()}"


# Convenience function for global access
_db_managers: Dict[str, DatabaseManager] = {}


def get_db_manager(out_dir: Optional[Union[str, Path]] = None) -> DatabaseManager:
    """
    Shared manager for GAMER_RESULTS_DB, or sqlite:///<out_dir>/results.db when unset.
    Tables are created on first use.
    """
    url = results_url(out_dir)
    if url not in _db_managers:
        manager = DatabaseManager(url)
        manager.init_db()
        _db_managers[url] = manager
    return _db_managers[url]
