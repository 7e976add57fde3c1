"""
SQLAlchemy ORM models for the results store

Tables:
- runs: One row per CLI run (command, resolved config, tool version, output directory)
- fold_metrics: Per-epoch validation metrics of each training fold
- scenario_points: Inversion-curve points per scenario and quantile
"""

from datetime import datetime

from sqlalchemy import Column, DateTime, Float, ForeignKey, Index, Integer, String, Text
from sqlalchemy.orm import declarative_base, relationship

Base = declarative_base()


class RunRecord(Base):
    """A CLI invocation and where its artifacts live"""
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True)
    command = Column(String(32), nullable=False)
    tool_version = Column(String(32), nullable=False)
    seed = Column(Integer)
    out_dir = Column(String(1024), nullable=False)
    config_json = Column(Text, nullable=False)
    created_at = Column(DateTime, default=datetime.utcnow)

    fold_metrics = relationship("FoldMetricRecord", back_populates="run", cascade="all, delete-orphan")
    scenario_points = relationship("ScenarioPointRecord", back_populates="run", cascade="all, delete-orphan")

    def __repr__(self):
        return f"<Run {self.id} {self.command} -> {self.out_dir}>"


class FoldMetricRecord(Base):
    __tablename__ = "fold_metrics"
    __table_args__ = (Index("idx_fold_metrics_run_fold", "run_id", "fold"),)

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False)
    fold = Column(Integer, nullable=False)
    epoch = Column(Integer, nullable=False)
    loss = Column(Float)
    auc = Column(Float)
    acc = Column(Float)
    sens = Column(Float)
    spec = Column(Float)

    run = relationship("RunRecord", back_populates="fold_metrics")

    def __repr__(self):
        return f"<FoldMetric run={self.run_id} fold={self.fold} epoch={self.epoch} auc={self.auc}>"


class ScenarioPointRecord(Base):
    __tablename__ = "scenario_points"
    __table_args__ = (Index("idx_scenario_points_run_scenario", "run_id", "scenario"),)

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False)
    scenario = Column(Integer, nullable=False)
    quantile = Column(Float, nullable=False)
    auc = Column(Float)
    control_auc = Column(Float)
    drop = Column(Float)

    run = relationship("RunRecord", back_populates="scenario_points")

    def __repr__(self):
        return f"<ScenarioPoint run={self.run_id} S{self.scenario} q={self.quantile} auc={self.auc}>"
