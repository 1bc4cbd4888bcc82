"""
SQLAlchemy models for the run registry.
"""

import enum
from datetime import datetime, timezone

from database import Base
from sqlalchemy import Column, DateTime, Enum, Float, ForeignKey, Integer, String, Text
from sqlalchemy.orm import relationship


def _now():
    return datetime.now(timezone.utc)


class RunKind(str, enum.Enum):
    """What a registry run computed."""

    VORTEX = "vortex"
    DERIVATIVES = "derivatives"
    MODULATION = "modulation"
    REFERENCE = "reference"
    EXPERIMENT = "experiment"


class RunStatus(str, enum.Enum):
    """Lifecycle of a registry run."""

    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


class Run(Base):
    """
    One CLI invocation or experiment stage.

    Attributes:
        id: Primary key identifier
        kind: Computation performed
        name: Experiment or subcommand name
        config_hash: sha256 of the canonical config JSON
        config_json: Canonical config JSON
        status: running, completed or failed
        message: Error message of a failed run
        created_at: Start timestamp
        finished_at: Completion timestamp (optional)
    """

    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True, autoincrement=True)
    kind = Column(Enum(RunKind), nullable=False, index=True)
    name = Column(String, nullable=False)
    config_hash = Column(String(64), nullable=False, index=True)
    config_json = Column(Text, nullable=False)
    status = Column(Enum(RunStatus), nullable=False, default=RunStatus.RUNNING)
    message = Column(Text, nullable=True)
    created_at = Column(DateTime, default=_now, nullable=False)
    finished_at = Column(DateTime, nullable=True)

    iterations = relationship(
        "IterationRecord",
        back_populates="run",
        cascade="all, delete-orphan",
        order_by="IterationRecord.iteration",
    )
    steps = relationship(
        "StepRecord",
        back_populates="run",
        cascade="all, delete-orphan",
        order_by="StepRecord.n",
    )

    def __repr__(self):
        return f"<Run(id={self.id}, kind={self.kind}, name={self.name}, status={self.status})>"


class IterationRecord(Base):
    """Outer iteration of a vortex solve."""

    __tablename__ = "iterations"

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False, index=True)
    iteration = Column(Integer, nullable=False)
    residue_sup = Column(Float, nullable=False)
    cauchy_sup = Column(Float, nullable=False)

    run = relationship("Run", back_populates="iterations")


class StepRecord(Base):
    """One row of a modulation run log."""

    __tablename__ = "steps"

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False, index=True)
    n = Column(Integer, nullable=False)
    t = Column(Float, nullable=False)
    w = Column(Float, nullable=False)
    gamma = Column(Float, nullable=False)
    r_sup = Column(Float, nullable=False)
    r_l2 = Column(Float, nullable=False)
    det_a = Column(Float, nullable=False)
    orth_phi = Column(Float, nullable=False)
    orth_dphi = Column(Float, nullable=False)
    radiation_lz = Column(Float, nullable=False)

    run = relationship("Run", back_populates="steps")
