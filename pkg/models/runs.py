"""
Run registry - one row per CLI command run, one row per emitted artifact.
Timestamps live here only, so the manifests in the output dir stay reproducible.
"""
from sqlalchemy import Column, Integer, String, DateTime, ForeignKey, Text
from sqlalchemy.orm import relationship
from database import Base
import datetime


class PipelineRun(Base):
    __tablename__ = "pipeline_runs"

    id = Column(Integer, primary_key=True, index=True)
    command = Column(String(30), nullable=False, index=True)
    output_dir = Column(String(500), nullable=False)
    config_text = Column(Text)                 # resolved flat config
    status = Column(String(20), default="running")  # running, ok, failed
    started_at = Column(DateTime, default=datetime.datetime.utcnow)
    finished_at = Column(DateTime, nullable=True)

    artifacts = relationship("RunArtifact", back_populates="run", cascade="all, delete-orphan")


class RunArtifact(Base):
    __tablename__ = "run_artifacts"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("pipeline_runs.id"), nullable=False, index=True)
    path = Column(String(500), nullable=False)
    sha256 = Column(String(64), nullable=False)
    bytes = Column(Integer, default=0)

    run = relationship("PipelineRun", back_populates="artifacts")
