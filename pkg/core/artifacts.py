"""
Output-directory handling for one command run: an exclusive lock file,
the resolved config copy, a content-hash manifest and the registry rows.
"""
import datetime
import hashlib
import logging
import os
from pathlib import Path
from typing import List, Optional

import pandas as pd
from sqlalchemy.exc import SQLAlchemyError

import database
from core.errors import ConfigError
from models.runs import PipelineRun, RunArtifact

logger = logging.getLogger(__name__)

LOCK_NAME = ".geomort.lock"
RESOLVED_CONFIG = "config.resolved.txt"


def sha256_file(path, chunk: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(chunk), b""):
            h.update(block)
    return h.hexdigest()


def read_manifest(path) -> pd.DataFrame:
    return pd.read_csv(path, dtype={"path": str, "sha256": str})


class RunContext:
    """
    with RunContext("train", out_dir, config_text) as run:
        run.record(run.path("model.ckpt"))
    """

    def __init__(self, command: str, output_dir, config_text: str = "", registry: bool = True):
        self.command = command
        self.output_dir = Path(output_dir)
        self.config_text = config_text
        self.registry = registry
        self.artifacts: List[Path] = []
        self._lock: Optional[Path] = None
        self._run_id: Optional[int] = None

    # ------------------------------------------
    def __enter__(self) -> "RunContext":
        self.output_dir.mkdir(parents=True, exist_ok=True)
        lock = self.output_dir / LOCK_NAME
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"output directory {self.output_dir} is locked by another run ({lock})")
        with os.fdopen(fd, "w") as f:
            f.write(f"{os.getpid()}\n")
        self._lock = lock
        if self.registry:
            self._register_start()
        return self

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                self.finish()
            elif self.registry:
                self._register_end("failed", [])
        finally:
            if self._lock is not None:
                self._lock.unlink(missing_ok=True)
                self._lock = None
        return False

    # ------------------------------------------
    def path(self, name: str) -> Path:
        p = self.output_dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def record(self, *paths) -> None:
        for p in paths:
            self.artifacts.append(Path(p))

    def finish(self) -> Path:
        resolved = self.output_dir / RESOLVED_CONFIG
        resolved.write_text(self.config_text, encoding="utf-8")
        files = sorted({p.resolve() for p in self.artifacts + [resolved]})
        rows = []
        for p in files:
            rel = p.relative_to(self.output_dir.resolve()).as_posix() if p.is_relative_to(self.output_dir.resolve()) else str(p)
            rows.append({"path": rel, "sha256": sha256_file(p), "bytes": p.stat().st_size})
        manifest = self.output_dir / f"manifest_{self.command}.csv"
        pd.DataFrame(rows, columns=["path", "sha256", "bytes"]).sort_values("path").to_csv(manifest, index=False)
        logger.info("%s: wrote %d artifacts, manifest %s", self.command, len(rows), manifest)
        if self.registry:
            self._register_end("ok", rows)
        return manifest

    # ------------------------------------------
    def _register_start(self):
        try:
            database.init_db()
            db = database.SessionLocal()
            try:
                run = PipelineRun(command=self.command, output_dir=str(self.output_dir.resolve()),
                                  config_text=self.config_text, status="running")
                db.add(run)
                db.commit()
                self._run_id = run.id
            finally:
                db.close()
        except SQLAlchemyError as e:
            logger.warning("run registry unavailable: %s", e)
            self.registry = False

    def _register_end(self, status: str, rows):
        if self._run_id is None:
            return
        try:
            db = database.SessionLocal()
            try:
                run = db.query(PipelineRun).filter(PipelineRun.id == self._run_id).first()
                if run is None:
                    return
                run.status = status
                run.finished_at = datetime.datetime.utcnow()
                for row in rows:
                    db.add(RunArtifact(run_id=run.id, path=row["path"], sha256=row["sha256"], bytes=row["bytes"]))
                db.commit()
            finally:
                db.close()
        except SQLAlchemyError as e:
            logger.warning("could not update run registry: %s", e)
