from sqlalchemy import create_engine
from sqlalchemy.orm import declarative_base, sessionmaker
import os

# Run registry. Local SQLite by default, any SQLAlchemy URL via env.
SQLALCHEMY_DATABASE_URL = os.getenv("GEOMORT_DATABASE_URL", "sqlite:///./geomort.db")

# Some hosts hand out 'postgres://', SQLAlchemy wants 'postgresql://'
if SQLALCHEMY_DATABASE_URL.startswith("postgres://"):
    SQLALCHEMY_DATABASE_URL = SQLALCHEMY_DATABASE_URL.replace("postgres://", "postgresql://", 1)

Base = declarative_base()


def make_engine(url: str):
    """Engine for a registry or cache-index URL (SQLite gets cross-thread access)."""
    if "sqlite" in url:
        return create_engine(url, connect_args={"check_same_thread": False, "timeout": 30})
    return create_engine(url)


engine = make_engine(SQLALCHEMY_DATABASE_URL)

SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)


def init_db(bind=None):
    # models must be imported so their tables are attached to Base.metadata
    from models import runs, tiles  # noqa: F401
    Base.metadata.create_all(bind=bind or engine)

