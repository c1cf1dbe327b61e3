from sqlalchemy import Column, Integer, String, DateTime
from database import Base
import datetime


# Index of the on-disk tile cache: one row per stored payload
class TileCacheEntry(Base):
    __tablename__ = "tile_cache"

    id = Column(Integer, primary_key=True, index=True)
    key = Column(String(64), unique=True, index=True, nullable=False)  # sha256 of the keyless URL
    path = Column(String(255), nullable=False)                          # relative to cache_dir
    fetched_at = Column(DateTime, default=datetime.datetime.utcnow)
    bytes = Column(Integer, default=0)
