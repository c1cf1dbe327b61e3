"""
Static Maps tile retriever with a deterministic disk cache.

Layout: {cache_dir}/{fips}/{school}/{row}_{col}.png plus an index table
(tile_cache) in {cache_dir}/index.db. The cache key is the SHA-256 of the
request URL without the API key, so keys never depend on credentials.
Transport is injected; tests run offline.
"""
import hashlib
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Optional, Protocol

import pandas as pd
import requests
from sqlalchemy.orm import sessionmaker

from core.errors import AuthError, FetchError, RetryableFetchError
from core.geo_tiles import static_map_base_url, static_map_url
from core.imagery import ImageTile, decode_png, tile_relpath
from database import Base, make_engine
from models.tiles import TileCacheEntry
from schemas.geo import TileSpec

logger = logging.getLogger(__name__)

AUTH_STATUSES = {401, 403, 429}


@dataclass
class TransportResponse:
    status: int
    content: bytes


class Transport(Protocol):
    def get(self, url: str, timeout: float) -> TransportResponse: ...


class RequestsTransport:
    def __init__(self):
        self.session = requests.Session()

    def get(self, url: str, timeout: float) -> TransportResponse:
        try:
            r = self.session.get(url, timeout=timeout)
        except requests.RequestException as e:
            raise ConnectionError(str(e)) from e
        return TransportResponse(status=r.status_code, content=r.content)


def cache_key(spec: TileSpec) -> str:
    return hashlib.sha256(static_map_base_url(spec).encode("utf-8")).hexdigest()


class TileFetcher:
    """Single-flight fetcher: concurrent requests for one key collapse to one network call."""

    def __init__(self, cache_dir, transport: Optional[Transport] = None, retries: int = 3,
                 backoff_s: float = 0.5, timeout_s: float = 30.0):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.transport = transport or RequestsTransport()
        self.retries = max(1, retries)
        self.backoff_s = backoff_s
        self.timeout_s = timeout_s
        self.requests_issued = 0

        self._guard = threading.Lock()
        self._locks: Dict[str, threading.Lock] = {}

        self._engine = make_engine(f"sqlite:///{(self.cache_dir / 'index.db').resolve()}")
        Base.metadata.create_all(bind=self._engine, tables=[TileCacheEntry.__table__])
        self._session = sessionmaker(bind=self._engine, autocommit=False, autoflush=False)

    def _lock_for(self, key: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())

    def cache_path(self, spec: TileSpec) -> Path:
        return self.cache_dir / tile_relpath(spec.provenance)

    def fetch(self, spec: TileSpec, api_key: str) -> ImageTile:
        url = static_map_url(spec, api_key)
        key = cache_key(spec)
        expected = (spec.width_px, spec.height_px)

        with self._lock_for(key):
            path = self.cache_path(spec)
            if path.exists():
                return decode_png(path.read_bytes(), spec.provenance, expected)

            payload = self._download(url, spec)
            # decode before storing: a corrupt payload never reaches the cache
            tile = decode_png(payload, spec.provenance, expected)
            self._store(key, path, payload)
            return tile

    def _download(self, url: str, spec: TileSpec) -> bytes:
        last_error = "no attempt made"
        for attempt in range(1, self.retries + 1):
            with self._guard:
                self.requests_issued += 1
            try:
                resp = self.transport.get(url, self.timeout_s)
            except (ConnectionError, TimeoutError, OSError) as e:
                last_error = f"network failure for {spec.provenance}: {e}"
                logger.warning("%s (attempt %d/%d)", last_error, attempt, self.retries)
            else:
                if resp.status in AUTH_STATUSES:
                    raise AuthError(f"Static Maps refused the request for {spec.provenance} (HTTP {resp.status})")
                if resp.status == 200:
                    return resp.content
                if resp.status < 500:
                    raise FetchError(f"Static Maps returned HTTP {resp.status} for {spec.provenance}")
                last_error = f"HTTP {resp.status} for {spec.provenance}"
                logger.warning("%s (attempt %d/%d)", last_error, attempt, self.retries)
            if attempt < self.retries and self.backoff_s > 0:
                time.sleep(self.backoff_s * attempt)
        raise RetryableFetchError(last_error, attempts=self.retries)

    def _store(self, key: str, path: Path, payload: bytes):
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(f".{threading.get_ident()}.tmp")
        tmp.write_bytes(payload)
        os.replace(tmp, path)

        db = self._session()
        try:
            entry = db.query(TileCacheEntry).filter(TileCacheEntry.key == key).first()
            if entry is None:
                entry = TileCacheEntry(key=key)
                db.add(entry)
            entry.path = path.relative_to(self.cache_dir).as_posix()
            entry.bytes = len(payload)
            db.commit()
        except Exception:
            db.rollback()
            raise
        finally:
            db.close()

    def entries(self):
        db = self._session()
        try:
            return db.query(TileCacheEntry).order_by(TileCacheEntry.path).all()
        finally:
            db.close()


_fetchers: Dict[tuple, TileFetcher] = {}
_fetchers_guard = threading.Lock()


def _shared_fetcher(cache_dir, transport) -> TileFetcher:
    key = (str(Path(cache_dir).resolve()), id(transport))
    with _fetchers_guard:
        if key not in _fetchers:
            _fetchers[key] = TileFetcher(cache_dir, transport=transport)
        return _fetchers[key]


def fetch_tile(spec: TileSpec, key: str, cache_dir, transport: Optional[Transport] = None) -> ImageTile:
    return _shared_fetcher(cache_dir, transport).fetch(spec, key)


def fetch_manifest(specs: Iterable[TileSpec], key: str, cache_dir, workers: int = 8,
                   transport: Optional[Transport] = None, fetcher: Optional[TileFetcher] = None) -> pd.DataFrame:
    """Fetch every planned tile; one report row per tile (status ok / error message)."""
    fetcher = fetcher or TileFetcher(cache_dir, transport=transport)
    specs = list(specs)

    def one(spec: TileSpec):
        try:
            fetcher.fetch(spec, key)
            return "ok"
        except AuthError:
            raise
        except FetchError as e:
            return f"error: {e}"

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        statuses = list(pool.map(one, specs))

    report = pd.DataFrame({
        "county_fips": [s.county_fips for s in specs],
        "school_index": [s.school_index for s in specs],
        "grid_row": [s.grid_row for s in specs],
        "grid_col": [s.grid_col for s in specs],
        "path": [tile_relpath(s.provenance).as_posix() for s in specs],
        "status": statuses,
    })
    logger.info("fetched %d tiles, %d network requests", len(specs), fetcher.requests_issued)
    return report
