import threading

import numpy as np
import pytest

from core import geo_tiles
from core.errors import AuthError, CorruptResponseError, RetryableFetchError
from core.fetch_client import TileFetcher, TransportResponse, cache_key, fetch_manifest, fetch_tile
from core.imagery import encode_png
from schemas.geo import GeoPoint


def png_payload(size=400, value=90):
    return encode_png(np.full((size, size, 3), value, dtype=np.uint8))


class FakeTransport:
    """Scripted responses per call; defaults to a valid PNG."""

    def __init__(self, script=None, delay=None):
        self.script = list(script or [])
        self.calls = []
        self.delay = delay
        self._lock = threading.Lock()

    def get(self, url, timeout):
        with self._lock:
            self.calls.append(url)
            step = self.script.pop(0) if self.script else TransportResponse(200, png_payload())
        if self.delay is not None:
            self.delay.wait(timeout=2)
        if isinstance(step, Exception):
            raise step
        return step


@pytest.fixture
def specs():
    return geo_tiles.plan_grid(GeoPoint(lat=41.88, lon=-87.63), "17031", 0).tiles


class TestTileFetcher:
    def test_second_fetch_hits_cache(self, tmp_path, specs):
        transport = FakeTransport()
        fetcher = TileFetcher(tmp_path, transport=transport, backoff_s=0)
        a = fetcher.fetch(specs[0], "KEY")
        b = fetcher.fetch(specs[0], "KEY")
        assert len(transport.calls) == 1
        np.testing.assert_array_equal(a.pixels, b.pixels)
        assert (tmp_path / "17031" / "0" / "0_0.png").exists()
        assert [e.key for e in fetcher.entries()] == [cache_key(specs[0])]

    def test_cache_survives_new_fetcher(self, tmp_path, specs):
        TileFetcher(tmp_path, transport=FakeTransport(), backoff_s=0).fetch(specs[3], "KEY")
        transport = FakeTransport()
        TileFetcher(tmp_path, transport=transport, backoff_s=0).fetch(specs[3], "OTHER-KEY")
        assert transport.calls == []

    def test_cache_key_ignores_api_key(self, specs):
        assert cache_key(specs[0]) != cache_key(specs[1])
        assert len(cache_key(specs[0])) == 64

    def test_concurrent_requests_collapse(self, tmp_path, specs):
        gate = threading.Event()
        transport = FakeTransport(delay=gate)
        fetcher = TileFetcher(tmp_path, transport=transport, backoff_s=0)
        results = []
        threads = [threading.Thread(target=lambda: results.append(fetcher.fetch(specs[5], "KEY"))) for _ in range(8)]
        for t in threads:
            t.start()
        gate.set()
        for t in threads:
            t.join()
        assert len(results) == 8
        assert len(transport.calls) == 1
        assert fetcher.requests_issued == 1

    def test_server_errors_are_retried(self, tmp_path, specs):
        transport = FakeTransport([TransportResponse(503, b""), ConnectionError("reset")])
        fetcher = TileFetcher(tmp_path, transport=transport, retries=3, backoff_s=0)
        tile = fetcher.fetch(specs[0], "KEY")
        assert tile.size == (400, 400)
        assert len(transport.calls) == 3

    def test_retries_exhausted(self, tmp_path, specs):
        transport = FakeTransport([TransportResponse(500, b"")] * 3)
        fetcher = TileFetcher(tmp_path, transport=transport, retries=3, backoff_s=0)
        with pytest.raises(RetryableFetchError) as exc:
            fetcher.fetch(specs[0], "KEY")
        assert exc.value.attempts == 3

    @pytest.mark.parametrize("status", [401, 403, 429])
    def test_auth_errors_are_not_retried(self, tmp_path, specs, status):
        transport = FakeTransport([TransportResponse(status, b"denied")])
        fetcher = TileFetcher(tmp_path, transport=transport, backoff_s=0)
        with pytest.raises(AuthError):
            fetcher.fetch(specs[0], "KEY")
        assert len(transport.calls) == 1

    def test_corrupt_payload_never_cached(self, tmp_path, specs):
        transport = FakeTransport([TransportResponse(200, b"<html>quota</html>")])
        fetcher = TileFetcher(tmp_path, transport=transport, backoff_s=0)
        with pytest.raises(CorruptResponseError):
            fetcher.fetch(specs[0], "KEY")
        assert not fetcher.cache_path(specs[0]).exists()
        assert fetcher.entries() == []

    def test_wrong_size_is_corrupt(self, tmp_path, specs):
        transport = FakeTransport([TransportResponse(200, png_payload(size=256))])
        with pytest.raises(CorruptResponseError):
            TileFetcher(tmp_path, transport=transport, backoff_s=0).fetch(specs[0], "KEY")


def test_fetch_manifest_reports_every_tile(tmp_path, specs):
    script = [TransportResponse(404, b"")]
    fetcher = TileFetcher(tmp_path, transport=FakeTransport(script), backoff_s=0)
    report = fetch_manifest(specs[:6], "KEY", tmp_path, workers=1, fetcher=fetcher)
    assert len(report) == 6
    assert (report["status"] == "ok").sum() == 5
    assert report["status"].iloc[0].startswith("error:")
    assert report["path"].iloc[1] == "17031/0/0_1.png"


class TestFetchTile:
    def test_shares_one_fetcher_per_cache(self, tmp_path, specs):
        transport = FakeTransport()
        a = fetch_tile(specs[10], "KEY", tmp_path, transport=transport)
        b = fetch_tile(specs[10], "KEY", tmp_path, transport=transport)
        assert a.provenance == ("17031", 0, 1, 3)
        assert a.size == (400, 400)
        np.testing.assert_array_equal(a.pixels, b.pixels)
        assert len(transport.calls) == 1
