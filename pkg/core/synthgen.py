"""
Procedural "satellite" corpus with planted built-environment features and
a known feature -> mortality law. Used as the end-to-end training oracle
and written in the same layout the real pipeline ingests.

All randomness comes from Philox streams keyed by (seed, county, stream);
rasterisation is integer-only.
"""
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import stats

from core.cohort import write_counties
from core.errors import DomainError
from core.geo_tiles import SCHOOLS_PER_COUNTY, grid_manifest, plan_grid
from core.image_model import TileSet
from core.imagery import encode_png, tile_relpath
from schemas.cohort import CountyRecord
from schemas.geo import GeoPoint

logger = logging.getLogger(__name__)

LATENTS = ["sidewalk", "field", "road"]
FIRST_FIPS = 90001
# continental bounding box for synthetic schools
LAT_RANGE = (30.0, 47.0)
LON_RANGE = (-120.0, -76.0)

SOIL = (118, 106, 92)
GRASS = (62, 138, 54)
ASPHALT = (86, 86, 92)
CONCRETE = (236, 234, 226)

STREAM_COUNTY, STREAM_TILES = 0, 1


class SynthParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_counties: int = Field(default=60, ge=13)
    schools_per_county: int = Field(default=SCHOOLS_PER_COUNTY, ge=1, le=SCHOOLS_PER_COUNTY)
    tile_size: int = Field(default=64, ge=16)
    intercept: float = float(np.log(9.0))
    sidewalk_effect: float = Field(default=-0.6, le=0)
    field_effect: float = Field(default=-0.5, le=0)
    road_effect: float = Field(default=0.5, ge=0)
    noise_sd: float = Field(default=0.0, ge=0)
    population_range: Tuple[int, int] = (50_000, 2_000_000)
    zoom: int = 17
    seed: int = Field(default=0, ge=0)

    @field_validator("population_range")
    @classmethod
    def population_bounds(cls, v):
        lo, hi = v
        if not 0 < lo <= hi:
            raise ValueError("population_range must satisfy 0 < low ≤ high")
        return (int(lo), int(hi))

    def null(self) -> "SynthParams":
        """Same corpus shape with every feature effect (and the noise) switched off."""
        return self.model_copy(update={"sidewalk_effect": 0.0, "field_effect": 0.0,
                                       "road_effect": 0.0, "noise_sd": 0.0})

    def rate(self, sidewalk, field, road, noise=0.0):
        return np.exp(self.intercept + self.sidewalk_effect * np.asarray(sidewalk)
                      + self.field_effect * np.asarray(field) + self.road_effect * np.asarray(road) + noise)


@dataclass
class SynthCorpus:
    params: SynthParams
    counties: List[CountyRecord]
    schools: pd.DataFrame        # fips, school_index, name, lat, lon
    manifest: pd.DataFrame       # grid manifest, MANIFEST_COLUMNS
    tiles: TileSet               # uint8 pixels in manifest order
    truth: pd.DataFrame          # fips, latents, true_rate, population, deaths

    @property
    def rates(self) -> Dict[str, float]:
        return {r.fips: r.crude_rate for r in self.counties}


def county_rng(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, (index << 8) | stream], dtype=np.uint64)))


# ==========================================
#   RASTERISATION
# ==========================================

def bresenham(x0: int, y0: int, x1: int, y1: int):
    """Integer pixels on the segment (x0,y0)-(x1,y1), endpoints included."""
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        yield x0, y0
        if x0 == x1 and y0 == y1:
            return
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def _shade(rng: np.random.Generator, color, spread: int) -> np.ndarray:
    return np.clip(np.array(color) + rng.integers(-spread, spread + 1, size=3), 0, 255).astype(np.uint8)


def render_tile(rng: np.random.Generator, size: int, sidewalk: float, field: float, road: float) -> np.ndarray:
    """One size x size RGB tile; feature counts follow the county intensities plus per-tile jitter."""
    img = np.empty((size, size, 3), dtype=np.int16)
    img[:] = _shade(rng, SOIL, 10)
    img += rng.integers(-6, 7, size=(size, size, 1), dtype=np.int16)

    def jitter(p):
        return float(np.clip(p + rng.uniform(-0.1, 0.1), 0.0, 1.0))

    for _ in range(rng.binomial(6, jitter(field))):
        h, w = rng.integers(size // 8, size // 3, size=2)
        top, left = rng.integers(0, size - h), rng.integers(0, size - w)
        img[top:top + h, left:left + w] = _shade(rng, GRASS, 12)

    for _ in range(rng.binomial(3, jitter(road))):
        at = int(rng.integers(1, size - 2))
        color = _shade(rng, ASPHALT, 6)
        if rng.random() < 0.5:
            img[at - 1:at + 2, :] = color
        else:
            img[:, at - 1:at + 2] = color

    for _ in range(rng.binomial(12, jitter(sidewalk))):
        x0, y0 = (int(v) for v in rng.integers(0, size, size=2))
        length = int(rng.integers(size // 6, size // 2))
        if rng.random() < 0.5:
            x1, y1 = min(size - 1, x0 + length), y0
        else:
            x1, y1 = x0, min(size - 1, y0 + length)
        # slight slant
        y1 = int(np.clip(y1 + rng.integers(-2, 3), 0, size - 1))
        color = _shade(rng, CONCRETE, 8)
        for x, y in bresenham(x0, y0, x1, y1):
            img[y, x] = color

    return np.clip(img, 0, 255).astype(np.uint8)


# ==========================================
#   CORPUS
# ==========================================

def _covariates(rng: np.random.Generator, s: float, f: float, r: float) -> dict:
    white = rng.uniform(0.45, 0.9)
    return {
        "region": int(rng.integers(1, 9)),
        "prop_white": white,
        "prop_black": rng.uniform(0.0, 1.0 - white) * 0.6,
        "prop_asian": rng.uniform(0.0, 0.08),
        "prop_hispanic": float(np.clip(0.05 + 0.25 * r + rng.normal(0, 0.03), 0.0, 1.0)),
        "prop_male": rng.uniform(0.48, 0.51),
        "mean_age": float(38.0 + 6.0 * f - 3.0 * r + rng.normal(0, 1.0)),
        "any_college": float(np.clip(0.35 + 0.3 * s + rng.normal(0, 0.04), 0.05, 0.95)),
        "income": float(max(15_000.0, 42_000 + 30_000 * s + 8_000 * f + rng.normal(0, 3_000))),
    }


def generate_corpus(params: SynthParams) -> SynthCorpus:
    counties, truth, school_rows, pixels, provenance, plans = [], [], [], [], [], []
    lo, hi = params.population_range
    for i in range(params.n_counties):
        fips = f"{FIRST_FIPS + i:05d}"
        rng = county_rng(params.seed, i, STREAM_COUNTY)
        s, f, r = rng.uniform(0.0, 1.0, size=3)
        noise = rng.normal(0.0, params.noise_sd) if params.noise_sd > 0 else 0.0
        rate = float(params.rate(s, f, r, noise))
        if not np.isfinite(rate) or rate <= 0 or rate >= 1000:
            raise DomainError(f"rate law gives {rate} per 1,000 for county {fips}")
        population = int(round(np.exp(rng.uniform(np.log(lo), np.log(hi)))))
        deaths = int(min(population, rng.poisson(population * rate / 1000.0)))
        cov = _covariates(rng, s, f, r)
        counties.append(CountyRecord(fips=fips, name=f"Synthetic County {i + 1}", population=population,
                                     deaths=deaths, **cov))
        truth.append({"fips": fips, "sidewalk": s, "field": f, "road": r, "true_rate": rate,
                      "population": population, "deaths": deaths})

        lat0, lon0 = rng.uniform(*LAT_RANGE), rng.uniform(*LON_RANGE)
        for j in range(params.schools_per_county):
            lat = float(lat0 + rng.uniform(-0.2, 0.2))
            lon = float(lon0 + rng.uniform(-0.2, 0.2))
            school_rows.append({"fips": fips, "school_index": j, "name": f"School {j + 1}", "lat": lat, "lon": lon})
            plans.append(plan_grid(GeoPoint(lat=lat, lon=lon), fips, j, params.zoom,
                                   params.tile_size, params.tile_size))

        tile_rng = county_rng(params.seed, i, STREAM_TILES)
        for plan in plans[-params.schools_per_county:]:
            for spec in plan.tiles:
                pixels.append(render_tile(tile_rng, params.tile_size, s, f, r))
                provenance.append(spec.provenance)

    logger.info("generated %d synthetic counties, %d tiles", len(counties), len(pixels))
    return SynthCorpus(params=params, counties=counties, schools=pd.DataFrame(school_rows),
                       manifest=grid_manifest(plans), tiles=TileSet(pixels=np.stack(pixels), provenance=provenance),
                       truth=pd.DataFrame(truth))


def corpus_report(corpus: SynthCorpus) -> dict:
    """Deterministic summary: rate distribution, latent-rate correlations, Poisson sanity."""
    truth = corpus.truth
    if truth.empty:
        raise DomainError("corpus is empty")
    rate = truth["true_rate"].to_numpy()
    expected = truth["population"].to_numpy() * rate / 1000.0
    within = np.abs(truth["deaths"].to_numpy() - expected) <= 3.0 * np.sqrt(expected)
    p = corpus.params
    report = {
        "n_counties": int(len(truth)),
        "n_tiles": int(len(corpus.tiles)),
        "rate_min": float(rate.min()),
        "rate_max": float(rate.max()),
        "rate_mean": float(rate.mean()),
        "rate_var": float(rate.var()),
        "rate_var_over_mean_sq": float(rate.var() / rate.mean() ** 2),
        "poisson_within_3se": float(within.mean()),
        "effects": {"sidewalk": p.sidewalk_effect, "field": p.field_effect, "road": p.road_effect},
        "spearman": {},
    }
    for latent in LATENTS:
        if np.ptp(rate) == 0:
            report["spearman"][latent] = None
        else:
            report["spearman"][latent] = float(stats.spearmanr(truth[latent], rate).statistic)
    return report


def corpus_hash(corpus: SynthCorpus) -> str:
    """SHA-256 over the county table and the raw tile bytes."""
    h = hashlib.sha256()
    df = pd.DataFrame([c.model_dump() for c in corpus.counties])
    h.update(df.to_csv(index=False, float_format="%.12g").encode("utf-8"))
    for prov, px in zip(corpus.tiles.provenance, corpus.tiles.pixels):
        h.update(repr(prov).encode("utf-8"))
        h.update(np.ascontiguousarray(px, dtype=np.uint8).tobytes())
    return h.hexdigest()


def write_corpus(corpus: SynthCorpus, out_dir) -> List[Path]:
    """counties.csv, schools.csv, tiles.csv, truth.csv, corpus_report.json and tiles/{fips}/{school}/{row}_{col}.png"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    path = out / "counties.csv"
    write_counties(corpus.counties, path)
    written.append(path)
    for name, df in (("schools.csv", corpus.schools), ("tiles.csv", corpus.manifest), ("truth.csv", corpus.truth)):
        path = out / name
        df.to_csv(path, index=False, float_format="%.10g")
        written.append(path)

    tile_root = out / "tiles"
    for prov, px in zip(corpus.tiles.provenance, corpus.tiles.pixels):
        path = tile_root / tile_relpath(prov)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_png(px))
        written.append(path)

    path = out / "corpus_report.json"
    path.write_text(json.dumps(corpus_report(corpus), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(path)
    return written
