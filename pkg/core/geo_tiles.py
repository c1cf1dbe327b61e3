"""
Web Mercator geometry and the school-centred 7x7 sampling grid.

Conversions follow the spherical Google/TMS profile:

    LatLon  <->  Meters (EPSG:3857)  <->  world Pixels at zoom z

The world at zoom z is a square of 256 * 2**z pixels, origin top-left.
"""
import logging
import math
from typing import Iterable, List, Tuple

import numpy as np
import pandas as pd

from core.errors import ConfigError, DataValidationError, DomainError
from schemas.geo import GeoPoint, GridPlan, TileSpec

logger = logging.getLogger(__name__)

EARTH_RADIUS_M = 6378137.0
ORIGIN_SHIFT_M = math.pi * EARTH_RADIUS_M  # 20037508.342789244
MAX_MERCATOR_LAT = 85.05113
TILE_SIZE = 256
MILE_M = 1609.344

GRID_SIDE = 7
DEFAULT_ZOOM = 17
DEFAULT_SIZE_PX = 400
SCHOOLS_PER_COUNTY = 4

STATIC_MAPS_ENDPOINT = "https://maps.googleapis.com/maps/api/staticmap"

MANIFEST_COLUMNS = ["county_fips", "school_index", "grid_row", "grid_col", "lat", "lon", "zoom", "width", "height"]


def _check_mercator_lat(lat: float):
    if not (-MAX_MERCATOR_LAT < lat < MAX_MERCATOR_LAT):
        raise DomainError(f"latitude {lat} outside Web Mercator bounds (+/-{MAX_MERCATOR_LAT})")


def world_size_px(zoom: int) -> int:
    return TILE_SIZE << zoom


# ==========================================
#   PROJECTION
# ==========================================

def latlon_to_world_pixel(p: GeoPoint, zoom: int) -> Tuple[float, float]:
    _check_mercator_lat(p.lat)
    size = world_size_px(zoom)
    x = size * (p.lon + 180.0) / 360.0
    sin_lat = math.sin(math.radians(p.lat))
    y = size * (0.5 - math.log((1.0 + sin_lat) / (1.0 - sin_lat)) / (4.0 * math.pi))
    return x, y


def world_pixel_to_latlon(x: float, y: float, zoom: int) -> GeoPoint:
    size = world_size_px(zoom)
    lon = 360.0 * x / size - 180.0
    lat = math.degrees(math.atan(math.sinh(math.pi * (1.0 - 2.0 * y / size))))
    return GeoPoint(lat=lat, lon=_wrap_lon(lon))


def latlon_to_meters(p: GeoPoint) -> Tuple[float, float]:
    _check_mercator_lat(p.lat)
    mx = p.lon * ORIGIN_SHIFT_M / 180.0
    my = math.log(math.tan((90.0 + p.lat) * math.pi / 360.0)) * EARTH_RADIUS_M
    return mx, my


def meters_to_latlon(mx: float, my: float) -> GeoPoint:
    lon = mx / ORIGIN_SHIFT_M * 180.0
    lat = math.degrees(2.0 * math.atan(math.exp(my / EARTH_RADIUS_M)) - math.pi / 2.0)
    _check_mercator_lat(lat)
    return GeoPoint(lat=lat, lon=_wrap_lon(lon))


def _wrap_lon(lon: float) -> float:
    if -180.0 <= lon < 180.0:
        return lon
    return (lon + 180.0) % 360.0 - 180.0


def ground_resolution(lat: float, zoom: int) -> float:
    """Meters per pixel at latitude `lat` (degrees) and `zoom`."""
    _check_mercator_lat(lat)
    return 2.0 * math.pi * EARTH_RADIUS_M * math.cos(math.radians(lat)) / world_size_px(zoom)


def tile_footprint_m(lat: float, zoom: int = DEFAULT_ZOOM, width_px: int = DEFAULT_SIZE_PX) -> float:
    return width_px * ground_resolution(lat, zoom)


def haversine_m(a: GeoPoint, b: GeoPoint, radius_m: float = EARTH_RADIUS_M) -> float:
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dphi = phi2 - phi1
    dlam = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2
    return 2.0 * radius_m * math.asin(min(1.0, math.sqrt(h)))


# ==========================================
#   GRID PLANNING
# ==========================================

def plan_grid(school: GeoPoint, county_fips: str, school_index: int,
              zoom: int = DEFAULT_ZOOM, width_px: int = DEFAULT_SIZE_PX,
              height_px: int = DEFAULT_SIZE_PX) -> GridPlan:
    """
    7x7 lattice centred on the school, one mile wide, axis-aligned in
    projected meters. Row 0 is the northern edge, column 0 the western.
    """
    spacing_m = MILE_M / GRID_SIDE
    mx0, my0 = latlon_to_meters(school)
    # projected meters per ground meter at the school's latitude
    step = spacing_m / math.cos(math.radians(school.lat))
    half = GRID_SIDE // 2

    tiles = []
    for row in range(GRID_SIDE):
        for col in range(GRID_SIDE):
            center = meters_to_latlon(mx0 + (col - half) * step, my0 - (row - half) * step)
            tiles.append(TileSpec(
                center=center, zoom=zoom, width_px=width_px, height_px=height_px,
                county_fips=county_fips, school_index=school_index,
                grid_row=row, grid_col=col,
            ))
    return GridPlan(tiles=tiles, spacing_m=spacing_m)


def choose_schools(schools: pd.DataFrame, seed: int, per_county: int = SCHOOLS_PER_COUNTY) -> pd.DataFrame:
    """
    Draw up to `per_county` schools per county at random (seeded).
    Input columns: fips, name, lat, lon. Output adds school_index.
    """
    missing = {"fips", "name", "lat", "lon"} - set(schools.columns)
    if missing:
        raise DataValidationError(f"school table is missing columns: {sorted(missing)}")

    rng = np.random.default_rng(seed)
    picked = []
    table = schools.assign(fips=schools["fips"].astype(str)).sort_values(["fips", "name", "lat", "lon"], kind="mergesort")
    for fips, group in table.groupby("fips", sort=True):
        n = len(group)
        if n < per_county:
            logger.warning("county %s has only %d schools; keeping all", fips, n)
        order = rng.choice(n, size=min(per_county, n), replace=False)
        chosen = group.iloc[order].copy()
        chosen["school_index"] = range(len(chosen))
        picked.append(chosen)

    if not picked:
        return pd.DataFrame(columns=["fips", "school_index", "name", "lat", "lon"])
    out = pd.concat(picked, ignore_index=True)
    return out[["fips", "school_index", "name", "lat", "lon"]]


def plan_county_grids(schools: pd.DataFrame, zoom: int = DEFAULT_ZOOM,
                      width_px: int = DEFAULT_SIZE_PX, height_px: int = DEFAULT_SIZE_PX) -> List[GridPlan]:
    """One GridPlan per selected school row (fips, school_index, lat, lon)."""
    plans = []
    for row in schools.itertuples(index=False):
        school = GeoPoint(lat=float(row.lat), lon=float(row.lon))
        plans.append(plan_grid(school, str(row.fips), int(row.school_index), zoom, width_px, height_px))
    return plans


def grid_manifest(plans: Iterable[GridPlan]) -> pd.DataFrame:
    rows = []
    for plan in plans:
        for t in plan.tiles:
            rows.append((t.county_fips, t.school_index, t.grid_row, t.grid_col,
                         t.center.lat, t.center.lon, t.zoom, t.width_px, t.height_px))
    return pd.DataFrame(rows, columns=MANIFEST_COLUMNS)


def read_grid_manifest(path) -> List[TileSpec]:
    df = pd.read_csv(path, dtype={"county_fips": str}, float_precision="round_trip")
    missing = set(MANIFEST_COLUMNS) - set(df.columns)
    if missing:
        raise DataValidationError(f"tile manifest {path} is missing columns: {sorted(missing)}")
    specs, errors = [], []
    for idx, row in df.iterrows():
        try:
            specs.append(TileSpec(
                center=GeoPoint(lat=row["lat"], lon=row["lon"]),
                zoom=int(row["zoom"]), width_px=int(row["width"]), height_px=int(row["height"]),
                county_fips=row["county_fips"], school_index=int(row["school_index"]),
                grid_row=int(row["grid_row"]), grid_col=int(row["grid_col"]),
            ))
        except (ValueError, TypeError) as e:
            errors.append({"row": idx + 2, "error": str(e).splitlines()[0]})
    if errors:
        raise DataValidationError(f"tile manifest {path} has {len(errors)} invalid rows", errors)
    return specs


# ==========================================
#   STATIC MAPS CONTRACT
# ==========================================

def static_map_base_url(spec: TileSpec) -> str:
    return (f"{STATIC_MAPS_ENDPOINT}?center={spec.center.lat:.6f},{spec.center.lon:.6f}"
            f"&zoom={spec.zoom}&size={spec.width_px}x{spec.height_px}&maptype=satellite")


def static_map_url(spec: TileSpec, api_key: str) -> str:
    if not api_key:
        raise ConfigError("Static Maps API key is empty (set GEOMORT_MAPS_KEY)")
    return f"{static_map_base_url(spec)}&key={api_key}"
