from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing import List


class GeoPoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    lat: float = Field(..., ge=-90.0, le=90.0)
    lon: float = Field(..., ge=-180.0, lt=180.0)


class TileSpec(BaseModel):
    """One planned satellite image around a school."""
    model_config = ConfigDict(frozen=True)

    center: GeoPoint
    zoom: int = Field(default=17, ge=0)
    width_px: int = Field(default=400, gt=0)
    height_px: int = Field(default=400, gt=0)
    county_fips: str
    school_index: int = Field(..., ge=0, le=3)
    grid_row: int = Field(..., ge=0, le=6)
    grid_col: int = Field(..., ge=0, le=6)

    @property
    def provenance(self):
        return (self.county_fips, self.school_index, self.grid_row, self.grid_col)


class GridPlan(BaseModel):
    model_config = ConfigDict(frozen=True)

    tiles: List[TileSpec]
    spacing_m: float = Field(..., gt=0)

    @model_validator(mode="after")
    def check_lattice(self):
        if len(self.tiles) != 49:
            raise ValueError(f"a grid plan holds 49 tiles, got {len(self.tiles)}")
        cells = {(t.county_fips, t.school_index, t.grid_row, t.grid_col) for t in self.tiles}
        if len(cells) != len(self.tiles):
            raise ValueError("duplicate (grid_row, grid_col) in grid plan")
        return self
