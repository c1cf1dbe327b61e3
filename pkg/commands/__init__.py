"""
CLI command modules. Each module exposes click commands that main.py
registers on the top-level group; the helpers below are shared by all of them.
"""
from pathlib import Path
from typing import List, Optional

import click
import pandas as pd

from core import cohort
from core.artifacts import RunContext
from core.convnet import ConvRegressor, load_checkpoint
from core.errors import ConfigError
from core.image_model import TileSet, load_tiles
from schemas.cohort import CountyRecord
from schemas.config import RunConfig, to_flat_text


def config_of(ctx: click.Context) -> RunConfig:
    return ctx.obj["config"]


def resolve_input(explicit, configured, out_dir: Path, default_name: Optional[str]) -> Path:
    """Explicit option > config value > standard file name in the output dir."""
    if explicit:
        return Path(explicit)
    if configured:
        return Path(configured)
    return out_dir / default_name


def open_run(ctx: click.Context, command: str) -> RunContext:
    cfg = config_of(ctx)
    # the resolved copy lives in output_dir, recorded there as "."
    text = to_flat_text(cfg.model_copy(update={"output_dir": Path(".")}))
    return RunContext(command, cfg.output_dir, text)


# ==========================================
#   SHARED INPUT LOADERS
# ==========================================

def load_records(cfg: RunConfig, explicit=None) -> List[CountyRecord]:
    """County table with missing covariates imputed; prefers ingest's cleaned copy."""
    if explicit or cfg.county_csv:
        path = resolve_input(explicit, cfg.county_csv, cfg.output_dir, None)
    elif (cfg.output_dir / "counties_clean.csv").exists():
        path = cfg.output_dir / "counties_clean.csv"
    else:
        path = cfg.output_dir / "counties.csv"
    if not path.exists():
        raise ConfigError(f"county table not found: {path} (set county_csv or run ingest / synth)")
    records, _ = cohort.impute_missing(cohort.read_counties(path))
    return records


def load_splits(cfg: RunConfig, explicit=None) -> cohort.SplitAssignment:
    path = resolve_input(explicit, None, cfg.output_dir, "splits.csv")
    if not path.exists():
        raise ConfigError(f"split file not found: {path} (run split first)")
    return cohort.read_splits(path)


def load_tileset(cfg: RunConfig, manifest=None, tile_dir=None) -> TileSet:
    """Tiles listed in the grid manifest, from tile_dir, the synthetic tree or the fetch cache."""
    manifest_path = resolve_input(manifest, None, cfg.output_dir, "tiles.csv")
    if not manifest_path.exists():
        raise ConfigError(f"tile manifest not found: {manifest_path} (run plan-grid or synth)")
    if tile_dir or cfg.tile_dir:
        root = Path(tile_dir or cfg.tile_dir)
    elif (cfg.output_dir / "tiles").is_dir():
        root = cfg.output_dir / "tiles"
    else:
        root = cfg.cache_dir
    df = pd.read_csv(manifest_path, dtype={"county_fips": str})
    return load_tiles(df, root, size=cfg.input_size)


def load_model(cfg: RunConfig, explicit=None) -> ConvRegressor:
    path = resolve_input(explicit, None, cfg.output_dir, "model.ckpt")
    if not path.exists():
        raise ConfigError(f"model checkpoint not found: {path} (run train first)")
    return load_checkpoint(path)


def ok(message: str):
    click.echo(f"✅ {message}")


def info(message: str):
    click.echo(f"ℹ️  {message}")


def warn(message: str):
    click.echo(f"⚠️  {message}", err=True)
