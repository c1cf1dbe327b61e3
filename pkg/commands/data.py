"""
Data commands: county ingestion, grid planning, tile fetching, the
synthetic corpus and the cohort split.
"""
import json
import os

import click
import pandas as pd

from commands import config_of, info, ok, open_run, resolve_input, warn
from core import cohort, geo_tiles
from core.errors import ConfigError
from core.fetch_client import fetch_manifest
from core.synthgen import SynthParams, corpus_hash, corpus_report, generate_corpus, write_corpus

MAPS_KEY_ENV = "GEOMORT_MAPS_KEY"


# ==========================================
#   INGEST
# ==========================================

@click.command("ingest")
@click.option("--counties", "counties_path", type=click.Path(exists=True, dir_okay=False),
              help="County table (.csv / .xlsx / .xls); defaults to county_csv from the config.")
@click.pass_context
def ingest(ctx, counties_path):
    """Validate the county table, impute missing covariates, write a clean copy."""
    cfg = config_of(ctx)
    source = counties_path or cfg.county_csv
    if source is None:
        raise ConfigError("ingest needs --counties or county_csv in the config")

    records = cohort.read_counties(source)
    cleaned, report = cohort.impute_missing(records)
    with open_run(ctx, "ingest") as run:
        out = run.path("counties_clean.csv")
        cohort.write_counties(cleaned, out)
        imputation = run.path("imputation.csv")
        pd.DataFrame(sorted(report.items()), columns=["field", "n_imputed"]).to_csv(imputation, index=False)
        run.record(out, imputation)

    for field, n in sorted(report.items()):
        if n:
            warn(f"imputed {n} missing '{field}' values with the median")
    ok(f"{len(cleaned)} counties valid -> {out}")


# ==========================================
#   PLAN GRID
# ==========================================

@click.command("plan-grid")
@click.option("--schools", "schools_path", type=click.Path(exists=True, dir_okay=False),
              help="School table fips,name,lat,lon; defaults to school_csv from the config.")
@click.option("--splits", "splits_path", type=click.Path(exists=True, dir_okay=False),
              help="Restrict to counties present in this split file.")
@click.pass_context
def plan_grid(ctx, schools_path, splits_path):
    """Pick four schools per county and emit the 7x7 tile manifest around each."""
    cfg = config_of(ctx)
    source = schools_path or cfg.school_csv
    if source is None:
        raise ConfigError("plan-grid needs --schools or school_csv in the config")

    schools = pd.read_csv(source, dtype={"fips": str}, float_precision="round_trip")
    if splits_path:
        keep = cohort.read_splits(splits_path).labels
        schools = schools[schools["fips"].isin(keep)]
    selected = geo_tiles.choose_schools(schools, seed=cfg.seed)
    plans = geo_tiles.plan_county_grids(selected, zoom=cfg.zoom, width_px=cfg.tile_size, height_px=cfg.tile_size)
    manifest = geo_tiles.grid_manifest(plans)

    with open_run(ctx, "plan-grid") as run:
        sel_path = run.path("schools_selected.csv")
        selected.to_csv(sel_path, index=False)
        tiles_path = run.path("tiles.csv")
        manifest.to_csv(tiles_path, index=False, float_format="%.8f")
        run.record(sel_path, tiles_path)

    n_counties = selected["fips"].nunique()
    ok(f"{len(manifest)} tiles planned for {n_counties} counties ({len(selected)} schools) -> {tiles_path}")


# ==========================================
#   FETCH
# ==========================================

@click.command("fetch")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, dir_okay=False),
              help="Tile manifest from plan-grid; defaults to tiles.csv in the output dir.")
@click.pass_context
def fetch(ctx, manifest_path):
    """Download every planned tile into the cache (needs GEOMORT_MAPS_KEY)."""
    cfg = config_of(ctx)
    key = os.environ.get(MAPS_KEY_ENV, "")
    if not key:
        raise ConfigError(f"set {MAPS_KEY_ENV} to fetch Static Maps tiles")
    source = resolve_input(manifest_path, None, cfg.output_dir, "tiles.csv")
    specs = geo_tiles.read_grid_manifest(source)
    info(f"fetching {len(specs)} tiles into {cfg.cache_dir} with {cfg.workers} workers")

    report = fetch_manifest(specs, key, cfg.cache_dir, workers=cfg.workers)
    with open_run(ctx, "fetch") as run:
        path = run.path("fetch_report.csv")
        report.to_csv(path, index=False)
        run.record(path)

    failed = int((report["status"] != "ok").sum())
    if failed:
        warn(f"{failed} tiles failed; see {path}")
    ok(f"{len(report) - failed} tiles cached under {cfg.cache_dir}")


# ==========================================
#   SYNTH
# ==========================================

@click.command("synth")
@click.option("--null", "null_corpus", is_flag=True, default=None,
              help="Switch every planted effect off (no-signal corpus).")
@click.pass_context
def synth(ctx, null_corpus):
    """Generate the synthetic corpus in the layout the real pipeline ingests."""
    cfg = config_of(ctx)
    params = SynthParams(n_counties=cfg.synth_counties, seed=cfg.seed, zoom=cfg.zoom)
    if null_corpus or (null_corpus is None and cfg.synth_null):
        params = params.null()

    corpus = generate_corpus(params)
    with open_run(ctx, "synth") as run:
        run.record(*write_corpus(corpus, cfg.output_dir))

    report = corpus_report(corpus)
    info(json.dumps({k: report[k] for k in ("n_counties", "n_tiles", "rate_min", "rate_max")}))
    ok(f"synthetic corpus {corpus_hash(corpus)[:12]} written to {cfg.output_dir}")


# ==========================================
#   SPLIT
# ==========================================

@click.command("split")
@click.option("--counties", "counties_path", type=click.Path(exists=True, dir_okay=False),
              help="County table; defaults to county_csv, then counties.csv in the output dir.")
@click.pass_context
def split(ctx, counties_path):
    """13-bin county selection and the 65/15/20 train/validation/test split."""
    cfg = config_of(ctx)
    records = cohort.read_counties(resolve_input(counties_path, cfg.county_csv, cfg.output_dir, "counties.csv"))
    plan = cohort.select_counties(records)
    assignment = cohort.split(plan, seed=cfg.seed)
    imputed, _ = cohort.impute_missing(records)

    with open_run(ctx, "split") as run:
        bins = run.path("bins.csv")
        cohort.bins_frame(plan).to_csv(bins, index=False)
        splits = run.path("splits.csv")
        cohort.write_splits(assignment, splits)
        summary = run.path("split_summary.csv")
        cohort.dataset_summary(imputed, assignment).to_csv(summary, index=False, float_format="%.6g")
        run.record(bins, splits, summary)

    counts = assignment.counts()
    ok(f"{len(plan.selected)} counties: train {counts['train']} / validation {counts['validation']} / test {counts['test']}")
