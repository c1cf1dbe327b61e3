"""
Image-model commands: train the convolutional regressor, evaluate it on
held-out counties, export penultimate-layer embeddings.
"""
import json

import click
import numpy as np
import pandas as pd

from commands import config_of, info, load_model, load_records, load_splits, load_tileset, ok, open_run, warn
from core.cohort import TEST, records_frame
from core.convnet import save_checkpoint
from core.errors import TrainingDivergedError
from core.figures import scatter_svg, write_svg
from core.image_model import embed as embed_tiles
from core.image_model import evaluate, export_embeddings, predictions_frame, train as train_model
from core.metrics import pearson_r

tile_options = [
    click.option("--manifest", "manifest_path", type=click.Path(exists=True, dir_okay=False),
                 help="Tile manifest; defaults to tiles.csv in the output dir."),
    click.option("--tile-dir", type=click.Path(exists=True, file_okay=False),
                 help="PNG tree {fips}/{school}/{row}_{col}.png; defaults to tile_dir, out/tiles, then the cache."),
]


def with_tile_options(f):
    for option in reversed(tile_options):
        f = option(f)
    return f


# ==========================================
#   TRAIN
# ==========================================

@click.command("train")
@with_tile_options
@click.option("--splits", "splits_path", type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def train(ctx, manifest_path, tile_dir, splits_path):
    """Fit the Poisson-loss image regressor on training tiles, keep the best validation epoch."""
    cfg = config_of(ctx)
    records = load_records(cfg)
    splits = load_splits(cfg, splits_path)
    tiles = load_tileset(cfg, manifest_path, tile_dir).subset(splits.labels)
    rates = {r.fips: r.crude_rate for r in records}
    tc = cfg.train_config()
    info(f"training on {len(tiles)} tiles: lr {tc.learning_rate}, {tc.epochs} epochs, batch {tc.batch_size}")

    with open_run(ctx, "train") as run:
        try:
            model, log = train_model(tiles, rates, splits, tc)
        except TrainingDivergedError as e:
            # keep what there is for inspection, then fail the run
            if e.model is not None:
                save_checkpoint(e.model, run.path("model.last_finite.ckpt"))
            if e.log is not None:
                e.log.write_csv(run.path("training_log.csv"))
            raise
        ckpt = run.path("model.ckpt")
        save_checkpoint(model, ckpt)
        log_path = run.path("training_log.csv")
        log.write_csv(log_path)
        run.record(ckpt, log_path)

    for epoch, train_loss, val_loss in log.rows:
        info(f"epoch {epoch}: train {train_loss:.5f}  validation {val_loss:.5f}")
    ok(f"best epoch {log.best_epoch}, {model.n_parameters()} parameters -> {ckpt}")


# ==========================================
#   EVAL
# ==========================================

@click.command("eval")
@with_tile_options
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--splits", "splits_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--subset", type=click.Choice(["test", "all"]), default="test", show_default=True,
              help="Counties the reported Pearson r is computed over.")
@click.pass_context
def eval_(ctx, manifest_path, tile_dir, model_path, splits_path, subset):
    """Per-county predictions (mean of image rates), Pearson r and the scatter figure."""
    cfg = config_of(ctx)
    model = load_model(cfg, model_path)
    records = load_records(cfg)
    splits = load_splits(cfg, splits_path)
    tiles = load_tileset(cfg, manifest_path, tile_dir).subset(splits.labels)
    rates = {r.fips: r.crude_rate for r in records}

    predictions, r_all = evaluate(model, tiles, rates)
    groups = tiles.by_county()
    image_rows = []
    for p in predictions:
        for i, lam in zip(groups[p.fips], p.image_rates):
            fips, school, row, col = tiles.provenance[i]
            image_rows.append({"fips": fips, "school": school, "row": row, "col": col, "predicted_rate": lam})

    counties = predictions_frame(predictions)
    counties["split"] = counties["fips"].map(splits.labels)
    reported = counties if subset == "all" else counties[counties["split"] == TEST]
    r = r_all if subset == "all" else pearson_r(reported["predicted_rate"], reported["true_rate"])

    meta = records_frame(records)
    points = pd.DataFrame({
        "fips": reported["fips"].to_numpy(),
        "predicted": reported["predicted_rate"].to_numpy(),
        "true": reported["true_rate"].to_numpy(),
        "population": meta.loc[reported["fips"], "population"].to_numpy(),
        "region": meta.loc[reported["fips"], "region"].to_numpy(),
    })
    report = {
        "subset": subset,
        "pearson_r": r,
        "n_counties": int(len(reported)),
        "n_images": int(reported["n_images"].sum()),
        "mean_abs_error": float(np.mean(np.abs(reported["predicted_rate"] - reported["true_rate"]))),
        "pearson_r_all": r_all,
    }

    with open_run(ctx, "eval") as run:
        pred_path = run.path("predictions.csv")
        counties.to_csv(pred_path, index=False, float_format="%.10g")
        img_path = run.path("image_predictions.csv")
        pd.DataFrame(image_rows).to_csv(img_path, index=False, float_format="%.10g")
        rates_path = run.path("predicted_rates.csv")
        counties[["fips", "predicted_rate"]].rename(columns={"predicted_rate": "value"}).to_csv(
            rates_path, index=False, float_format="%.10g")
        report_path = run.path("eval_report.json")
        report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        svg_path = write_svg(scatter_svg(points, title=f"Image model, {subset} counties", r=r), run.path("scatter.svg"))
        run.record(pred_path, img_path, rates_path, report_path, svg_path)

    if len(reported) < 10:
        warn(f"Pearson r over only {len(reported)} counties")
    ok(f"Pearson r = {r:.4f} over {len(reported)} {subset} counties -> {report_path}")


# ==========================================
#   EMBED
# ==========================================

@click.command("embed")
@with_tile_options
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def embed(ctx, manifest_path, tile_dir, model_path):
    """Penultimate-layer embedding of every tile in the manifest."""
    cfg = config_of(ctx)
    model = load_model(cfg, model_path)
    tiles = load_tileset(cfg, manifest_path, tile_dir)
    matrix = embed_tiles(model, tiles)

    with open_run(ctx, "embed") as run:
        path = run.path("embeddings.csv")
        export_embeddings(matrix, path)
        run.record(path)
    ok(f"{len(matrix.keys)} embeddings of dimension {matrix.dim} -> {path}")
