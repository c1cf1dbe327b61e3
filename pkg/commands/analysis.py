"""
Interpretation and reporting commands: embedding clusters, SHAP
attributions, learned filters, and the covariate-model tables.
"""
import json

import click
import pandas as pd

from commands import (config_of, info, load_model, load_records, load_splits, load_tileset, ok, open_run,
                      resolve_input, warn)
from core import covariate_model as cm
from core import embeddings as emb
from core import interpret
from core.cohort import TEST, TRAIN, VALIDATION, records_frame
from core.errors import ConfigError
from core.figures import activation_svg, filter_bank_svg, heat_overlay_svg, matrix_frame, scatter_svg, write_svg
from core.image_model import as_float, import_embeddings, mean_pixel_baseline

TTEST_FIELDS = ["rate", "income", "any_college", "mean_age", "prop_hispanic", "population"]


# ==========================================
#   CLUSTER
# ==========================================

@click.command("cluster")
@click.option("--embeddings", "embeddings_path", type=click.Path(exists=True, dir_okay=False),
              help="fips,school,row,col,e0..; defaults to embeddings_csv, then embeddings.csv in the output dir.")
@click.pass_context
def cluster(ctx, embeddings_path):
    """Spectral clustering of tile embeddings, cluster summaries and 2-D coordinates."""
    cfg = config_of(ctx)
    source = resolve_input(embeddings_path, cfg.embeddings_csv, cfg.output_dir, "embeddings.csv")
    if not source.exists():
        raise ConfigError(f"embeddings not found: {source} (run embed or set embeddings_csv)")
    matrix = import_embeddings(source)
    records = load_records(cfg)
    info(f"{len(matrix.keys)} embeddings (d={matrix.dim}), k={cfg.k}, m={cfg.neighbors}, sigma={cfg.sigma}")

    graph = emb.build_affinity(matrix.values, m=cfg.neighbors, sigma=cfg.sigma)
    assignment = emb.spectral_cluster(graph, k=cfg.k, seed=cfg.seed)
    coords = emb.spectral_embed_2d(graph)
    summary = emb.summarize_clusters(assignment, matrix.keys, records)

    with open_run(ctx, "cluster") as run:
        clusters_path = run.path("clusters.csv")
        emb.assignments_frame(assignment, matrix.keys).to_csv(clusters_path, index=False)
        summary_path = run.path("cluster_summary.csv")
        emb.cluster_report(summary).to_csv(summary_path, index=False, float_format="%.6g")
        coords_path = run.path("embedding_2d.csv")
        emb.coordinates_frame(coords, matrix.keys, assignment).to_csv(coords_path, index=False, float_format="%.10g")
        run.record(clusters_path, summary_path, coords_path)

    sizes = ", ".join(str(int(n)) for n in assignment.sizes())
    ok(f"{assignment.k} clusters (sizes {sizes}) -> {clusters_path}")


# ==========================================
#   EXPLAIN
# ==========================================

def _tile_stem(provenance) -> str:
    fips, school, row, col = provenance
    return f"{fips}_{school}_{row}_{col}"


@click.command("explain")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--tile-dir", type=click.Path(exists=True, file_okay=False))
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--splits", "splits_path", type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def explain(ctx, manifest_path, tile_dir, model_path, splits_path):
    """Covariate SHAP on test counties, superpixel SHAP on test tiles, learned filters."""
    cfg = config_of(ctx)
    records = load_records(cfg)
    splits = load_splits(cfg, splits_path)
    model = load_model(cfg, model_path)
    tiles = load_tileset(cfg, manifest_path, tile_dir)
    test_tiles = tiles.subset(splits.fips(TEST))
    if len(test_tiles) == 0:
        raise ConfigError("no tiles for test counties; check the manifest and splits")

    # --- COVARIATE SHAP ---
    fit, design = cm.fit_on_splits(records, splits)
    vectors = interpret.explain_covariates(fit, design, splits.fips(TEST), background_fips=splits.fips(TRAIN))

    with open_run(ctx, "explain") as run:
        shap_path = run.path("covariate_shap.csv")
        interpret.shap_frame(vectors).to_csv(shap_path, float_format="%.10g")
        importance_path = run.path("shap_importance.csv")
        interpret.shap_importance(vectors).to_csv(importance_path, index=False, float_format="%.10g")
        run.record(shap_path, importance_path)

        # --- IMAGE SHAP ---
        baseline = mean_pixel_baseline(tiles.subset(splits.fips(TRAIN)))
        predict = interpret.model_predict_fn(model)
        n_tiles = min(cfg.shap_tiles, len(test_tiles))
        for i in range(n_tiles):
            tile = as_float(test_tiles.pixels[i])
            stem = _tile_stem(test_tiles.provenance[i])
            attribution = interpret.kernel_shap(predict, tile, baseline, grid=cfg.shap_grid,
                                                n_samples=cfg.shap_samples, seed=cfg.seed + i)
            if abs(attribution.residual) > 1e-6 * max(1.0, abs(attribution.output)):
                warn(f"tile {stem}: attribution residual {attribution.residual:.3g}")
            csv_path = run.path(f"attribution_{stem}.csv")
            matrix_frame(attribution.phi, prefix="s").to_csv(csv_path, index=False, float_format="%.10g")
            title = f"{stem}: f(x)={attribution.output:.3f}, base={attribution.base_value:.3f} ({attribution.mode})"
            svg_path = write_svg(heat_overlay_svg(tile, attribution.phi, title), run.path(f"attribution_{stem}.svg"))
            run.record(csv_path, svg_path)

        # --- FILTERS ---
        filters = interpret.first_layer_filters(model)
        bank_path = write_svg(filter_bank_svg(filters), run.path("filters.svg"))
        run.record(bank_path)
        tile = as_float(test_tiles.pixels[0])
        for idx in range(min(cfg.filters_shown, len(filters))):
            activation = interpret.filter_activations(model, tile, idx)
            csv_path = run.path(f"activation_{idx}.csv")
            matrix_frame(activation).to_csv(csv_path, index=False, float_format="%.8g")
            svg_path = write_svg(activation_svg(tile, activation, title=f"filter {idx}"),
                                 run.path(f"activation_{idx}.svg"))
            run.record(csv_path, svg_path)

    top = interpret.shap_importance(vectors).head(3)["feature"].tolist()
    info(f"largest covariate attributions: {', '.join(top)}")
    ok(f"explained {len(vectors)} counties and {n_tiles} tiles -> {cfg.output_dir}")


# ==========================================
#   REPORT
# ==========================================

def _image_covariates(clusters: pd.DataFrame, records) -> pd.DataFrame:
    meta = records_frame(records)
    known = clusters["fips"].isin(meta.index)
    if not known.all():
        dropped = sorted(clusters.loc[~known, "fips"].unique())
        warn(f"{int((~known).sum())} clustered images from unknown counties skipped: {', '.join(dropped[:5])}")
    clusters = clusters[known].reset_index(drop=True)
    values = meta.loc[clusters["fips"], TTEST_FIELDS].astype(float).reset_index(drop=True)
    values["cluster"] = clusters["cluster"].to_numpy()
    return values


@click.command("report")
@click.option("--splits", "splits_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--predictions", "predictions_path", type=click.Path(exists=True, dir_okay=False),
              help="fips,value predicted rates; defaults to predicted_rates.csv in the output dir.")
@click.option("--clusters", "clusters_path", type=click.Path(exists=True, dir_okay=False),
              help="Cluster assignments; defaults to clusters.csv in the output dir.")
@click.pass_context
def report(ctx, splits_path, predictions_path, clusters_path):
    """WLS covariate tables, covariate benchmark, univariable fits and cluster t-tests."""
    cfg = config_of(ctx)
    records = load_records(cfg)
    splits = load_splits(cfg, splits_path)

    fit, design = cm.fit_on_splits(records, splits)
    fit_design = design.subset(splits.fips(TRAIN) + splits.fips(VALIDATION))
    standardized = cm.standardize_then_fit(fit_design)
    table, r = cm.evaluate_on_test(fit, design, splits)
    meta = records_frame(records)
    points = pd.DataFrame({"fips": table["fips"], "predicted": table["pred_rate"], "true": table["true_rate"],
                           "population": table["population"],
                           "region": meta.loc[table["fips"], "region"].to_numpy()})
    evaluation = {"pearson_r": r, "n_counties": int(len(table)), "r2": fit.r2, "adj_r2": fit.adj_r2,
                  "n_fit": fit.nobs}

    predictions = resolve_input(predictions_path, None, cfg.output_dir, "predicted_rates.csv")
    clusters = resolve_input(clusters_path, None, cfg.output_dir, "clusters.csv")

    with open_run(ctx, "report") as run:
        outputs = {
            "coefficients.csv": cm.coefficient_table(fit),
            "coefficients_standardized.csv": cm.coefficient_table(standardized),
        }
        for name, df in outputs.items():
            path = run.path(name)
            df.to_csv(path, float_format="%.10g")
            run.record(path)
        stats_path = run.path("fit_stats.csv")
        cm.fit_stats_table(fit).to_csv(stats_path, index=False, float_format="%.10g")
        eval_path = run.path("covariate_eval.json")
        eval_path.write_text(json.dumps(evaluation, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        svg_path = write_svg(scatter_svg(points, title="Covariate model, test counties", r=r),
                             run.path("covariate_scatter.svg"))
        run.record(stats_path, eval_path, svg_path)

        if predictions.exists():
            pred = pd.read_csv(predictions, dtype={"fips": str}, float_precision="round_trip")
            pred = pred.set_index("fips")["value"]
            pred = pred[pred.index.isin(splits.fips(TEST))]
            if pred.empty:
                warn(f"{predictions} has no test-county predictions; univariable table skipped")
            else:
                covered = design.subset(list(pred.index))
                uni_path = run.path("univariable.csv")
                cm.univariable_fits(pred, covered).to_csv(uni_path, index=False, float_format="%.10g")
                run.record(uni_path)
                info(f"univariable fits over {len(covered.X)} test counties")
        else:
            warn(f"{predictions} not found; univariable table skipped (run eval first)")

        if clusters.exists():
            values = _image_covariates(pd.read_csv(clusters, dtype={"fips": str}), records)
            weights = values["population"].to_numpy() if cfg.ttest_weights == "population" else None
            matrices = cm.weighted_pairwise_ttests(values[TTEST_FIELDS], values["cluster"].to_numpy(), weights)
            for cov, mat in matrices.items():
                path = run.path(f"ttests/{cov}.csv")
                mat.to_csv(path, float_format="%.6g")
                run.record(path)
        else:
            warn(f"{clusters} not found; cluster t-tests skipped (run cluster first)")

    ok(f"covariate model: R² {fit.r2:.3f}, test Pearson r {r:.4f} over {len(table)} counties")
