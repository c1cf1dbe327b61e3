"""SVG figures rendered from the Jinja2 templates in templates/."""
import base64
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from jinja2 import Environment, FileSystemLoader, StrictUndefined

from core.imagery import encode_png, to_uint8
from schemas.cohort import REGION_NAMES

TEMPLATE_DIR = Path(__file__).resolve().parent.parent / "templates"

REGION_COLORS = {
    1: "#1f77b4", 2: "#ff7f0e", 3: "#2ca02c", 4: "#d62728",
    5: "#9467bd", 6: "#8c564b", 7: "#e377c2", 8: "#17becf",
}
NEGATIVE_COLOR = "#2166ac"
POSITIVE_COLOR = "#b2182b"

_env = Environment(loader=FileSystemLoader(str(TEMPLATE_DIR)), autoescape=True,
                   trim_blocks=True, lstrip_blocks=True, undefined=StrictUndefined)


def render(template: str, **context) -> str:
    return _env.get_template(template).render(**context)


def _png_b64(pixels: np.ndarray) -> str:
    return base64.b64encode(encode_png(pixels)).decode("ascii")


def _ticks(lo: float, hi: float, n: int = 5):
    step = (hi - lo) / (n - 1) if hi > lo else 1.0
    return [lo + i * step for i in range(n)]


def scatter_svg(points: pd.DataFrame, title: str = "Predicted vs true mortality",
                r: Optional[float] = None, xlabel: str = "True crude rate per 1,000",
                ylabel: str = "Predicted rate per 1,000", width: int = 640, height: int = 520) -> str:
    """
    `points` needs fips, predicted, true; optional population (bubble area)
    and region (colour).
    """
    plot = {"left": 70, "right": width - 150, "top": 40, "bottom": height - 50}
    lo = float(min(points["true"].min(), points["predicted"].min()))
    hi = float(max(points["true"].max(), points["predicted"].max()))
    pad = 0.05 * (hi - lo) if hi > lo else 1.0
    lo, hi = lo - pad, hi + pad

    def sx(v):
        return plot["left"] + (v - lo) / (hi - lo) * (plot["right"] - plot["left"])

    def sy(v):
        return plot["bottom"] - (v - lo) / (hi - lo) * (plot["bottom"] - plot["top"])

    pop = points["population"].astype(float) if "population" in points else pd.Series(1.0, index=points.index)
    radius = 3.0 + 9.0 * np.sqrt(pop / pop.max())
    regions = points["region"] if "region" in points else pd.Series(0, index=points.index)

    circles = [{
        "fips": row.fips, "x": sx(row.true), "y": sy(row.predicted), "r": float(rad),
        "predicted": float(row.predicted), "true": float(row.true),
        "color": REGION_COLORS.get(int(reg), "#555555"),
    } for row, rad, reg in zip(points.itertuples(index=False), radius, regions)]
    legend = [{"label": REGION_NAMES[c], "color": REGION_COLORS[c]}
              for c in sorted(set(int(v) for v in regions)) if c in REGION_NAMES]

    return render("scatter.svg.j2", width=width, height=height, title=title, plot=plot, r=r,
                  xlabel=xlabel, ylabel=ylabel, points=circles, legend=legend,
                  xticks=[{"pos": sx(v), "label": f"{v:.1f}"} for v in _ticks(lo, hi)],
                  yticks=[{"pos": sy(v), "label": f"{v:.1f}"} for v in _ticks(lo, hi)],
                  diag={"x1": sx(lo), "y1": sy(lo), "x2": sx(hi), "y2": sy(hi)})


def heat_overlay_svg(tile: np.ndarray, phi: np.ndarray, title: str = "", size: int = 320) -> str:
    """Tile with per-superpixel attributions; blue negative, red positive, opacity by |φ|."""
    grid = phi.shape[0]
    vmax = float(np.abs(phi).max())
    cell = size / grid
    cells = []
    for i in range(grid):
        for j in range(grid):
            v = float(phi[i, j])
            cells.append({"x": j * cell, "y": i * cell, "value": v,
                          "color": NEGATIVE_COLOR if v < 0 else POSITIVE_COLOR,
                          "alpha": 0.7 * abs(v) / vmax if vmax > 0 else 0.0})
    return render("heat_overlay.svg.j2", size=size, png=_png_b64(to_uint8(tile)), cells=cells,
                  cell=cell, title=title, vmax=vmax)


def filter_bank_svg(filters: np.ndarray, cell: int = 14, per_row: int = 8) -> str:
    """First-layer kernels (F x 3 x 3 x 3), each min-max scaled to RGB."""
    items = []
    for k, f in enumerate(filters):
        lo, hi = float(f.min()), float(f.max())
        scaled = (f - lo) / (hi - lo) if hi > lo else np.full_like(f, 0.5)
        rgb = np.rint(255 * scaled).astype(int)
        items.append({
            "index": k,
            "x": 10 + (k % per_row) * (3 * cell + 12),
            "y": 10 + (k // per_row) * (3 * cell + 24),
            "pixels": [{"row": i, "col": j, "r": rgb[i, j, 0], "g": rgb[i, j, 1], "b": rgb[i, j, 2]}
                       for i in range(3) for j in range(3)],
        })
    n_rows = (len(filters) + per_row - 1) // per_row
    width = 20 + min(len(filters), per_row) * (3 * cell + 12)
    height = 20 + n_rows * (3 * cell + 24)
    return render("filter_bank.svg.j2", width=width, height=height, cell=cell, filters=items)


def activation_svg(tile: np.ndarray, activation: np.ndarray, title: str = "", size: int = 256) -> str:
    lo, hi = float(activation.min()), float(activation.max())
    gray = (activation - lo) / (hi - lo) if hi > lo else np.zeros_like(activation)
    rgb = np.repeat(to_uint8(gray)[:, :, None], 3, axis=2)
    return render("activation.svg.j2", size=size, tile_png=_png_b64(to_uint8(tile)), map_png=_png_b64(rgb),
                  title=title, vmin=lo, vmax=hi)


def write_svg(svg: str, path) -> Path:
    path = Path(path)
    path.write_text(svg, encoding="utf-8")
    return path


def matrix_frame(values: np.ndarray, prefix: str = "c") -> pd.DataFrame:
    """2-D array as a CSV-ready frame with numbered columns."""
    return pd.DataFrame(values, columns=[f"{prefix}{j}" for j in range(values.shape[1])])
