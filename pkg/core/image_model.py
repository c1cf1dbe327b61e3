"""
Image regression on top of ConvRegressor: the Poisson objective, tile
augmentation, the training loop, per-county aggregation, evaluation and
embedding import / export.
"""
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image

from core.cohort import TRAIN, VALIDATION, SplitAssignment
from core.convnet import PARAM_NAMES, ConvRegressor, ForwardPass
from core.errors import DataValidationError, DomainError, NumericError, TrainingDivergedError
from core.imagery import ImageTile, Provenance, tile_relpath
from core.metrics import pearson_r
from schemas.config import TrainConfig

logger = logging.getLogger(__name__)

CROP_SCALE = (0.8, 1.0)
EVAL_BATCH = 64
EMBEDDING_KEY_COLUMNS = ["fips", "school", "row", "col"]

__all__ = [
    "poisson_nll", "AugmentParams", "sample_augment_params", "augment", "forward", "backward",
    "TileSet", "load_tiles", "mean_pixel_baseline", "SGDMomentum", "TrainingLog", "train",
    "predict_images", "predict_county", "PredictionRecord", "evaluate", "pearson_r",
    "EmbeddingMatrix", "import_embeddings", "export_embeddings",
]


def poisson_nll(rate, target) -> float:
    """mean(λ − y·ln λ); the log(y!) constant is dropped."""
    lam = np.asarray(rate, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if np.any(~(lam > 0)):
        raise DomainError("poisson_nll needs λ > 0")
    if np.any(y < 0):
        raise DomainError("poisson_nll needs y ≥ 0")
    return float(np.mean(lam - y * np.log(lam)))


# ==========================================
#   AUGMENTATION
# ==========================================

@dataclass(frozen=True)
class AugmentParams:
    crop: int = 0                 # side of the square crop, 0 = full tile
    top: int = 0
    left: int = 0
    rotations: int = 0            # quarter turns counter-clockwise
    hflip: bool = False
    vflip: bool = False


def sample_augment_params(rng: np.random.Generator, height: int, width: int) -> AugmentParams:
    side = min(height, width)
    scale = rng.uniform(*CROP_SCALE)
    crop = max(1, int(round(scale * side)))
    top = int(rng.integers(0, height - crop + 1))
    left = int(rng.integers(0, width - crop + 1))
    return AugmentParams(crop=crop, top=top, left=left, rotations=int(rng.integers(0, 4)),
                         hflip=bool(rng.random() < 0.5), vflip=bool(rng.random() < 0.5))


def resize_bilinear(pixels: np.ndarray, size: int) -> np.ndarray:
    if pixels.shape[0] == size and pixels.shape[1] == size:
        return pixels.astype(np.float32, copy=True)
    channels = [
        np.asarray(Image.fromarray(np.ascontiguousarray(pixels[:, :, c], dtype=np.float32))
                   .resize((size, size), Image.Resampling.BILINEAR))
        for c in range(pixels.shape[2])
    ]
    return np.clip(np.stack(channels, axis=2), 0.0, 1.0)


def augment(tile: ImageTile, rng: Optional[np.random.Generator] = None, out_size: Optional[int] = None,
            params: Optional[AugmentParams] = None) -> ImageTile:
    """Random crop (scale 0.8-1.0), quarter-turn rotation, flips, bilinear resize."""
    px = tile.pixels
    h, w = px.shape[:2]
    if params is None:
        if rng is None:
            raise DomainError("augment needs an rng or explicit params")
        params = sample_augment_params(rng, h, w)
    if params.crop:
        px = px[params.top:params.top + params.crop, params.left:params.left + params.crop]
    px = np.rot90(px, k=params.rotations, axes=(0, 1))
    if params.hflip:
        px = px[:, ::-1]
    if params.vflip:
        px = px[::-1]
    size = out_size or h
    return ImageTile(pixels=resize_bilinear(np.ascontiguousarray(px), size), provenance=tile.provenance)


# ==========================================
#   FORWARD / BACKWARD
# ==========================================

def as_float(pixels: np.ndarray) -> np.ndarray:
    if pixels.dtype == np.uint8:
        return pixels.astype(np.float32) / np.float32(255.0)
    return pixels


def _stack(tiles) -> np.ndarray:
    if isinstance(tiles, TileSet):
        return tiles.pixels
    if isinstance(tiles, ImageTile):
        return tiles.pixels[None]
    if isinstance(tiles, np.ndarray):
        return tiles if tiles.ndim == 4 else tiles[None]
    return np.stack([t.pixels for t in tiles])


def forward(model: ConvRegressor, tiles) -> Tuple[np.ndarray, np.ndarray]:
    """(λ, embedding) for one tile or a batch."""
    fp = model.forward(as_float(_stack(tiles)), keep_cache=False)
    return fp.rate, fp.embedding


def backward(model: ConvRegressor, tiles, targets) -> Tuple[float, Dict[str, np.ndarray]]:
    """Batch loss and exact gradients of the mean Poisson NLL."""
    fp = model.forward(as_float(_stack(tiles)))
    grads = model.backward(fp, targets)
    return _batch_loss(fp, targets), grads


def _batch_loss(fp: ForwardPass, targets) -> float:
    # written through the logit so ln λ never underflows
    z = fp.logit.astype(np.float64)
    y = np.asarray(targets, dtype=np.float64)
    return float(np.mean(np.exp(z) - y * z))


# ==========================================
#   TILE SETS
# ==========================================

@dataclass
class TileSet:
    pixels: np.ndarray                         # N x S x S x 3, uint8 or float in [0, 1]
    provenance: List[Provenance]

    def __post_init__(self):
        if len(self.pixels) != len(self.provenance):
            raise DomainError("tile set pixels and provenance differ in length")

    def __len__(self):
        return len(self.provenance)

    @property
    def fips(self) -> np.ndarray:
        return np.array([p[0] for p in self.provenance], dtype=object)

    def subset(self, fips: Sequence[str]) -> "TileSet":
        keep = set(fips)
        idx = [i for i, p in enumerate(self.provenance) if p[0] in keep]
        return TileSet(pixels=self.pixels[idx], provenance=[self.provenance[i] for i in idx])

    def by_county(self) -> Dict[str, np.ndarray]:
        groups: Dict[str, List[int]] = {}
        for i, p in enumerate(self.provenance):
            groups.setdefault(p[0], []).append(i)
        return {f: np.array(ix) for f, ix in sorted(groups.items())}


def load_tiles(manifest: pd.DataFrame, tile_dir, size: int = 64) -> TileSet:
    """Read the PNG tree ({fips}/{school}/{row}_{col}.png) for every manifest row."""
    tile_dir = Path(tile_dir)
    pixels, provenance, missing = [], [], []
    for idx, row in enumerate(manifest.itertuples(index=False)):
        prov = (str(row.county_fips), int(row.school_index), int(row.grid_row), int(row.grid_col))
        path = tile_dir / tile_relpath(prov)
        if not path.exists():
            missing.append({"row": idx + 2, "error": f"tile file not found: {path}"})
            continue
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            if rgb.size != (size, size):
                rgb = rgb.resize((size, size), Image.Resampling.BILINEAR)
            pixels.append(np.asarray(rgb, dtype=np.uint8))
        provenance.append(prov)
    if missing:
        raise DataValidationError(f"{len(missing)} tiles missing under {tile_dir}", missing)
    if not pixels:
        raise DataValidationError(f"tile manifest for {tile_dir} is empty")
    logger.info("loaded %d tiles at %dx%d from %s", len(pixels), size, size, tile_dir)
    return TileSet(pixels=np.stack(pixels), provenance=provenance)


def mean_pixel_baseline(tiles) -> np.ndarray:
    """Per-channel mean pixel over a corpus, broadcast to one tile."""
    px = _stack(tiles)
    mean = as_float(px).astype(np.float64).mean(axis=(0, 1, 2))
    return np.broadcast_to(mean, px.shape[1:]).astype(np.float32)


# ==========================================
#   TRAINING
# ==========================================

class SGDMomentum:
    """v <- μ·v + g ; p <- p − lr·v"""

    def __init__(self, params: Mapping[str, np.ndarray], learning_rate: float, momentum: float = 0.9):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray]):
        if self.learning_rate == 0:
            return
        for k in PARAM_NAMES:
            v = self.velocity[k]
            v *= self.momentum
            v += grads[k]
            params[k] -= self.learning_rate * v


@dataclass
class TrainingLog:
    rows: List[Tuple[int, float, float]] = field(default_factory=list)
    best_epoch: int = 0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=["epoch", "train_loss", "val_loss"])

    def write_csv(self, path):
        df = self.to_frame()
        df.to_csv(path, index=False, float_format="%.10g")


def _targets(tiles: TileSet, rates: Mapping[str, float]) -> np.ndarray:
    missing = sorted({f for f in tiles.fips if f not in rates})
    if missing:
        raise DomainError(f"no rate for counties: {', '.join(missing[:10])}")
    return np.array([rates[f] for f in tiles.fips], dtype=np.float64)


def _dataset_loss(model: ConvRegressor, pixels: np.ndarray, y: np.ndarray) -> float:
    total = 0.0
    for start in range(0, len(pixels), EVAL_BATCH):
        fp = model.forward(as_float(pixels[start:start + EVAL_BATCH]), keep_cache=False)
        z = fp.logit.astype(np.float64)
        total += float(np.sum(np.exp(z) - y[start:start + EVAL_BATCH] * z))
    return total / len(pixels)


def _augment_batch(pixels: np.ndarray, rng: np.random.Generator, size: int) -> np.ndarray:
    out = np.empty((len(pixels), size, size, 3), dtype=np.float32)
    for i, px in enumerate(pixels):
        h, w = px.shape[:2]
        out[i] = augment(ImageTile(pixels=as_float(px)), params=sample_augment_params(rng, h, w), out_size=size).pixels
    return out


def train(tiles: TileSet, rates: Mapping[str, float], splits: SplitAssignment,
          config: Optional[TrainConfig] = None, model: Optional[ConvRegressor] = None) -> Tuple[ConvRegressor, TrainingLog]:
    """
    Shuffled image-level mini-batches, each image regressed on its county's
    crude rate. Returns the parameters of the epoch with the lowest
    validation loss together with the per-epoch log.
    """
    config = config or TrainConfig()
    train_set = tiles.subset(splits.fips(TRAIN))
    val_set = tiles.subset(splits.fips(VALIDATION))
    if len(train_set) == 0:
        raise DomainError("training split has no tiles")
    if len(val_set) == 0:
        raise DomainError("validation split has no tiles")
    y_train = _targets(train_set, rates)
    y_val = _targets(val_set, rates)

    size = config.input_size
    if model is None:
        model = ConvRegressor.initialize(channels=config.channels, d_embed=config.d_embed, input_size=size,
                                         seed=config.seed, head_bias=float(np.log(y_train.mean())))
    val_pixels = val_set.pixels if val_set.pixels.shape[1] == size else \
        np.stack([resize_bilinear(as_float(p), size) for p in val_set.pixels])
    plain_train = train_set.pixels if train_set.pixels.shape[1] == size else None

    opt = SGDMomentum(model.params, config.learning_rate, config.momentum)
    rng = np.random.Generator(np.random.Philox([config.seed, 1]))
    log = TrainingLog()
    best_val, best_model = np.inf, model.copy()
    last_finite = model.copy()

    logger.info("training on %d tiles (%d counties), validating on %d tiles", len(train_set),
                len(set(train_set.fips)), len(val_set))
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_set))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            if config.augment:
                batch = _augment_batch(train_set.pixels[idx], rng, size)
            elif plain_train is not None:
                batch = as_float(plain_train[idx])
            else:
                batch = np.stack([resize_bilinear(as_float(p), size) for p in train_set.pixels[idx]])
            try:
                fp = model.forward(batch)
            except NumericError as e:
                raise TrainingDivergedError(f"epoch {epoch}: {e}", model=last_finite, log=log)
            loss = _batch_loss(fp, y_train[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"epoch {epoch}: non-finite training loss", model=last_finite, log=log)
            last_finite = model.copy()
            opt.step(model.params, model.backward(fp, y_train[idx]))
            total += loss * len(idx)

        train_loss = total / len(order)
        try:
            val_loss = _dataset_loss(model, val_pixels, y_val)
        except NumericError as e:
            raise TrainingDivergedError(f"epoch {epoch} validation: {e}", model=last_finite, log=log)
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(f"epoch {epoch}: non-finite validation loss", model=last_finite, log=log)
        log.rows.append((epoch, train_loss, val_loss))
        logger.info("epoch %d  train %.5f  val %.5f", epoch, train_loss, val_loss)
        if val_loss < best_val:
            best_val, best_model, log.best_epoch = val_loss, model.copy(), epoch

    return best_model, log


# ==========================================
#   PREDICTION & EVALUATION
# ==========================================

@dataclass
class PredictionRecord:
    fips: str
    image_rates: List[float]
    county_rate: float
    true_rate: Optional[float] = None


def predict_images(model: ConvRegressor, pixels: np.ndarray, batch: int = EVAL_BATCH) -> Tuple[np.ndarray, np.ndarray]:
    if len(pixels) == 0:
        return np.empty(0), np.empty((0, model.d_embed))
    rates, embs = [], []
    for start in range(0, len(pixels), batch):
        fp = model.forward(as_float(pixels[start:start + batch]), keep_cache=False)
        rates.append(fp.rate.astype(np.float64))
        embs.append(fp.embedding)
    return np.concatenate(rates), np.concatenate(embs)


def predict_county(model: Optional[ConvRegressor], tiles=None, image_rates=None) -> float:
    """Arithmetic mean of per-image λ; pass `image_rates` to aggregate precomputed λ."""
    if image_rates is None:
        if tiles is None or len(tiles) == 0:
            raise DomainError("predict_county needs at least one tile")
        image_rates, _ = predict_images(model, _stack(tiles))
    lam = np.asarray(image_rates, dtype=np.float64)
    if lam.size == 0:
        raise DomainError("predict_county needs at least one tile")
    if np.all(lam == lam[0]):
        return float(lam[0])
    return math.fsum(lam) / lam.size


def evaluate(model: ConvRegressor, tiles: TileSet, rates: Mapping[str, float],
             fips: Optional[Sequence[str]] = None) -> Tuple[List[PredictionRecord], float]:
    subset = tiles.subset(fips) if fips is not None else tiles
    lam, _ = predict_images(model, subset.pixels)
    records = []
    for f, idx in subset.by_county().items():
        records.append(PredictionRecord(fips=f, image_rates=lam[idx].tolist(),
                                        county_rate=predict_county(None, image_rates=lam[idx]),
                                        true_rate=rates.get(f)))
    if len(records) < 2:
        raise DomainError("evaluation needs at least 2 counties")
    r = pearson_r([p.county_rate for p in records], [p.true_rate for p in records])
    return records, r


def predictions_frame(records: Sequence[PredictionRecord]) -> pd.DataFrame:
    return pd.DataFrame([{"fips": p.fips, "n_images": len(p.image_rates), "predicted_rate": p.county_rate,
                          "true_rate": p.true_rate} for p in records])


# ==========================================
#   EMBEDDINGS I/O
# ==========================================

@dataclass
class EmbeddingMatrix:
    keys: List[Provenance]
    values: np.ndarray                 # n x d

    def __post_init__(self):
        if self.values.ndim != 2 or len(self.keys) != self.values.shape[0]:
            raise DomainError("embedding keys and rows differ in length")

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def embed(model: ConvRegressor, tiles: TileSet) -> EmbeddingMatrix:
    _, emb = predict_images(model, tiles.pixels)
    return EmbeddingMatrix(keys=list(tiles.provenance), values=emb.astype(np.float64))


def import_embeddings(path, known: Optional[Sequence[Provenance]] = None) -> EmbeddingMatrix:
    """
    CSV `fips,school,row,col,e0..e{d-1}`. Every bad row (unknown tile,
    duplicate key, wrong width, non-numeric value) is reported by row number.
    """
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype={"fips": str}, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise DataValidationError(f"embedding file {path} is empty")
    except pd.errors.ParserError as e:
        found = re.search(r"line (\d+)", str(e))
        row = int(found.group(1)) if found else None
        raise DataValidationError(f"embedding file {path}: row width differs from the header",
                                  [{"row": row, "error": str(e).strip()}])
    missing = [c for c in EMBEDDING_KEY_COLUMNS if c not in df.columns]
    if missing:
        raise DataValidationError(f"embedding file {path} is missing columns: {', '.join(missing)}")
    value_cols = [c for c in df.columns if c not in EMBEDDING_KEY_COLUMNS]
    expected = [f"e{i}" for i in range(len(value_cols))]
    if not value_cols or value_cols != expected:
        raise DataValidationError(f"embedding file {path} must have value columns e0..e{{d-1}} in order")
    if df.empty:
        raise DataValidationError(f"embedding file {path} has no rows")

    known_set = set(known) if known is not None else None
    values = df[value_cols].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
    keys, errors, seen = [], [], {}
    for i, row in enumerate(df[EMBEDDING_KEY_COLUMNS].itertuples(index=False)):
        row_num = i + 2
        try:
            key = (str(row.fips), int(row.school), int(row.row), int(row.col))
        except (TypeError, ValueError):
            errors.append({"row": row_num, "error": "malformed tile key"})
            continue
        if key in seen:
            errors.append({"row": row_num, "error": f"duplicate key {key} (first at row {seen[key]})"})
            continue
        seen[key] = row_num
        if known_set is not None and key not in known_set:
            errors.append({"row": row_num, "error": f"unknown tile key {key}"})
        if np.isnan(values[i]).any():
            errors.append({"row": row_num, "error": f"expected {len(value_cols)} numeric values"})
        keys.append(key)
    if errors:
        raise DataValidationError(f"embedding file {path}: {len(errors)} invalid rows", errors)
    return EmbeddingMatrix(keys=keys, values=values)


def export_embeddings(matrix: EmbeddingMatrix, path):
    df = pd.DataFrame(matrix.keys, columns=EMBEDDING_KEY_COLUMNS)
    values = pd.DataFrame(matrix.values, columns=[f"e{i}" for i in range(matrix.dim)])
    pd.concat([df, values], axis=1).to_csv(path, index=False, float_format="%.8g")
