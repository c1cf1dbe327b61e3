import math

import numpy as np
import pandas as pd
import pytest

from core.cohort import SplitAssignment
from core.convnet import PARAM_NAMES, ConvRegressor
from core.errors import DataValidationError, DomainError, TrainingDivergedError
from core.image_model import (AugmentParams, EmbeddingMatrix, TileSet, augment, embed, evaluate,
                              export_embeddings, import_embeddings, load_tiles, mean_pixel_baseline,
                              poisson_nll, predict_county, predictions_frame, sample_augment_params, train)
from core.imagery import ImageTile, encode_png, tile_relpath
from schemas.config import TrainConfig

SMALL = dict(channels=(4, 4, 4), d_embed=8, input_size=16)


def small_tileset(rng, n_counties=20, per_county=4, size=16):
    """Brightness tracks the county rate, so a model has something to learn."""
    pixels, provenance, rates = [], [], {}
    for c in range(n_counties):
        fips = f"{20001 + c:05d}"
        level = c / (n_counties - 1)
        rates[fips] = 5.0 + 10.0 * level
        for k in range(per_county):
            px = np.clip(level + rng.normal(0, 0.05, size=(size, size, 3)), 0, 1)
            pixels.append(np.rint(px * 255).astype(np.uint8))
            provenance.append((fips, 0, k // 7, k % 7))
    return TileSet(pixels=np.stack(pixels), provenance=provenance), rates


def small_splits(rates):
    fips = sorted(rates)
    labels = {f: "train" for f in fips}
    for f in fips[1::5]:
        labels[f] = "validation"
    for f in fips[3::5]:
        labels[f] = "test"
    return SplitAssignment(labels=labels)


class TestPoissonLoss:
    def test_known_values(self):
        assert poisson_nll([1.0], [1.0]) == pytest.approx(1.0)
        assert poisson_nll([2.0], [0.0]) == pytest.approx(2.0)
        assert poisson_nll([math.e], [1.0]) == pytest.approx(math.e - 1.0)
        assert poisson_nll([1.0, 2.0], [1.0, 0.0]) == pytest.approx(1.5)

    def test_minimised_at_target(self):
        grid = np.linspace(1.0, 20.0, 1901)
        losses = [poisson_nll([lam], [7.9]) for lam in grid]
        assert grid[int(np.argmin(losses))] == pytest.approx(7.9, abs=0.01)

    @pytest.mark.parametrize("rate,target", [([0.0], [1.0]), ([-1.0], [1.0]), ([1.0], [-0.5])])
    def test_domain(self, rate, target):
        with pytest.raises(DomainError):
            poisson_nll(rate, target)


class TestAugment:
    def tile(self, rng, size=12):
        return ImageTile(pixels=rng.uniform(size=(size, size, 3)).astype(np.float32))

    def test_identity_params(self, rng):
        t = self.tile(rng)
        np.testing.assert_array_equal(augment(t, params=AugmentParams()).pixels, t.pixels)

    def test_half_turn_twice_is_identity(self, rng):
        t = self.tile(rng)
        once = augment(t, params=AugmentParams(rotations=2))
        np.testing.assert_array_equal(once.pixels, t.pixels[::-1, ::-1])
        np.testing.assert_array_equal(augment(once, params=AugmentParams(rotations=2)).pixels, t.pixels)

    def test_flips(self, rng):
        t = self.tile(rng)
        np.testing.assert_array_equal(augment(t, params=AugmentParams(hflip=True)).pixels, t.pixels[:, ::-1])
        np.testing.assert_array_equal(augment(t, params=AugmentParams(vflip=True)).pixels, t.pixels[::-1])

    def test_crop_is_resized_back(self, rng):
        t = self.tile(rng, 20)
        out = augment(t, params=AugmentParams(crop=16, top=2, left=3))
        assert out.pixels.shape == (20, 20, 3)
        assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0

    def test_sampled_params_stay_inside(self, rng):
        for _ in range(200):
            p = sample_augment_params(rng, 50, 50)
            assert 40 <= p.crop <= 50
            assert 0 <= p.top <= 50 - p.crop and 0 <= p.left <= 50 - p.crop
            assert 0 <= p.rotations <= 3

    def test_constant_tile_stays_constant(self, rng):
        t = ImageTile(pixels=np.full((30, 30, 3), 0.25, dtype=np.float32))
        out = augment(t, rng=rng, out_size=16)
        np.testing.assert_allclose(out.pixels, 0.25, atol=1e-6)

    def test_needs_rng_or_params(self, rng):
        with pytest.raises(DomainError):
            augment(self.tile(rng))


class TestAggregation:
    def test_identical_rates_are_exact(self):
        assert predict_county(None, image_rates=[7.123456789] * 196) == 7.123456789

    def test_mean_of_image_rates(self):
        assert predict_county(None, image_rates=[1.0, 2.0, 3.0]) == 2.0

    def test_empty_county(self):
        with pytest.raises(DomainError):
            predict_county(None, image_rates=[])

    def test_predicts_from_tiles(self, rng):
        tiles, _ = small_tileset(rng, n_counties=2, per_county=3)
        model = ConvRegressor.initialize(seed=0, head_bias=2.0, **SMALL)
        rates = model.forward(tiles.pixels[:3] / 255.0, keep_cache=False).rate
        assert predict_county(model, tiles.pixels[:3]) == pytest.approx(float(np.mean(rates)), rel=1e-5)

    @pytest.mark.parametrize("n1, n2", [(1, 1), (3, 17), (196, 4)])
    def test_concatenation_is_size_weighted(self, rng, n1, n2):
        first, second = rng.uniform(0.5, 20.0, size=n1), rng.uniform(0.5, 20.0, size=n2)
        m1, m2 = predict_county(None, image_rates=first), predict_county(None, image_rates=second)
        whole = predict_county(None, image_rates=np.concatenate([first, second]))
        assert whole == pytest.approx((n1 * m1 + n2 * m2) / (n1 + n2), rel=1e-12)

    def test_concatenated_tiles_are_size_weighted(self, rng):
        tiles, _ = small_tileset(rng, n_counties=2, per_county=5)
        model = ConvRegressor.initialize(seed=0, head_bias=2.0, **SMALL)
        first, second = tiles.pixels[:2], tiles.pixels[2:]
        m1, m2 = predict_county(model, first), predict_county(model, second)
        assert predict_county(model, tiles.pixels) == pytest.approx((2 * m1 + 8 * m2) / 10, rel=1e-6)


class TestTileSets:
    def test_subset_and_grouping(self, rng):
        tiles, rates = small_tileset(rng, n_counties=3, per_county=2)
        part = tiles.subset(["20003", "20001"])
        assert len(part) == 4
        assert list(part.by_county()) == ["20001", "20003"]

    def test_mean_pixel_baseline(self):
        px = np.zeros((2, 4, 4, 3), dtype=np.uint8)
        px[1] = 255
        baseline = mean_pixel_baseline(px)
        assert baseline.shape == (4, 4, 3)
        np.testing.assert_allclose(baseline, 0.5)

    def test_load_tiles_from_tree(self, tmp_path, rng):
        rows = []
        for k in range(3):
            prov = ("06037", 1, 0, k)
            path = tmp_path / tile_relpath(prov)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(encode_png(rng.integers(0, 256, size=(40, 40, 3), dtype=np.uint8)))
            rows.append({"county_fips": "06037", "school_index": 1, "grid_row": 0, "grid_col": k})
        tiles = load_tiles(pd.DataFrame(rows), tmp_path, size=16)
        assert tiles.pixels.shape == (3, 16, 16, 3) and tiles.pixels.dtype == np.uint8
        assert tiles.provenance[2] == ("06037", 1, 0, 2)

    def test_missing_tiles_reported_by_row(self, tmp_path):
        rows = pd.DataFrame([{"county_fips": "06037", "school_index": 0, "grid_row": 0, "grid_col": c} for c in range(2)])
        with pytest.raises(DataValidationError) as exc:
            load_tiles(rows, tmp_path, size=16)
        assert [e["row"] for e in exc.value.errors] == [2, 3]


class TestTraining:
    def config(self, **overrides):
        values = dict(learning_rate=1e-3, epochs=2, batch_size=8, seed=0, augment=False, **SMALL)
        values.update(overrides)
        return TrainConfig(**values)

    def test_log_and_best_epoch(self, rng):
        tiles, rates = small_tileset(rng)
        model, log = train(tiles, rates, small_splits(rates), self.config())
        frame = log.to_frame()
        assert list(frame.columns) == ["epoch", "train_loss", "val_loss"]
        assert frame["epoch"].tolist() == [1, 2]
        assert log.best_epoch == int(frame["val_loss"].idxmin()) + 1
        assert model.input_size == 16

    def test_zero_learning_rate_freezes_parameters(self, rng):
        tiles, rates = small_tileset(rng)
        splits = small_splits(rates)
        model, _ = train(tiles, rates, splits, self.config(learning_rate=0.0))
        train_rates = [rates[f] for f in tiles.fips if splits.labels[f] == "train"]
        fresh = ConvRegressor.initialize(seed=0, head_bias=float(np.log(np.mean(train_rates))), **SMALL)
        for k in PARAM_NAMES:
            np.testing.assert_array_equal(model.params[k], fresh.params[k])

    def test_same_seed_same_model(self, rng):
        tiles, rates = small_tileset(rng)
        splits = small_splits(rates)
        a, log_a = train(tiles, rates, splits, self.config(augment=True))
        b, log_b = train(tiles, rates, splits, self.config(augment=True))
        assert log_a.rows == log_b.rows
        for k in PARAM_NAMES:
            np.testing.assert_array_equal(a.params[k], b.params[k])

    def test_divergence_keeps_last_finite_model(self, rng):
        tiles, rates = small_tileset(rng)
        with pytest.raises(TrainingDivergedError) as exc:
            train(tiles, rates, small_splits(rates), self.config(learning_rate=1e30))
        assert exc.value.model is not None
        assert all(np.isfinite(v).all() for v in exc.value.model.params.values())

    def test_validation_split_required(self, rng):
        tiles, rates = small_tileset(rng)
        splits = SplitAssignment(labels={f: "train" for f in rates})
        with pytest.raises(DomainError, match="validation"):
            train(tiles, rates, splits, self.config())

    def test_missing_rate(self, rng):
        tiles, rates = small_tileset(rng)
        splits = small_splits(rates)
        rates.pop("20001")
        with pytest.raises(DomainError, match="20001"):
            train(tiles, rates, splits, self.config())


class TestEvaluation:
    def test_records_per_county(self, rng):
        tiles, rates = small_tileset(rng, n_counties=6, per_county=3)
        model = ConvRegressor.initialize(seed=1, head_bias=2.0, **SMALL)
        records, r = evaluate(model, tiles, rates)
        assert [p.fips for p in records] == sorted(rates)
        assert all(len(p.image_rates) == 3 for p in records)
        assert -1.0 <= r <= 1.0
        frame = predictions_frame(records)
        assert list(frame.columns) == ["fips", "n_images", "predicted_rate", "true_rate"]

    def test_needs_two_counties(self, rng):
        tiles, rates = small_tileset(rng, n_counties=2, per_county=2)
        model = ConvRegressor.initialize(seed=1, **SMALL)
        with pytest.raises(DomainError):
            evaluate(model, tiles, rates, fips=["20001"])


class TestEmbeddingFiles:
    def test_export_then_import(self, tmp_path, rng):
        tiles, _ = small_tileset(rng, n_counties=2, per_county=3)
        matrix = embed(ConvRegressor.initialize(seed=2, **SMALL), tiles)
        path = tmp_path / "embeddings.csv"
        export_embeddings(matrix, path)
        back = import_embeddings(path, known=tiles.provenance)
        assert back.keys == matrix.keys
        np.testing.assert_allclose(back.values, matrix.values, rtol=1e-7, atol=1e-12)

    def write(self, tmp_path, text):
        path = tmp_path / "emb.csv"
        path.write_text(text)
        return path

    def test_row_errors(self, tmp_path):
        path = self.write(tmp_path, "fips,school,row,col,e0,e1\n"
                                    "01001,0,0,0,1.0,2.0\n"
                                    "01001,0,0,0,1.0,2.0\n"
                                    "01001,0,0,1,abc,2.0\n"
                                    "01001,x,0,2,1.0,2.0\n"
                                    "09999,0,0,3,1.0,2.0\n")
        known = [("01001", 0, 0, c) for c in range(4)]
        with pytest.raises(DataValidationError) as exc:
            import_embeddings(path, known=known)
        assert [e["row"] for e in exc.value.errors] == [3, 4, 5, 6]

    def test_row_wider_than_header(self, tmp_path):
        path = self.write(tmp_path, "fips,school,row,col,e0,e1\n"
                                    "01001,0,0,0,1.0,2.0\n"
                                    "01001,0,0,1,1.0,2.0,3.0\n")
        with pytest.raises(DataValidationError) as exc:
            import_embeddings(path)
        assert exc.value.errors[0]["row"] == 3
        assert exc.value.exit_code == 3

    def test_value_columns_must_be_ordered(self, tmp_path):
        path = self.write(tmp_path, "fips,school,row,col,e1,e0\n01001,0,0,0,1,2\n")
        with pytest.raises(DataValidationError):
            import_embeddings(path)

    def test_empty_file(self, tmp_path):
        with pytest.raises(DataValidationError):
            import_embeddings(self.write(tmp_path, ""))

    def test_header_only(self, tmp_path):
        with pytest.raises(DataValidationError, match="no rows"):
            import_embeddings(self.write(tmp_path, "fips,school,row,col,e0\n"))

    def test_matrix_shape_check(self):
        with pytest.raises(DomainError):
            EmbeddingMatrix(keys=[("1", 0, 0, 0)], values=np.zeros((2, 3)))
