import numpy as np
import pandas as pd
import pytest
from scipy import stats

from conftest import make_record
from core import cohort
from core import covariate_model as cm
from core.errors import DomainError, SingularDesignError


def normal_equation_oracle(X, y, w):
    """Solve XᵀWX b = XᵀWy by Gauss-Jordan elimination in extended precision."""
    X = np.asarray(X, dtype=np.longdouble)
    y = np.asarray(y, dtype=np.longdouble)
    w = np.asarray(w, dtype=np.longdouble)
    A = X.T @ (X * w[:, None])
    b = X.T @ (w * y)
    M = np.concatenate([A, b[:, None]], axis=1)
    p = len(A)
    for col in range(p):
        pivot = col + int(np.argmax(np.abs(M[col:, col])))
        M[[col, pivot]] = M[[pivot, col]]
        M[col] = M[col] / M[col, col]
        for row in range(p):
            if row != col:
                M[row] = M[row] - M[row, col] * M[col]
    return M[:, -1]


def random_design(rng, n, p):
    cols = {"const": np.ones(n)}
    for j in range(1, p):
        cols[f"x{j}"] = rng.normal(rng.uniform(-5, 5), rng.uniform(0.5, 3), n)
    X = pd.DataFrame(cols, index=[f"{i:05d}" for i in range(n)])
    w = pd.Series(rng.uniform(1_000, 500_000, n), index=X.index)
    return X, w


class TestWeightedLeastSquares:
    def test_matches_extended_precision_oracle(self, rng):
        for _ in range(100):
            p = int(rng.integers(1, 11))
            n = int(rng.integers(p + 2, 201))
            X, w = random_design(rng, n, p)
            beta = rng.normal(0, 2, p)
            y = pd.Series(X.to_numpy() @ beta + rng.normal(0, 1, n), index=X.index)
            fit = cm.fit_wls(cm.DesignMatrix(X, y, w))
            oracle = normal_equation_oracle(X.to_numpy(), y.to_numpy(), w.to_numpy()).astype(float)
            err = np.max(np.abs(fit.params.to_numpy() - oracle)) / np.max(np.abs(oracle))
            assert err < 1e-8

    def test_exact_fit_has_unit_r2(self, rng):
        X, w = random_design(rng, 50, 4)
        y = pd.Series(X.to_numpy() @ np.array([2.0, -1.0, 0.5, 3.0]), index=X.index)
        fit = cm.fit_wls(cm.DesignMatrix(X, y, w))
        assert fit.r2 == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(fit.params.to_numpy(), [2.0, -1.0, 0.5, 3.0], rtol=1e-9)

    def test_unit_weights_reduce_to_ols(self, rng):
        X, _ = random_design(rng, 60, 3)
        y = pd.Series(rng.normal(size=60), index=X.index)
        fit = cm.fit_wls(cm.DesignMatrix(X, y, pd.Series(1.0, index=X.index)))
        beta, *_ = np.linalg.lstsq(X.to_numpy(), y.to_numpy(), rcond=None)
        np.testing.assert_allclose(fit.params.to_numpy(), beta, rtol=1e-10)

    def test_inference_columns(self, rng):
        X, w = random_design(rng, 80, 3)
        y = pd.Series(X.to_numpy() @ np.array([1.0, 0.2, -0.3]) + rng.normal(0, 1, 80), index=X.index)
        fit = cm.fit_wls(cm.DesignMatrix(X, y, w))
        c = fit.coefficients
        np.testing.assert_allclose(c["t"], c["estimate"] / c["std_err"], rtol=1e-12)
        expected_p = 2 * stats.t.sf(np.abs(c["t"]), fit.df_resid)
        np.testing.assert_allclose(c["p"], expected_p, rtol=1e-9)
        assert (c["ci_low"] < c["estimate"]).all() and (c["estimate"] < c["ci_high"]).all()
        assert fit.nobs == 80 and fit.df_resid == 77
        assert fit.aic == pytest.approx(-2 * fit.log_lik + 2 * 3)

    def test_singular_design_names_columns(self, rng):
        X, w = random_design(rng, 40, 3)
        X["x3"] = 2.0 * X["x1"] - X["x2"]
        y = pd.Series(rng.normal(size=40), index=X.index)
        with pytest.raises(SingularDesignError) as exc:
            cm.fit_wls(cm.DesignMatrix(X, y, w))
        assert exc.value.columns == ["x3"]

    def test_too_few_rows(self, rng):
        X, w = random_design(rng, 3, 3)
        with pytest.raises(DomainError):
            cm.fit_wls(cm.DesignMatrix(X, pd.Series([1.0, 2.0, 3.0], index=X.index), w))

    def test_nonpositive_weight(self, rng):
        X, w = random_design(rng, 10, 2)
        w.iloc[0] = 0.0
        with pytest.raises(DomainError):
            cm.DesignMatrix(X, pd.Series(np.ones(10), index=X.index), w)


class TestStandardisedFit:
    def test_single_covariate_slope_is_weighted_correlation(self, rng):
        X, w = random_design(rng, 100, 2)
        y = pd.Series(0.7 * X["x1"] + rng.normal(0, 2, 100), index=X.index)
        fit = cm.standardize_then_fit(cm.DesignMatrix(X, y, w))
        ww = w.to_numpy() / w.sum()
        xc = X["x1"].to_numpy() - ww @ X["x1"].to_numpy()
        yc = y.to_numpy() - ww @ y.to_numpy()
        r_w = (ww @ (xc * yc)) / np.sqrt((ww @ xc ** 2) * (ww @ yc ** 2))
        assert fit.params["x1"] == pytest.approx(r_w, rel=1e-9)
        assert fit.params["const"] == pytest.approx(0.0, abs=1e-10)
        assert fit.standardized

    def test_raw_response_keeps_mean_as_constant(self, rng):
        X, w = random_design(rng, 100, 3)
        y = pd.Series(8.0 + X["x1"] + rng.normal(0, 1, 100), index=X.index)
        fit = cm.standardize_then_fit(cm.DesignMatrix(X, y, w), standardize_response=False)
        assert fit.params["const"] == pytest.approx(np.average(y, weights=w), rel=1e-10)

    def test_zero_variance_column(self, rng):
        X, w = random_design(rng, 30, 3)
        X["x2"] = 4.0
        with pytest.raises(DomainError):
            cm.standardize_then_fit(cm.DesignMatrix(X, pd.Series(rng.normal(size=30), index=X.index), w))


class TestCountyDesign:
    def test_region_indicators_use_new_england_reference(self, county_records):
        design = cm.build_design(county_records)
        assert "region_1" not in design.columns
        assert [c for c in design.columns if c.startswith("region_")] == [f"region_{k}" for k in range(2, 9)]
        assert design.columns[0] == "const" and design.columns[-1] == "income"
        assert design.weights.iloc[0] == county_records[0].population

    def test_missing_income_must_be_imputed(self, county_records):
        records = [county_records[0].model_copy(update={"income": None})] + county_records[1:]
        with pytest.raises(DomainError, match="impute"):
            cm.build_design(records)

    def test_fit_on_splits_and_test_evaluation(self, county_records):
        splits = cohort.split(cohort.select_counties(county_records), seed=0)
        fit, design = cm.fit_on_splits(county_records, splits)
        assert fit.nobs == len(splits.fips("train")) + len(splits.fips("validation"))
        table, r = cm.evaluate_on_test(fit, design, splits)
        assert list(table["fips"]) == splits.fips("test")
        assert -1.0 <= r <= 1.0
        assert r > 0.5

    def test_region_only_in_test_scores_as_reference(self, county_records):
        fit_side = [r for r in county_records if r.region != 8][:60]
        test_side = [r.model_copy(update={"fips": f"{20001 + i:05d}"})
                     for i, r in enumerate(county_records) if r.region == 8][:3]
        labels = {r.fips: ("validation" if i % 5 == 0 else "train") for i, r in enumerate(fit_side)}
        labels.update({r.fips: "test" for r in test_side})
        splits = cohort.SplitAssignment(labels)

        fit, design = cm.fit_on_splits(fit_side + test_side, splits)
        assert "region_8" not in fit.params.index
        assert design.columns == list(fit.params.index)
        table, _ = cm.evaluate_on_test(fit, design, splits)
        assert list(table["fips"]) == ["20001", "20002", "20003"]
        reference = design.X.loc["20001"].copy()
        assert all(reference[c] == 0.0 for c in design.columns if c.startswith("region_"))

    def test_report_tables(self, county_records):
        fit, _ = cm.fit_on_splits(county_records, cohort.split(cohort.select_counties(county_records), seed=0))
        coef = cm.coefficient_table(fit)
        assert list(coef.columns) == ["coef", "std err", "t", "P", "0.025", "0.975"]
        assert coef.index[0] == "Constant" and "Income 2015" in coef.index and "Far West" in coef.index
        stats_table = cm.fit_stats_table(fit)
        assert stats_table["statistic"].tolist()[0] == "R-squared"

    def test_univariable_fits_sorted(self, county_records):
        design = cm.build_design(county_records)
        pred = design.y * 0.5 + 0.01 * design.X["income"] / 1000
        table = cm.univariable_fits(pred, design)
        assert table["adj_r2"].is_monotonic_decreasing
        assert len(table) == len(design.columns) - 1
        assert table.iloc[0]["covariate"] in ("income", "any_college")

    def test_univariable_skips_constant_columns(self, county_records):
        design = cm.build_design(county_records).subset([r.fips for r in county_records if r.region in (1, 2)])
        table = cm.univariable_fits(design.y, design)
        assert "region_3" not in set(table["covariate"])
        assert "region_2" in set(table["covariate"])

    def test_univariable_needs_every_county(self, county_records):
        design = cm.build_design(county_records)
        with pytest.raises(DomainError):
            cm.univariable_fits(design.y.iloc[:-1], design)


class TestWeightedTTests:
    def test_identical_clusters(self, rng):
        x = rng.normal(size=50)
        t, p, _ = cm.ttest_pair(x, np.ones(50), x, np.ones(50))
        assert t == 0.0 and p == 1.0

    def test_separated_normals_match_welch(self, rng):
        a, b = rng.normal(0, 1, 100), rng.normal(5, 1, 100)
        _, p, df = cm.ttest_pair(a, np.ones(100), b, np.ones(100))
        ref = stats.ttest_ind(a, b, equal_var=False)
        assert p < 1e-20
        assert float(f"{p:.2g}") == float(f"{ref.pvalue:.2g}")

    def test_weights_change_the_answer(self, rng):
        a, b = rng.normal(0, 1, 40), rng.normal(0.4, 1, 40)
        equal = cm.ttest_pair(a, np.ones(40), b, np.ones(40))
        skewed = cm.ttest_pair(a, rng.uniform(1, 100, 40), b, rng.uniform(1, 100, 40))
        assert equal[1] == pytest.approx(stats.ttest_ind(a, b, equal_var=False).pvalue, rel=1e-8)
        assert skewed[1] != pytest.approx(equal[1], rel=1e-6)

    def test_pairwise_matrix(self, rng):
        values = pd.DataFrame({"income": np.concatenate([rng.normal(0, 1, 30), rng.normal(0, 1, 30), rng.normal(8, 1, 30)]),
                               "rate": rng.normal(size=90)})
        labels = np.repeat([0, 1, 2], 30)
        out = cm.weighted_pairwise_ttests(values, labels)
        mat = out["income"]
        assert set(out) == {"income", "rate"}
        assert np.isnan(np.diag(mat.to_numpy())).all()
        np.testing.assert_allclose(mat.to_numpy(), mat.to_numpy().T, equal_nan=True)
        assert mat.loc[0, 2] < 1e-20 and mat.loc[0, 1] > 1e-3

    def test_singleton_cluster_pairs_skipped(self, rng):
        values = pd.DataFrame({"rate": rng.normal(size=21)})
        labels = np.array([0] * 10 + [1] * 10 + [2])
        mat = cm.weighted_pairwise_ttests(values, labels)["rate"]
        assert np.isnan(mat.loc[2, 0]) and not np.isnan(mat.loc[0, 1])

    def test_needs_two_clusters(self):
        with pytest.raises(DomainError):
            cm.weighted_pairwise_ttests(pd.DataFrame({"rate": [1.0, 2.0]}), [0, 0])
