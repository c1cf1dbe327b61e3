"""
Population-weighted linear regression of crude mortality on county
covariates, with the inferential output of a standard WLS report, a
standardised variant, univariable fits of predicted mortality and
weighted pairwise cluster t-tests.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import statsmodels.api as sm
from statsmodels.stats.weightstats import CompareMeans, DescrStatsW

from core.cohort import TEST, TRAIN, VALIDATION, SplitAssignment, records_frame
from core.errors import DomainError, SingularDesignError
from core.metrics import pearson_r
from schemas.cohort import COVARIATE_LABELS, REGION_NAMES, CountyRecord

logger = logging.getLogger(__name__)

CONST = "const"
NUMERIC_COVARIATES = ["prop_white", "prop_black", "prop_asian", "prop_hispanic", "prop_male",
                      "mean_age", "any_college"]
REFERENCE_REGION = 1  # New England
COEF_COLUMNS = ["estimate", "std_err", "t", "p", "ci_low", "ci_high"]


def region_column(code: int) -> str:
    return f"region_{code}"


def label_for(column: str) -> str:
    if column == CONST:
        return "Constant"
    if column.startswith("region_"):
        return REGION_NAMES[int(column.split("_")[1])]
    return COVARIATE_LABELS.get(column, column)


@dataclass
class DesignMatrix:
    X: pd.DataFrame          # rows = counties (index fips), named columns incl. const
    y: pd.Series             # crude rate per 1,000
    weights: pd.Series       # population

    def __post_init__(self):
        if len(self.X) != len(self.y) or len(self.X) != len(self.weights):
            raise DomainError("design rows, response and weights differ in length")
        if (self.weights <= 0).any():
            raise DomainError("regression weights must be positive")

    @property
    def columns(self) -> List[str]:
        return list(self.X.columns)

    def subset(self, fips: Sequence[str]) -> "DesignMatrix":
        idx = [f for f in fips if f in self.X.index]
        return DesignMatrix(self.X.loc[idx], self.y.loc[idx], self.weights.loc[idx])


@dataclass
class RegressionFit:
    coefficients: pd.DataFrame        # index = column names, columns = COEF_COLUMNS
    r2: float
    adj_r2: float
    f_stat: float
    f_p: float
    log_lik: float
    aic: float
    bic: float
    nobs: int
    df_resid: float
    standardized: bool = False
    scaling: Dict[str, tuple] = field(default_factory=dict)   # column -> (weighted mean, weighted sd)

    @property
    def params(self) -> pd.Series:
        return self.coefficients["estimate"]

    def predict(self, X: pd.DataFrame) -> pd.Series:
        missing = [c for c in self.params.index if c not in X.columns]
        if missing:
            raise DomainError(f"cannot predict: missing columns {missing}")
        return X[self.params.index].astype(float) @ self.params


# ==========================================
#   DESIGN
# ==========================================

def build_design(records: Sequence[CountyRecord], drop_empty_regions: bool = True) -> DesignMatrix:
    """
    Constant, covariates, region indicators (New England as reference,
    k-1 encoding) and income, rows keyed by fips.
    """
    df = records_frame(records)
    for col in ("any_college", "income"):
        if df[col].isna().any():
            raise DomainError(f"'{col}' has missing values; run impute_missing first")

    X = pd.DataFrame(index=df.index)
    X[CONST] = 1.0
    for col in NUMERIC_COVARIATES:
        X[col] = df[col].astype(float)
    for code in sorted(REGION_NAMES):
        if code == REFERENCE_REGION:
            continue
        indicator = (df["region"] == code).astype(float)
        if drop_empty_regions and indicator.nunique() < 2:
            logger.warning("dropping region indicator %s (%s): constant over the fitted counties",
                           region_column(code), REGION_NAMES[code])
            continue
        X[region_column(code)] = indicator
    X["income"] = df["income"].astype(float)
    return DesignMatrix(X=X, y=df["rate"].astype(float), weights=df["population"].astype(float))


def _dependent_columns(A: np.ndarray, names: List[str]) -> List[str]:
    dependent, kept = [], []
    for j, name in enumerate(names):
        trial = kept + [j]
        if np.linalg.matrix_rank(A[:, trial]) < len(trial):
            dependent.append(name)
        else:
            kept.append(j)
    return dependent


# ==========================================
#   FITTING
# ==========================================

def fit_wls(design: DesignMatrix) -> RegressionFit:
    X, y, w = design.X.astype(float), design.y.astype(float), design.weights.astype(float)
    n, p = X.shape
    if n <= p:
        raise DomainError(f"need more rows than columns to fit, got {n} rows for {p} columns")

    scaled = X.to_numpy() * np.sqrt(w.to_numpy())[:, None]
    if np.linalg.matrix_rank(scaled) < p:
        raise SingularDesignError(_dependent_columns(scaled, list(X.columns)))

    res = sm.WLS(y, X, weights=w).fit(method="qr")
    ci = res.conf_int(alpha=0.05)
    coefficients = pd.DataFrame({
        "estimate": res.params,
        "std_err": res.bse,
        "t": res.tvalues,
        "p": res.pvalues,
        "ci_low": ci[0],
        "ci_high": ci[1],
    }, index=X.columns)

    return RegressionFit(
        coefficients=coefficients,
        r2=float(res.rsquared), adj_r2=float(res.rsquared_adj),
        f_stat=float(res.fvalue) if res.df_model > 0 else float("nan"),
        f_p=float(res.f_pvalue) if res.df_model > 0 else float("nan"),
        log_lik=float(res.llf), aic=float(res.aic), bic=float(res.bic),
        nobs=int(res.nobs), df_resid=float(res.df_resid),
    )


def _weighted_moments(x: np.ndarray, w: np.ndarray):
    mean = np.sum(w * x) / np.sum(w)
    sd = np.sqrt(np.sum(w * (x - mean) ** 2) / np.sum(w))
    return mean, sd


def standardize_then_fit(design: DesignMatrix, standardize_response: bool = True) -> RegressionFit:
    """
    z-score every non-constant column with weighted mean / sd, then fit.
    With standardize_response the slopes are in sd-of-rate units (a single
    covariate gives the weighted Pearson correlation); without it the
    constant equals the weighted mean rate.
    """
    w = design.weights.to_numpy(float)
    Z = design.X.astype(float).copy()
    scaling = {}
    for col in Z.columns:
        if col == CONST:
            continue
        mean, sd = _weighted_moments(Z[col].to_numpy(), w)
        if not sd > 1e-12 * max(1.0, abs(mean)):
            raise DomainError(f"column '{col}' has zero variance; cannot standardise")
        Z[col] = (Z[col] - mean) / sd
        scaling[col] = (mean, sd)

    y = design.y.astype(float)
    if standardize_response:
        mean, sd = _weighted_moments(y.to_numpy(), w)
        if not sd > 0:
            raise DomainError("response has zero variance; cannot standardise")
        y = (y - mean) / sd
        scaling["__response__"] = (mean, sd)

    fit = fit_wls(DesignMatrix(X=Z, y=y, weights=design.weights))
    fit.standardized = True
    fit.scaling = scaling
    return fit


def fit_on_splits(records: Sequence[CountyRecord], splits: SplitAssignment):
    """
    Fit on training + validation counties, as the covariate benchmark does.
    Region indicators constant over those counties are dropped from the
    returned design, so a test county from such a region scores as the
    reference region.
    """
    design = build_design([r for r in records if r.fips in splits.labels], drop_empty_regions=False)
    fit_fips = splits.fips(TRAIN) + splits.fips(VALIDATION)
    fit_rows = design.subset(fit_fips).X
    constant = [c for c in design.columns if c.startswith("region_") and fit_rows[c].nunique() < 2]
    for col in constant:
        logger.warning("dropping region indicator %s (%s): constant over the fitted counties",
                       col, label_for(col))
    design = DesignMatrix(X=design.X.drop(columns=constant), y=design.y, weights=design.weights)
    return fit_wls(design.subset(fit_fips)), design


def evaluate_fit(fit: RegressionFit, design: DesignMatrix, fips: Sequence[str]):
    part = design.subset(fips)
    pred = fit.predict(part.X)
    table = pd.DataFrame({"fips": part.X.index, "pred_rate": pred.to_numpy(),
                          "true_rate": part.y.to_numpy(), "population": part.weights.to_numpy()})
    return table, pearson_r(table["pred_rate"], table["true_rate"])


def evaluate_on_test(fit: RegressionFit, design: DesignMatrix, splits: SplitAssignment):
    return evaluate_fit(fit, design, splits.fips(TEST))


# ==========================================
#   REPORT TABLES
# ==========================================

def coefficient_table(fit: RegressionFit) -> pd.DataFrame:
    table = fit.coefficients.rename(columns={
        "estimate": "coef", "std_err": "std err", "t": "t", "p": "P",
        "ci_low": "0.025", "ci_high": "0.975",
    })
    table.index = [label_for(c) for c in table.index]
    table.index.name = "covariate"
    return table


def fit_stats_table(fit: RegressionFit) -> pd.DataFrame:
    rows = [
        ("R-squared", fit.r2),
        ("Adj. R-squared", fit.adj_r2),
        ("F-statistic", fit.f_stat),
        ("Prob (F-statistic)", fit.f_p),
        ("Log-Likelihood", fit.log_lik),
        ("AIC", fit.aic),
        ("BIC", fit.bic),
        ("No. Observations", fit.nobs),
    ]
    return pd.DataFrame(rows, columns=["statistic", "value"])


# ==========================================
#   UNIVARIABLE FITS
# ==========================================

def univariable_fits(pred: pd.Series, design: DesignMatrix) -> pd.DataFrame:
    """One weighted simple regression of predicted mortality per covariate."""
    missing = [f for f in design.X.index if f not in pred.index]
    if missing:
        raise DomainError(f"no prediction for counties: {missing[:5]}")
    y = pred.loc[design.X.index].astype(float)
    rows = []
    for col in design.columns:
        if col == CONST:
            continue
        if design.X[col].nunique() < 2:
            logger.warning("skipping univariable fit on %s: constant over the predicted counties", col)
            continue
        X = design.X[[CONST, col]]
        fit = fit_wls(DesignMatrix(X=X, y=y, weights=design.weights))
        rows.append({"covariate": col, "label": label_for(col), "adj_r2": fit.adj_r2,
                     "coef": fit.params[col], "p": fit.coefficients.loc[col, "p"]})
    table = pd.DataFrame(rows, columns=["covariate", "label", "adj_r2", "coef", "p"])
    table["_neg"] = -table["adj_r2"]
    return table.sort_values(["_neg", "covariate"], kind="mergesort").drop(columns="_neg").reset_index(drop=True)


# ==========================================
#   WEIGHTED PAIRWISE T-TESTS
# ==========================================

def ttest_pair(x1, w1, x2, w2):
    """
    Welch statistic on weighted means / variances with Satterthwaite df.
    Weights are rescaled to mean 1 inside each group, so equal weights
    reproduce the unweighted Welch test. Returns (t, p, df).
    """
    x1, x2 = np.asarray(x1, float), np.asarray(x2, float)
    w1 = np.asarray(w1, float) / np.mean(w1)
    w2 = np.asarray(w2, float) / np.mean(w2)
    d1, d2 = DescrStatsW(x1, weights=w1), DescrStatsW(x2, weights=w2)
    if d1.var == 0 and d2.var == 0:
        diff = d1.mean - d2.mean
        if diff == 0:
            return 0.0, 1.0, float(len(x1) + len(x2) - 2)
        return float(np.sign(diff) * np.inf), 0.0, float(len(x1) + len(x2) - 2)
    t, p, df = CompareMeans(d1, d2).ttest_ind(alternative="two-sided", usevar="unequal")
    return float(t), float(min(1.0, max(0.0, p))), float(df)


def weighted_pairwise_ttests(values: pd.DataFrame, labels, weights: Optional[Sequence[float]] = None,
                             covariates: Optional[Sequence[str]] = None) -> Dict[str, pd.DataFrame]:
    """
    p-value matrix (clusters x clusters, symmetric, empty diagonal) per
    covariate. `weights=None` gives every image unit weight.
    """
    labels = np.asarray(labels)
    w = np.ones(len(labels)) if weights is None else np.asarray(weights, dtype=float)
    clusters = sorted(np.unique(labels).tolist())
    if len(clusters) < 2:
        raise DomainError("weighted t-tests need at least 2 clusters")
    members = {c: np.flatnonzero(labels == c) for c in clusters}
    small = [c for c in clusters if len(members[c]) < 2]
    for c in small:
        logger.warning("cluster %s has %d member(s); its t-test pairs are skipped", c, len(members[c]))

    out = {}
    for cov in (covariates or list(values.columns)):
        x = values[cov].to_numpy(dtype=float)
        mat = pd.DataFrame(np.nan, index=clusters, columns=clusters)
        for i, a in enumerate(clusters):
            for b in clusters[i + 1:]:
                if a in small or b in small:
                    continue
                ia, ib = members[a], members[b]
                _, p, _ = ttest_pair(x[ia], w[ia], x[ib], w[ib])
                mat.loc[a, b] = mat.loc[b, a] = p
        mat.index.name = "cluster"
        out[cov] = mat
    return out
