"""
County cohort: ingestion, crude rates, the 13-bin selection, imputation
and the train / validation / test split.
"""
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError

from core.errors import DataValidationError, DomainError
from schemas.cohort import CountyRecord

logger = logging.getLogger(__name__)

COUNTY_COLUMNS = ["fips", "name", "population", "deaths", "region", "prop_white", "prop_black",
                  "prop_asian", "prop_hispanic", "prop_male", "mean_age", "any_college", "income"]
REQUIRED_COLUMNS = [c for c in COUNTY_COLUMNS if c not in ("name", "any_college", "income")]
IMPUTED_FIELDS = ("any_college", "income")

TOP_N = 1000
N_BINS = 13
PER_BIN = 40

TRAIN, VALIDATION, TEST = "train", "validation", "test"
SPLIT_LABELS = (TRAIN, VALIDATION, TEST)


def crude_rate(deaths: int, population: int) -> float:
    """Deaths per 1,000 persons."""
    if population <= 0:
        raise DomainError(f"population must be positive, got {population}")
    if deaths < 0 or deaths > population:
        raise DomainError(f"deaths must lie in [0, population], got {deaths} of {population}")
    return 1000.0 * deaths / population


# ==========================================
#   INGESTION
# ==========================================

def _read_table(path: Path) -> pd.DataFrame:
    suffix = path.suffix.lower()
    try:
        if suffix == ".xlsx":
            df = pd.read_excel(path, engine="openpyxl", dtype={"fips": str})
        elif suffix == ".xls":
            df = pd.read_excel(path, dtype={"fips": str})
        else:
            df = pd.read_csv(path, dtype={"fips": str}, float_precision="round_trip")
    except Exception as e:
        raise DataValidationError(f"Error reading county file {path}: {e}")
    df.columns = df.columns.astype(str).str.strip().str.lower()
    return df


def _cell(value):
    if value is None or (isinstance(value, float) and np.isnan(value)) or pd.isna(value):
        return None
    if isinstance(value, str):
        value = value.strip()
        return value or None
    if isinstance(value, np.generic):
        return value.item()
    return value


def read_counties(path) -> List[CountyRecord]:
    """
    Read the county table (.csv / .xlsx / .xls). Every invalid row is
    reported with its file row number; nothing is dropped silently except
    rows carrying a true `exclude` flag, which are counted and logged.
    """
    path = Path(path)
    df = _read_table(path)

    missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
    if missing:
        raise DataValidationError(f"county file {path} is missing columns: {', '.join(missing)}")

    records: List[CountyRecord] = []
    errors = []
    excluded = 0
    seen = set()
    for idx, row in df.iterrows():
        row_num = idx + 2  # header is row 1
        if row.isna().all():
            continue
        if "exclude" in df.columns and str(_cell(row["exclude"]) or "").lower() in ("1", "true", "yes", "y"):
            excluded += 1
            continue

        values = {c: _cell(row[c]) for c in COUNTY_COLUMNS if c in df.columns}
        absent = [c for c in REQUIRED_COLUMNS if values.get(c) is None]
        if absent:
            errors.append({"row": row_num, "error": "; ".join(f"Missing required field '{c}'" for c in absent)})
            continue
        values["fips"] = str(values["fips"])
        values["name"] = str(values.get("name") or "")
        for c in ("population", "deaths", "region"):
            v = values[c]
            if isinstance(v, float) and v.is_integer():
                values[c] = int(v)
        try:
            record = CountyRecord(**values)
        except ValidationError as e:
            msgs = [f"{'.'.join(str(p) for p in err['loc']) or 'row'}: {err['msg']}" for err in e.errors()]
            errors.append({"row": row_num, "error": "; ".join(msgs)})
            continue
        if record.fips in seen:
            errors.append({"row": row_num, "error": f"Duplicate fips '{record.fips}'"})
            continue
        seen.add(record.fips)
        records.append(record)

    if errors:
        raise DataValidationError(f"county file {path}: {len(errors)} invalid rows", errors)
    if excluded:
        logger.info("excluded %d flagged county rows from %s", excluded, path)
    return records


def records_frame(records: Sequence[CountyRecord]) -> pd.DataFrame:
    df = pd.DataFrame([r.model_dump() for r in records])
    if df.empty:
        return pd.DataFrame(columns=COUNTY_COLUMNS + ["year", "rate"])
    df["rate"] = 1000.0 * df["deaths"] / df["population"]
    return df.set_index("fips", drop=False)


def write_counties(records: Sequence[CountyRecord], path):
    df = records_frame(records)[COUNTY_COLUMNS]
    df.to_csv(path, index=False)


# ==========================================
#   SELECTION
# ==========================================

@dataclass
class BinPlan:
    bins: List[List[str]]            # fips per bin, ascending crude rate
    selected: List[str] = field(default_factory=list)


def _bin_sizes(n: int, n_bins: int) -> List[int]:
    base, extra = divmod(n, n_bins)
    # remainder goes to the lowest-rate bins
    return [base + (1 if i < extra else 0) for i in range(n_bins)]


def select_counties(records: Sequence[CountyRecord], top_n: int = TOP_N, n_bins: int = N_BINS,
                    per_bin: int = PER_BIN) -> BinPlan:
    """
    Most populous `top_n` counties, rank-ordered by crude rate into
    `n_bins` near-equal bins; up to `per_bin` most populous chosen per bin.
    """
    if len(records) < n_bins:
        raise DomainError(f"need at least {n_bins} counties to bin, got {len(records)}")

    by_pop = sorted(records, key=lambda r: (-r.population, r.fips))[:top_n]
    by_rate = sorted(by_pop, key=lambda r: (r.crude_rate, r.population, r.fips))

    bins, selected = [], []
    start = 0
    for size in _bin_sizes(len(by_rate), n_bins):
        members = by_rate[start:start + size]
        start += size
        bins.append([r.fips for r in members])
        chosen = sorted(members, key=lambda r: (-r.population, r.fips))[:per_bin]
        selected.extend(r.fips for r in chosen)

    logger.info("selected %d of %d counties across %d bins", len(selected), len(records), n_bins)
    return BinPlan(bins=bins, selected=selected)


def bins_frame(plan: BinPlan) -> pd.DataFrame:
    chosen = set(plan.selected)
    rows = [(f, i, f in chosen) for i, b in enumerate(plan.bins) for f in b]
    return pd.DataFrame(rows, columns=["fips", "bin", "selected"])


# ==========================================
#   SPLIT
# ==========================================

@dataclass
class SplitAssignment:
    labels: Dict[str, str]

    def fips(self, label: str) -> List[str]:
        return sorted(f for f, lab in self.labels.items() if lab == label)

    def counts(self) -> Dict[str, int]:
        return {lab: sum(1 for v in self.labels.values() if v == lab) for lab in SPLIT_LABELS}


def _round_half_up(x: Fraction) -> int:
    return int((x + Fraction(1, 2)) // 1)


def split_sizes(n: int, fractions: Tuple[str, str, str] = ("0.65", "0.15", "0.20")) -> Tuple[int, int, int]:
    """
    Validation and test sizes rounded half-up, training takes the rest:
    430 -> 279/65/86, 20 -> 13/3/4.
    """
    _, f_val, f_test = (Fraction(f) for f in fractions)
    n_val = _round_half_up(f_val * n)
    n_test = _round_half_up(f_test * n)
    return n - n_val - n_test, n_val, n_test


def split(plan: BinPlan, seed: int) -> SplitAssignment:
    if not plan.selected:
        raise DomainError("cannot split an empty selection")
    fips = sorted(plan.selected)
    n_train, n_val, _ = split_sizes(len(fips))
    order = np.random.default_rng(seed).permutation(len(fips))
    labels = {}
    for rank, i in enumerate(order):
        if rank < n_train:
            labels[fips[i]] = TRAIN
        elif rank < n_train + n_val:
            labels[fips[i]] = VALIDATION
        else:
            labels[fips[i]] = TEST
    return SplitAssignment(labels=labels)


def write_splits(splits: SplitAssignment, path):
    df = pd.DataFrame(sorted(splits.labels.items()), columns=["fips", "label"])
    df.to_csv(path, index=False)


def read_splits(path) -> SplitAssignment:
    df = pd.read_csv(path, dtype={"fips": str}, float_precision="round_trip")
    if "fips" not in df.columns or "label" not in df.columns:
        raise DataValidationError(f"split file {path} needs columns fips,label")
    errors = [{"row": i + 2, "error": f"unknown label '{lab}'"}
              for i, lab in enumerate(df["label"]) if lab not in SPLIT_LABELS]
    if errors:
        raise DataValidationError(f"split file {path} has invalid labels", errors)
    return SplitAssignment(labels=dict(zip(df["fips"], df["label"])))


# ==========================================
#   IMPUTATION & SUMMARY
# ==========================================

def impute_missing(records: Sequence[CountyRecord]) -> Tuple[List[CountyRecord], Dict[str, int]]:
    """Replace missing any_college / income with the all-county median."""
    medians, report = {}, {}
    for name in IMPUTED_FIELDS:
        present = [getattr(r, name) for r in records if getattr(r, name) is not None]
        n_missing = len(records) - len(present)
        report[name] = n_missing
        if n_missing == 0:
            continue
        if not present:
            raise DomainError(f"cannot impute '{name}': no county has a value")
        medians[name] = float(np.median(present))
        logger.warning("imputed %d missing '%s' values with median %.4g", n_missing, name, medians[name])

    if not medians:
        return list(records), report
    out = []
    for r in records:
        updates = {k: v for k, v in medians.items() if getattr(r, k) is None}
        out.append(r.model_copy(update=updates) if updates else r)
    return out, report


def dataset_summary(records: Sequence[CountyRecord], splits: SplitAssignment) -> pd.DataFrame:
    """Per-split county characteristics, unweighted county averages."""
    df = records_frame(records)
    df = df[df["fips"].isin(splits.labels)].copy()
    df["label"] = df["fips"].map(splits.labels)
    total = len(df)
    rows = []
    for label in SPLIT_LABELS:
        part = df[df["label"] == label]
        rows.append({
            "split": label,
            "n": len(part),
            "share_pct": round(100.0 * len(part) / total, 1) if total else 0.0,
            "population_k_mean": (part["population"] / 1000).mean(),
            "population_k_sd": (part["population"] / 1000).std(),
            "rate_mean": part["rate"].mean(),
            "rate_sd": part["rate"].std(),
            "income_mean": part["income"].astype(float).mean(),
            "income_sd": part["income"].astype(float).std(),
            "any_college_pct_mean": 100 * part["any_college"].astype(float).mean(),
            "any_college_pct_sd": 100 * part["any_college"].astype(float).std(),
        })
    return pd.DataFrame(rows)
