import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

# the run registry must not touch the working directory
_REGISTRY_DIR = tempfile.mkdtemp(prefix="geomort-registry-")
os.environ.setdefault("GEOMORT_DATABASE_URL", f"sqlite:///{_REGISTRY_DIR}/registry.db")

from schemas.cohort import CountyRecord  # noqa: E402


def make_record(fips, population=100_000, deaths=800, region=1, **overrides):
    values = dict(
        fips=fips, name=f"County {fips}", population=population, deaths=deaths, region=region,
        prop_white=0.7, prop_black=0.1, prop_asian=0.05, prop_hispanic=0.1, prop_male=0.49,
        mean_age=38.0, any_college=0.55, income=52_000.0,
    )
    values.update(overrides)
    return CountyRecord(**values)


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


@pytest.fixture
def county_records(rng):
    """80 counties spread over all regions with covariates loosely driving the rate."""
    records = []
    for i in range(80):
        pop = int(rng.integers(20_000, 2_000_000))
        income = float(rng.uniform(30_000, 90_000))
        college = float(rng.uniform(0.3, 0.8))
        rate = 12.0 - 0.00006 * income + 3.0 * (0.6 - college) + rng.normal(0, 0.4)
        records.append(make_record(
            f"{10001 + i:05d}", population=pop, deaths=int(pop * max(rate, 1.0) / 1000), region=1 + i % 8,
            prop_white=float(rng.uniform(0.4, 0.9)), prop_black=float(rng.uniform(0.0, 0.3)),
            prop_asian=float(rng.uniform(0.0, 0.1)), prop_hispanic=float(rng.uniform(0.0, 0.4)),
            prop_male=float(rng.uniform(0.47, 0.51)), mean_age=float(rng.uniform(32, 46)),
            any_college=college, income=income,
        ))
    return records


@pytest.fixture
def county_csv(tmp_path, county_records):
    from core.cohort import write_counties
    path = tmp_path / "counties.csv"
    write_counties(county_records, path)
    return path


@pytest.fixture
def school_frame():
    rows = []
    for j in range(6):
        rows.append({"fips": "06037", "name": f"School {j}", "lat": 34.0 + 0.01 * j, "lon": -118.2 - 0.01 * j})
    return pd.DataFrame(rows)
