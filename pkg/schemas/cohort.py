from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing import Optional

# Covariate codebook: region codes 1..8
REGION_NAMES = {
    1: "New England",
    2: "Mideast",
    3: "Great Lakes",
    4: "Plains",
    5: "Southeast",
    6: "Southwest",
    7: "Rocky Mountains",
    8: "Far West",
}

COVARIATE_LABELS = {
    "prop_white": "Proportion White",
    "prop_black": "Proportion Black",
    "prop_asian": "Proportion Asian",
    "prop_hispanic": "Hispanic",
    "prop_male": "Proportion Male",
    "mean_age": "Mean Age",
    "any_college": "Any College 2015",
    "income": "Income 2015",
}


class CountyRecord(BaseModel):
    """One county-year: the regression row and the Poisson target."""
    model_config = ConfigDict(frozen=True)

    fips: str = Field(..., min_length=1)
    name: str = ""
    population: int = Field(..., gt=0)
    deaths: int = Field(..., ge=0)
    region: int = Field(..., ge=1, le=8)
    prop_white: float = Field(..., ge=0, le=1)
    prop_black: float = Field(..., ge=0, le=1)
    prop_asian: float = Field(..., ge=0, le=1)
    prop_hispanic: float = Field(..., ge=0, le=1)
    prop_male: float = Field(..., ge=0, le=1)
    mean_age: float = Field(..., gt=0)
    # these two may be missing until imputation
    any_college: Optional[float] = Field(default=None, ge=0, le=1)
    income: Optional[float] = Field(default=None, ge=0)
    year: int = 2015

    @model_validator(mode="after")
    def deaths_within_population(self):
        if self.deaths > self.population:
            raise ValueError(f"deaths ({self.deaths}) exceed population ({self.population})")
        return self

    @property
    def crude_rate(self) -> float:
        return 1000.0 * self.deaths / self.population

    @property
    def region_name(self) -> str:
        return REGION_NAMES[self.region]
