"""Small data builders shared by the test modules"""

from typing import Optional

import numpy as np

from src.conformal_missing.data_model import MaskedDataset, split_train_cal
from src.conformal_missing.gaussian_oracle import GlmParams, generate_glm_dataset
from src.conformal_missing.missingness import McarSpec


def linear_dataset(
    n: int = 200, d: int = 3, rate: float = 0.2, seed: int = 0
) -> MaskedDataset:
    """Equicorrelated Gaussian-linear rows with MCAR masks."""
    return generate_glm_dataset(GlmParams.equicorrelated(d), n, McarSpec(rate=rate), seed)


def split_dataset(
    n: int = 300,
    d: int = 3,
    rate: float = 0.2,
    seed: int = 0,
    cal_fraction: float = 1 / 3,
    params: Optional[GlmParams] = None,
) -> MaskedDataset:
    """Like linear_dataset, carrying a random train/cal split."""
    params = params or GlmParams.equicorrelated(d)
    data = generate_glm_dataset(params, n, McarSpec(rate=rate), seed)
    return data.with_split(split_train_cal(n, cal_fraction, seed + 1))


def complete_rows(data: MaskedDataset) -> np.ndarray:
    """The true covariates kept by the generator."""
    assert data.hidden_features is not None
    return np.asarray(data.hidden_features)
