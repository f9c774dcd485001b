# backend/conftest.py
import os
import sys

import pytest

# Modules import each other as top-level packages (config, models, services, ...)
sys.path.insert(0, os.path.dirname(__file__))

from models.schemas import SimConfig  # noqa: E402


@pytest.fixture
def small_sim_config() -> SimConfig:
    return SimConfig(
        n_users=400,
        n_domains=6,
        n_items_per_domain=8,
        base_exposure_rate=0.1,
        base_share_rate=0.05,
        necg_rate=0.3,
        holdout_fraction=0.2,
        peer_effect=2.0,
        max_capped_fraction=1.0,
        seed=7,
    )


@pytest.fixture
def make_dataset():
    """Build a Dataset from (user, item, domain, arm, outcome) tuples"""
    import pandas as pd

    from services.dataset import OBSERVATION_COLUMNS, Dataset, UserFeatureStore

    def build(rows, dense=None, prior_shares=None, same_domain=None, oracle=None):
        frame = pd.DataFrame(list(rows), columns=OBSERVATION_COLUMNS)
        frame["outcome"] = frame["outcome"].astype("int64")
        if dense is None:
            users = sorted(set(frame["user_id"]))
            dense = pd.DataFrame(index=pd.Index(users, name="user_id"))
        features = UserFeatureStore(
            dense=dense,
            prior_shares=prior_shares or {},
            has_prior_shares=prior_shares is not None,
            same_domain=same_domain,
            oracle=oracle,
        )
        return Dataset.from_frame(frame, features)

    return build
