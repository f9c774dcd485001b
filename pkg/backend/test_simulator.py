#!/usr/bin/env python3
"""
Test the synthetic peer-exposure generator
"""

import json
import re

import numpy as np
import pytest

from models.schemas import FEATURE_CATALOGUE, SimulationRecord
from services.dataset import validate_arms
from services.estimators import estimate_naive
from services.simulator import simulator
from utils.errors import DataError, UsageError


def test_same_seed_same_dataset(small_sim_config):
    first = simulator.generate(small_sim_config)
    second = simulator.generate(small_sim_config)
    assert first.equals(second)
    other = simulator.generate(small_sim_config.model_copy(update={"seed": 8}))
    assert not first.equals(other)


def test_output_does_not_depend_on_thread_count(small_sim_config):
    serial = simulator.generate(small_sim_config, threads=1)
    parallel = simulator.generate(small_sim_config, threads=4)
    assert serial.equals(parallel)


def test_ground_truth_without_heterogeneity(small_sim_config):
    """Constant baseline: true p0 is the base rate and true RR the multiplier"""
    config = small_sim_config.model_copy(update={
        "base_share_rate": 0.001, "outcome_affinity": 0.0, "activity_effect": 0.0,
        "user_share_sd": 0.0, "item_share_sd": 0.0, "peer_effect": 2.5,
    })
    dataset = simulator.generate(config)
    truth = dataset.ground_truth
    assert truth.true_p0_exposed == pytest.approx(0.001, rel=1e-12)
    assert truth.true_rr == pytest.approx(2.5, rel=1e-12)
    assert truth.true_delta == pytest.approx(0.0015, rel=1e-9)
    assert truth.n_exposed == validate_arms(dataset).total.exposed
    assert dataset.provenance["simulation"].capped_fraction == 0.0


def test_ground_truth_is_confounded(small_sim_config):
    dataset = simulator.generate(small_sim_config)
    truth = dataset.ground_truth
    assert truth.true_p1_exposed <= small_sim_config.peer_effect * truth.true_p0_exposed * (1.0 + 1e-12)
    assert 0.0 < truth.true_p0_exposed < truth.true_p1_exposed <= 1.0


def test_probability_cap_is_a_usage_error(small_sim_config):
    config = small_sim_config.model_copy(update={"peer_effect": 30.0, "base_share_rate": 0.1, "max_capped_fraction": 0.0})
    with pytest.raises(UsageError, match="probability cap binds"):
        simulator.generate(config)


def test_identifier_format(small_sim_config):
    dataset = simulator.generate(small_sim_config)
    frame = dataset.observations
    assert all(re.fullmatch(r"u\d{3}", user) for user in frame["user_id"])
    assert all(re.fullmatch(r"d\d{3}", domain) for domain in frame["domain_id"])
    for item, domain in zip(frame["item_id"], frame["domain_id"]):
        assert item.startswith(domain + "/")


def test_feature_store_contents(small_sim_config):
    dataset = simulator.generate(small_sim_config)
    features = dataset.features
    assert list(features.dense.columns) == [variable.name for variable in FEATURE_CATALOGUE]
    assert set(features.dense.index) == set(dataset.users())
    assert features.has_prior_shares
    for user, domain in zip(dataset.users(), dataset.observations["domain_id"]):
        assert (user, domain) in features.oracle


def test_new_domains_have_no_prior_shares(small_sim_config):
    dataset = simulator.generate(small_sim_config.model_copy(update={"new_domain_fraction": 0.5}))
    popularity = dataset.features.domain_popularity()
    assert len(popularity) == 3


def test_student_t_exposure_link(small_sim_config):
    logistic = simulator.generate(small_sim_config)
    heavy = simulator.generate(small_sim_config.model_copy(update={"exposure_link": "t", "t_link_df": 3.0}))
    assert not logistic.equals(heavy)
    assert heavy.ground_truth.n_exposed > 0


def test_emit_writes_sidecar(tmp_path, small_sim_config):
    dataset = simulator.generate(small_sim_config)
    data_path, sidecar = simulator.emit(dataset, str(tmp_path / "sim.ndjson"))
    assert data_path.exists()
    assert sidecar.name == "sim.truth.json"
    record = SimulationRecord.model_validate(json.loads(sidecar.read_text(encoding="utf-8")))
    assert record.config == small_sim_config
    assert record.ground_truth == dataset.ground_truth


def test_emit_needs_a_simulation_record(tmp_path, make_dataset):
    dataset = make_dataset([("u1", "i1", "a", "exposed", 1)])
    with pytest.raises(DataError):
        simulator.emit(dataset, str(tmp_path / "x.ndjson"))


def test_emit_sidecar_write_failure_is_a_data_error(tmp_path, small_sim_config):
    dataset = simulator.generate(small_sim_config)
    (tmp_path / "sim.truth.json").mkdir()
    with pytest.raises(DataError, match="cannot write ground truth sidecar") as error:
        simulator.emit(dataset, str(tmp_path / "sim.ndjson"))
    assert error.value.exit_code == 2


def test_emit_data_write_failure_is_a_data_error(tmp_path, small_sim_config):
    dataset = simulator.generate(small_sim_config)
    (tmp_path / "sim.ndjson").mkdir()
    with pytest.raises(DataError, match="cannot write observations"):
        simulator.emit(dataset, str(tmp_path / "sim.ndjson"))


def test_without_homophily_exposure_ignores_user_traits(small_sim_config):
    """h=0: arms depend on domain popularity only, whatever the activity or affinity effects"""
    config = small_sim_config.model_copy(update={"homophily": 0.0, "activity_effect": 0.0, "outcome_affinity": 0.0})
    plain = simulator.generate(config)
    traited = simulator.generate(config.model_copy(update={"activity_effect": 0.8, "outcome_affinity": 1.5}))
    assert plain.observations["user_id"].tolist() == traited.observations["user_id"].tolist()
    assert plain.observations["item_id"].tolist() == traited.observations["item_id"].tolist()
    assert plain.observations["arm"].tolist() == traited.observations["arm"].tolist()


def naive_overstatement(config, seeds):
    ratios = []
    for seed in seeds:
        dataset = simulator.generate(config.model_copy(update={"seed": seed}))
        ratios.append(estimate_naive(dataset).rr / dataset.ground_truth.true_rr)
    return float(np.mean(ratios))


def test_naive_matches_truth_without_homophily(small_sim_config):
    config = small_sim_config.model_copy(update={"n_users": 3000, "homophily": 0.0, "activity_effect": 0.5})
    assert naive_overstatement(config, range(6)) == pytest.approx(1.0, abs=0.06)


def test_naive_overstatement_grows_with_homophily(small_sim_config):
    config = small_sim_config.model_copy(update={"n_users": 2000})
    ratios = [naive_overstatement(config.model_copy(update={"homophily": h}), range(3)) for h in (0.0, 1.0, 2.0)]
    assert ratios[0] < ratios[1] < ratios[2]


def test_prior_shares_track_affinity(small_sim_config):
    dataset = simulator.generate(small_sim_config)
    features = dataset.features
    pairs = sorted(features.oracle)
    affinity = np.array([features.oracle[pair] for pair in pairs])
    shares = np.array([features.prior_shares.get(user, {}).get(domain, 0) for user, domain in pairs], dtype=float)
    assert np.corrcoef(affinity, shares)[0, 1] > 0.0
