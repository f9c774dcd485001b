#!/usr/bin/env python3
"""
Test the peerstrat command line: subcommands, exit codes and reproducible artifacts
"""

import json
from pathlib import Path

import pytest

from app import main
from config.settings import load_run_config
from models.schemas import EffectEstimate
from services.bias_metrics import build_bias_report
from services import artifacts
from utils.errors import UsageError


def toml_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, list):
        return "[" + ", ".join(toml_value(item) for item in value) + "]"
    return repr(value)


def write_toml(path, top=None, tables=None):
    lines = [f"{key} = {toml_value(value)}" for key, value in (top or {}).items()]
    for name, values in (tables or {}).items():
        lines.append(f"\n[{name}]")
        lines.extend(f"{key} = {toml_value(value)}" for key, value in values.items())
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(path)


def error_payload(stderr):
    """The JSON error line; log records share stderr"""
    return json.loads(stderr.strip().splitlines()[-1])


def write_observations(path, rows):
    with open(path, "w", encoding="utf-8") as handle:
        for user, item, domain, arm, outcome in rows:
            record = {"user_id": user, "item_id": item, "domain_id": domain, "arm": arm, "outcome": outcome}
            handle.write(json.dumps(record) + "\n")
    return str(path)


@pytest.fixture
def simulated_file(tmp_path, small_sim_config):
    config = write_toml(tmp_path / "sim.toml", small_sim_config.model_dump())
    data = str(tmp_path / "sim.ndjson")
    assert main(["simulate", "--config", config, "--output", data]) == 0
    return data


def test_simulate_writes_data_and_sidecar(tmp_path, small_sim_config, capsys):
    config = write_toml(tmp_path / "sim.toml", small_sim_config.model_dump())
    data = tmp_path / "out" / "sim.ndjson"
    assert main(["simulate", "--config", config, "--output", str(data)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert data.exists()
    assert (tmp_path / "out" / "sim.truth.json").exists()
    assert summary["true_rr"] > 1.0
    assert summary["domains"] == 6


def test_simulate_unwritable_sidecar_is_exit_2(tmp_path, small_sim_config, capsys):
    config = write_toml(tmp_path / "sim.toml", small_sim_config.model_dump())
    (tmp_path / "sim.truth.json").mkdir()
    assert main(["simulate", "--config", config, "--output", str(tmp_path / "sim.ndjson")]) == 2
    error = error_payload(capsys.readouterr().err)
    assert error["type"] == "DataError"


def test_ingest_check_reports_arm_counts(simulated_file, capsys):
    capsys.readouterr()
    assert main(["ingest-check", "--input", simulated_file]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["has_prior_shares"] is True
    assert summary["ground_truth"] is not None
    counts = summary["arm_counts"]
    assert counts["exposed"] + counts["exp_control"] + counts["necg"] == summary["observations"]


def test_ingest_check_bad_row_is_exit_2(tmp_path, capsys):
    path = write_observations(tmp_path / "bad.ndjson", [("u1", "i1", "a", "exposed", 3)])
    assert main(["ingest-check", "--input", path]) == 2
    error = error_payload(capsys.readouterr().err)
    assert error["type"] == "IngestError"
    assert "outcome out of range" in error["detail"]


def test_error_payload_is_reproducible(tmp_path, capsys):
    path = write_observations(tmp_path / "bad.ndjson", [("u1", "i1", "a", "exposed", 3)])
    payloads = []
    for _ in range(2):
        assert main(["ingest-check", "--input", path]) == 2
        payloads.append(error_payload(capsys.readouterr().err))
    assert payloads[0] == payloads[1]
    assert {"error", "type", "detail", "exit_code"} <= set(payloads[0])
    assert "timestamp" not in payloads[0]


def test_unknown_config_key_is_exit_1(tmp_path, capsys):
    config = write_toml(tmp_path / "run.toml", {"input": "x.ndjson", "bogus": 1})
    assert main(["estimate", "--config", config]) == 1
    assert "unknown config key 'bogus'" in capsys.readouterr().err


def test_bad_flags_are_exit_1(capsys):
    assert main(["estimate", "--penalty", "heavy"]) == 1
    assert main([]) == 1
    assert main(["estimate", "--specs", "naive,XYZ", "--input", "x.ndjson"]) == 1
    assert "unknown model spec 'XYZ'" in capsys.readouterr().err


def test_run_config_needs_exactly_one_source(tmp_path):
    with pytest.raises(UsageError, match="exactly one of 'input' or 'simulation'"):
        load_run_config(None, {})
    config = write_toml(tmp_path / "run.toml", {"input": "obs.ndjson"}, {"bootstrap": {"replicates": 4}})
    run_config = load_run_config(config, {"penalty": 2.0, "bootstrap": {"seed": 9}})
    assert run_config.input == str(tmp_path / "obs.ndjson")
    assert run_config.penalty == 2.0
    assert (run_config.bootstrap.replicates, run_config.bootstrap.seed) == (4, 9)


def test_estimate_writes_artifacts(simulated_file, tmp_path, capsys):
    out = tmp_path / "est"
    argv = ["estimate", "--input", simulated_file, "--specs", "naive,A", "--replicates", "3",
            "--seed", "1", "--subgroup-k", "2", "--lambda-sweep", "0.5,5", "--save-fits", "--output-dir", str(out)]
    capsys.readouterr()
    assert main(argv) == 0
    summary = json.loads(capsys.readouterr().out)
    assert set(summary["estimates"]) == {"exp", "naive", "A"}
    for name in (artifacts.ESTIMATES_JSON, artifacts.ESTIMATES_CSV, artifacts.BIAS_JSON, artifacts.BIAS_CSV,
                 artifacts.DOMAINS_CSV, artifacts.STRATA_CSV, artifacts.SUBGROUPS_JSON, artifacts.SUBGROUPS_CSV,
                 artifacts.SWEEP_CSV, artifacts.MANIFEST_JSON, "fits/A__lambda=0.5.json"):
        assert (out / name).exists(), name
    manifest = json.loads((out / artifacts.MANIFEST_JSON).read_text(encoding="utf-8"))
    assert manifest["seed"] == 1
    assert manifest["config_hash"] == summary["config_hash"]
    assert "threads" not in manifest["run_config"]
    estimates = json.loads((out / artifacts.ESTIMATES_JSON).read_text(encoding="utf-8"))
    assert estimates["bootstrap"]["replicates"] + estimates["bootstrap"]["dropped"] == 3
    labels = [entry["label"] for entry in estimates["estimates"]]
    assert labels == ["exp", "naive", "A"]

    stored = json.loads((out / artifacts.BIAS_JSON).read_text(encoding="utf-8"))
    restored = {entry["label"]: EffectEstimate.model_validate(entry) for entry in estimates["estimates"]}
    for row, recomputed in zip(stored["rows"], build_bias_report(restored).rows):
        for metric in ("rr_percent_bias", "delta_percent_of_max", "bias_reduction"):
            assert row[metric] == getattr(recomputed, metric), (row["label"], metric)


def test_same_domain_spec_without_prior_shares_is_exit_2(tmp_path, capsys):
    rows = [(f"u{k}", "i1", "a", "exposed" if k % 2 else "necg", int(k % 3 == 0)) for k in range(12)]
    rows.append(("u99", "i1", "a", "exp_control", 0))
    path = write_observations(tmp_path / "obs.ndjson", rows)
    argv = ["estimate", "--input", path, "--specs", "Ds", "--replicates", "2", "--output-dir", str(tmp_path / "o")]
    assert main(argv) == 2
    assert "spec requires same-domain prior shares" in capsys.readouterr().err


def test_report_merges_matching_runs_and_refuses_mismatched(simulated_file, tmp_path, capsys):
    def estimate(name, seed):
        out = str(tmp_path / name)
        argv = ["estimate", "--input", simulated_file, "--specs", "naive,A", "--replicates", "2",
                "--seed", str(seed), "--no-subgroups", "--output-dir", out]
        assert main(argv) == 0
        return out

    first, second, other = estimate("first", 1), estimate("second", 1), estimate("other", 2)
    report_dir = tmp_path / "report"
    assert main(["report", first, second, "--output", str(report_dir)]) == 0
    summary = (report_dir / "summary.txt").read_text(encoding="utf-8")
    assert "Peer-effect estimates: first" in summary
    assert "Peer-effect estimates: second" in summary
    assert (report_dir / "fig2_bias.csv").exists()

    capsys.readouterr()
    assert main(["report", first, other, "--output", str(tmp_path / "bad")]) == 1
    assert "refusing to merge mismatched manifests" in capsys.readouterr().err


def test_run_all_is_byte_reproducible(tmp_path, small_sim_config):
    config = write_toml(
        tmp_path / "run.toml",
        {"specs": ["naive", "A"], "subgroup_k": 2},
        {"bootstrap": {"replicates": 3, "seed": 5}, "simulation": small_sim_config.model_dump()},
    )
    roots = [tmp_path / "one", tmp_path / "two"]
    assert main(["run-all", "--config", config, "--output-dir", str(roots[0]), "--threads", "1"]) == 0
    assert main(["run-all", "--config", config, "--output-dir", str(roots[1]), "--threads", "3"]) == 0

    files = sorted(path.relative_to(roots[0]) for path in roots[0].rglob("*") if path.is_file())
    assert Path("data/simulated.ndjson") in files
    assert Path("estimates/manifest.json") in files
    assert Path("report/summary.txt") in files
    assert files == sorted(path.relative_to(roots[1]) for path in roots[1].rglob("*") if path.is_file())
    for relative in files:
        assert (roots[0] / relative).read_bytes() == (roots[1] / relative).read_bytes(), str(relative)
