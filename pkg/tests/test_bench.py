import csv
import json

import pytest

from kvactors import Granularity, LogMode
from kvactors.bench import VARIANTS, RunConfig, find_runs, run_experiment, verify_run
from kvactors.bench.cli import expand_config, main
from kvactors.errors import ConfigError

SMALL = {"type": "smallbank", "num_actor": 4, "actor_size": 8, "txn_size": 2}

REPORT_KEYS = {
    "variant", "workload", "committed", "attempts", "aborted", "elapsed_s", "throughput", "throughput_pact",
    "throughput_act", "throughput_by_type", "abort_rate", "aborts_by_cause", "latency_mean_ns", "latency_p50_ns",
    "overlap_rate", "batches", "mean_batch_size", "log_bytes", "log_records", "log_mode", "logging_enabled",
    "pipeline_size", "clients", "state_hash", "commit_order_hash", "batch_schedule_hash", "measured", "integrity",
}


def test_variant_mapping():
    assert VARIANTS["Snapper"] == (Granularity.ACTOR, LogMode.SNAPSHOT, False)
    assert VARIANTS["SmSa+"] == (Granularity.ACTOR, LogMode.INCREMENTAL, False)
    assert VARIANTS["SmSa-X"] == (Granularity.KEY, LogMode.INCREMENTAL, False)
    assert VARIANTS["NonTxn"][2] is True
    rc = RunConfig(variant="NonTxn").runtime_config()
    assert rc.nontxn and not rc.log_enabled


def test_config_validation():
    with pytest.raises(ConfigError):
        RunConfig(variant="Calvin").validate()
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"variant": "SmSa-X", "pipeline": 3})
    with pytest.raises(ConfigError):
        RunConfig(txn_count=0).validate()
    with pytest.raises(ConfigError):
        RunConfig(workload={"type": "tpcc"}).validate()
    with pytest.raises(ConfigError):
        RunConfig(txn_count=None, duration=None).validate()


def test_default_pipelines():
    wl = {"type": "smallbank", "num_actor": 10, "actor_size": 1000}
    assert RunConfig(variant="SmSa-X", workload=wl).effective_pipeline() == 128
    assert RunConfig(variant="SmSa+", workload=wl).effective_pipeline() == 2
    assert RunConfig(variant="SmSa+", workload=wl, pipeline_size=9).effective_pipeline() == 9


def test_expand_config_sweeps():
    runs = expand_config({"variants": ["SmSa+", "SmSa-X"], "workload": dict(SMALL), "logging_enabled": [True, False],
                          "sweep": {"workload.txn_size": [1, 2]}})
    names = [n for n, _ in runs]
    assert len(runs) == 8
    assert "SmSa-X/txn_size=2/logging_enabled=False" in names
    cfgs = dict(runs)
    assert cfgs["SmSa+/txn_size=1/logging_enabled=True"].workload["txn_size"] == 1
    assert expand_config({"workload": dict(SMALL)}, variant="Snapper", seed=7)[0][1].seed == 7


def test_report_schema_and_outputs(tmp_path):
    rep = run_experiment(RunConfig(variant="SmSa-X", workload=SMALL, txn_count=100, pipeline_size=8), tmp_path)
    d = json.loads((tmp_path / "report.json").read_text())
    assert set(d) == REPORT_KEYS
    assert set(d["latency_mean_ns"]) == {"I1", "I2", "I3", "I4", "I5", "I6", "I7", "total"}
    assert d["committed"] == rep.committed == 90  # 10% warmup excluded
    assert d["integrity"] == {"conservation": 0}
    for name in ("run_config.json", "report.csv", "final_state.bin", "base_state.bin", "logs/manifest.json"):
        assert (tmp_path / name).exists()
    assert verify_run(tmp_path) == {"replay": [], "conservation": []}


def deterministic(variant, tmp=None):
    # every txn is submitted up front, batches form by size only
    cfg = RunConfig(variant=variant, workload=SMALL, txn_count=96, pipeline_size=96, batch_size=8,
                    batch_timeout=30, seed=3)
    return run_experiment(cfg, tmp)


@pytest.mark.parametrize("variant", ["SmSa-X", "Snapper"])
def test_pact_runs_are_reproducible(variant):
    a, b = deterministic(variant), deterministic(variant)
    assert a.batch_schedule_hash == b.batch_schedule_hash
    assert a.commit_order_hash == b.commit_order_hash
    assert a.state_hash == b.state_hash
    assert a.batches == 12


def test_single_actor_batch_overlap_rate():
    # three PACTs on one actor in one batch: r = 3 / 1
    cfg = RunConfig(variant="SmSa+", workload=SMALL | {"num_actor": 1, "actors_per_txn": 1}, txn_count=3,
                    pipeline_size=3, batch_size=3, batch_timeout=30)
    rep = run_experiment(cfg)
    assert rep.batches == 1 and rep.overlap_rate == 3.0


def test_cli_round_trip(tmp_path, capsys):
    config = tmp_path / "c.json"
    config.write_text(json.dumps({"variants": ["SmSa-X", "NonTxn"], "workload": SMALL, "txn_count": 60,
                                  "pipeline_size": 6}))
    out = tmp_path / "out"
    assert main(["run", "--config", str(config), "--out", str(out)]) == 0
    assert len(find_runs(out)) == 2
    assert main(["verify", "--out", str(out)]) == 0
    assert main(["report", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "throughput.csv")))
    assert {r["variant"] for r in rows} == {"SmSa-X", "NonTxn"}
    assert all(r["relative_to_nontxn"] for r in rows)
    assert (out / "latency.csv").exists() and (out / "logging.csv").exists()
    assert "ok" in capsys.readouterr().out


def test_cli_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"variant": "Nope", "workload": SMALL}))
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["verify", "--out", str(tmp_path / "empty")]) == 2


def test_verify_detects_corrupted_log(tmp_path):
    run_experiment(RunConfig(variant="SmSa+", workload=SMALL, txn_count=60, pipeline_size=6), tmp_path)
    log = sorted((tmp_path / "logs").glob("*.log"))[0]
    data = bytearray(log.read_bytes())
    data[len(data) // 2] ^= 0x5A
    log.write_bytes(bytes(data))
    problems = verify_run(tmp_path)
    assert problems["replay"] and "CorruptRecord" in problems["replay"][0]
    assert main(["verify", "--out", str(tmp_path)]) == 1


def test_marketplace_run_reports_integrity(tmp_path):
    wl = {"type": "marketplace", "sellers": 2, "products_per_seller": 5, "customers": 6, "customer_actors": 2,
          "order_actors": 2, "payment_actors": 2, "shipment_actors": 2}
    rep = run_experiment(RunConfig(variant="SmSa-X", workload=wl, txn_count=150, retry_cap=3), tmp_path)
    assert rep.integrity == {"D1": 0, "D2": 0, "D3": 0}
    assert set(rep.throughput_by_type) <= {"AddItemToCart", "DeleteItemInCart", "UpdatePrice", "Checkout"}
    assert verify_run(tmp_path) == {"replay": [], "D1": [], "D2": [], "D3": []}
