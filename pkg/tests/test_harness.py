import json

import pytest
import yaml

from orbitsim.harness import cli
from orbitsim.harness.config import ConfigError, ExperimentConfig, from_dict, load, to_dict
from orbitsim.harness.experiment import Simulation, derive_seed, run_experiment, sweep, write_outputs

SMALL = {"seed": 1, "servers": 8, "offered_load": 300_000,
         "workload": {"n_keys": 10_000},
         "sim": {"duration_s": 0.015, "warmup_s": 0.005}}


def small(**changes):
    return from_dict(SMALL).replace(**changes)


def write_cfg(tmp_path, data, name="c.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return p


# ------------------------------------------------------------ config

def test_defaults_and_roundtrip():
    cfg = from_dict({"seed": 3})
    assert cfg.scheme == "orbitcache" and cfg.servers == 32 and cfg.cache.size == 128
    assert cfg.cache.queue_size == 8 and cfg.server_rate == 100_000
    assert from_dict(to_dict(cfg)) == cfg


@pytest.mark.parametrize("data,path", [
    ({}, "seed"),
    ({"seed": 1, "scheme": "memcache"}, "scheme"),
    ({"seed": 1, "cache": {"size": "big"}}, "cache.size"),
    ({"seed": 1, "cache": {"bogus": 1}}, "cache.bogus"),
    ({"seed": 1, "workload": {"write_ratio": 1.5}}, "workload.write_ratio"),
    ({"seed": 1, "sim": {"warmup_s": 1.0, "duration_s": 0.1}}, "sim.warmup_s"),
    ({"seed": 1, "sim": {"recirc_model": "magic"}}, "sim.recirc_model"),
    ({"seed": 1, "workload": "nope"}, "workload"),
    ({"seed": True}, "seed"),
])
def test_config_errors_name_the_field(data, path):
    with pytest.raises(ConfigError) as exc:
        from_dict(data)
    assert str(exc.value).startswith(path + ":")


def test_env_overrides(tmp_path):
    p = write_cfg(tmp_path, {"seed": 1, "output": "a"})
    cfg = load(p, env={"ORBITSIM_SEED": "42", "ORBITSIM_OUT": "b"})
    assert cfg.seed == 42 and cfg.output == "b"
    with pytest.raises(ConfigError):
        load(p, env={"ORBITSIM_SEED": "x"})


def test_yaml_syntax_error(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("seed: [1,\n")
    with pytest.raises(ConfigError):
        load(p, env={})


def test_replace_dotted():
    cfg = small(**{"cache.size": 64, "seed": 9})
    assert cfg.cache.size == 64 and cfg.seed == 9
    with pytest.raises(ConfigError):
        small(**{"cache.size": -1})


# ------------------------------------------------------------ runs

def test_report_fields_and_audit():
    rep = run_experiment(small())
    assert rep.audit_ok, rep.audit
    assert 0.0 <= rep.balancing_efficiency <= 1.0
    assert len(rep.server_rps) == 8
    assert rep.throughput_rps > 0 and rep.switch_rps > 0
    assert rep.latency_us["cached-read"]["median"] > 0
    assert rep.population_timeline[-1] == 128
    assert rep.revisit_period_ns > 0


def test_determinism_byte_identical(tmp_path):
    outs = []
    for run in ("a", "b"):
        rep = run_experiment(small(**{"workload.write_ratio": 0.2}))
        _, summary = write_outputs([rep.row()], [rep], tmp_path / run, "x")
        outs.append((tmp_path / run / "x.csv").read_bytes() + summary.read_bytes())
    assert outs[0] == outs[1]


def test_different_seed_differs():
    a = run_experiment(small())
    b = run_experiment(small(seed=2))
    assert a.to_dict() != b.to_dict()


def test_nocache_uniform_is_balanced():
    # 100K keys and ~15K requests per server keep partition and sampling noise near 1%
    rep = run_experiment(small(scheme="nocache", **{"workload.alpha": 0.0, "workload.n_keys": 100_000,
                                                     "sim.duration_s": 0.1}))
    assert rep.balancing_efficiency >= 0.9


def test_nocache_skewed_is_imbalanced():
    rep = run_experiment(small(scheme="nocache", **{"servers": 32, "offered_load": 800_000,
                                                     "workload.n_keys": 100_000,
                                                     "sim.duration_s": 0.03}))
    top, low = max(rep.server_rps), min(rep.server_rps)
    assert top / low > 3


def test_all_writes_match_nocache():
    base = {"offered_load": 400_000, "workload.write_ratio": 1.0, "sim.duration_s": 0.03}
    oc = run_experiment(small(**base))
    nc = run_experiment(small(scheme="nocache", **base))
    assert oc.switch_rps == 0
    assert oc.throughput_rps == pytest.approx(nc.throughput_rps, rel=0.05)


def test_netcache_with_only_large_items_equals_nocache():
    base = {"offered_load": 400_000, "workload.p_small": 0.0, "sim.duration_s": 0.03}
    net = run_experiment(small(scheme="netcache", **base))
    no = run_experiment(small(scheme="nocache", **base))
    assert net.switch_rps == 0
    assert net.throughput_rps == pytest.approx(no.throughput_rps, rel=0.01)


def test_trace_and_history(tmp_path):
    trace = tmp_path / "t.jsonl"
    sim = Simulation(small(**{"sim.trace": str(trace), "sim.history": True,
                              "workload.write_ratio": 0.2, "sim.duration_s": 0.005,
                              "sim.warmup_s": 0.0}))
    rep = sim.run()
    first = json.loads(trace.read_text().splitlines()[0])
    assert {"t", "action", "op", "seq", "hkey"} <= set(first)
    assert rep.audit["coherence_violations"] == 0 and rep.audit["coherence_reads_checked"] > 0


def test_loss_keeps_conservation():
    rep = run_experiment(small(**{"sim.loss": 0.01}))
    assert rep.audit["ok_message_conservation"] and rep.audit["conservation"]["lost"] > 0


# ------------------------------------------------------------ sweep, outputs

def test_sweep_rows_and_seeds():
    res = sweep(small(), "cache.size", [16, 32])
    assert [r["row"]["value"] for r in res] == [16, 32]
    assert [r["row"]["seed"] for r in res] == [derive_seed(1, 0), derive_seed(1, 1)]
    same = sweep(small(), "cache.size", [16, 32], same_seed=True)
    assert {r["row"]["seed"] for r in same} == {1}


def test_sweep_keeps_going_after_error():
    res = sweep(small(), "cache.size", [16, -5, 32])
    assert "error" in res[1]["row"] and res[1]["report"] is None
    assert res[2]["report"] is not None


def test_write_outputs(tmp_path):
    rep = run_experiment(small())
    csv_path, summary = write_outputs([rep.row()], [rep], tmp_path, "demo")
    header = csv_path.read_text().splitlines()[0].split(",")
    assert header[:4] == ["name", "scheme", "seed", "offered_load"]
    data = json.loads(summary.read_text())
    assert data["runs"][0]["seed"] == 1


# ------------------------------------------------------------ cli

def test_cli_run_ok(tmp_path, capsys):
    p = write_cfg(tmp_path, {**SMALL, "name": "t"})
    assert cli.main(["run", str(p), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "t.csv").exists()
    assert "audit ok" in capsys.readouterr().out


def test_cli_config_error_exit_2(tmp_path, capsys):
    p = write_cfg(tmp_path, {"seed": 1, "cache": {"size": "x"}})
    assert cli.main(["run", str(p)]) == 2
    assert "cache.size" in capsys.readouterr().err
    assert cli.main(["run", str(tmp_path / "missing.yaml")]) == 2


def test_cli_audit_failure_exit_1(tmp_path):
    data = {**SMALL, "workload": {"n_keys": 10_000, "write_ratio": 0.2},
            "cache": {"mutation": "skip-invalidate"},
            "sim": {**SMALL["sim"], "history": True}}
    p = write_cfg(tmp_path, data)
    assert cli.main(["run", str(p), "--out", str(tmp_path)]) == 1


def test_cli_sweep(tmp_path, capsys):
    p = write_cfg(tmp_path, {**SMALL, "name": "sw"})
    rc = cli.main(["sweep", str(p), "--axis", "cache.size", "--values", "16,32",
                   "--out", str(tmp_path), "--duration", "0.01"])
    assert rc == 0
    lines = (tmp_path / "sw_cache_size.csv").read_text().splitlines()
    assert len(lines) == 3
    assert cli.main(["sweep", str(p), "--axis", "cache.nope", "--values", "1"]) == 2


def test_cli_seed_flag(tmp_path):
    p = write_cfg(tmp_path, {**SMALL, "name": "s"})
    cli.main(["run", str(p), "--seed", "7", "--out", str(tmp_path)])
    row = (tmp_path / "s.csv").read_text().splitlines()[1].split(",")
    assert row[2] == "7"
