import json
from pathlib import Path

import pytest

from edgekv import bench, cli

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"
SWEEPS = sorted(p.name for p in SCENARIOS.glob("*.json") if not p.name.startswith("bench-"))


@pytest.mark.parametrize("name", SWEEPS)
def test_scenario_files_validate(name):
    bench.Scenario.from_dict(json.loads((SCENARIOS / name).read_text()))


def test_bench_pair_validates():
    spec = json.loads((SCENARIOS / "bench-workload.json").read_text())
    sweep = spec.pop("sweep")
    bench.Scenario.from_dict({"topology": json.loads((SCENARIOS / "bench-topology.json").read_text()),
                              "workload": spec, "sweep": sweep})


@pytest.mark.parametrize("name", ["node0.json", "node1.json", "node2.json"])
def test_real_node_configs_parse(name):
    ec, listen, _ = cli.node_config(json.loads((SCENARIOS / "real" / name).read_text()))
    assert listen in ec.peers and ec.gateway


def test_real_gateway_config_parses():
    gc, _ = cli.gateway_config(json.loads((SCENARIOS / "real" / "gateway.json").read_text()))
    assert len(gc.members) == 3


def test_smoke_scenario_runs(tmp_path):
    code = cli.main(["sim", "--scenario", str(SCENARIOS / "smoke.json"), "--out", str(tmp_path)])
    assert code == 0
    rows = json.loads((tmp_path / "summary.json").read_text())["cells"]
    assert len(rows) == 4 and not any(r["failed"] for r in rows)


def test_uneven_groups_scenario_runs(tmp_path):
    code = cli.main(["sim", "--scenario", str(SCENARIOS / "uneven-groups.json"),
                     "--out", str(tmp_path)])
    assert code == 0
    rows = json.loads((tmp_path / "summary.json").read_text())["cells"]
    assert [r["profile"] for r in rows] == ["edge-slow-wan"]
