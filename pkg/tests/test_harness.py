import csv
import json

import numpy as np
import pytest

from avgrl.errors import StructuralError
from avgrl.generators import RandomMdpSpec, generate_gridworld, generate_random_mdp
from avgrl.harness import ExperimentConfig, build_instance, run_experiment
from avgrl.mdp import deterministic_stationary, optimal_by_enumeration, save_mdp
from avgrl.traces import dumps_trace, file_sha256, read_trace, write_trace
from avgrl.transforms import exploration_mix


def test_random_mdp_is_byte_stable(tmp_path):
    spec = RandomMdpSpec(4, 2, seed=11)
    save_mdp(generate_random_mdp(spec), tmp_path / "a.json")
    save_mdp(generate_random_mdp(spec), tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    other = generate_random_mdp(RandomMdpSpec(4, 2, seed=12))
    assert other.content_hash() != generate_random_mdp(spec).content_hash()


def test_huge_concentration_gives_uniform_rows():
    mdp = generate_random_mdp(RandomMdpSpec(5, 2, concentration=1e6, seed=0))
    np.testing.assert_allclose(mdp.transition, 0.2, atol=2e-3)


def test_six_by_three_instance_all_policies_irreducible():
    mdp = generate_random_mdp(RandomMdpSpec(6, 3, seed=4))
    pis = deterministic_stationary(mdp)
    assert pis.shape == (3**6, 6) and pis.min() > 0


def test_spec_validation():
    with pytest.raises(StructuralError):
        RandomMdpSpec(0, 2)
    with pytest.raises(StructuralError):
        RandomMdpSpec(2, 2, concentration=0.0)
    with pytest.raises(StructuralError):
        generate_gridworld(0, 3)
    with pytest.raises(StructuralError):
        generate_gridworld(2, 2, slip=1.0)
    with pytest.raises(StructuralError):
        generate_gridworld(2, 2, rewards={(5, 5): 1.0})


def test_one_cell_grid_self_loops():
    mdp = generate_gridworld(1, 1)
    assert mdp.transition.shape == (1, 4, 1) and np.all(mdp.transition == 1.0)


def test_deterministic_grid_gain():
    # the reward corner can be held forever by walking into a wall: cycle length 1
    mdp = generate_gridworld(2, 2, 0.0, {(1, 1): 2.0})
    assert optimal_by_enumeration(mdp).gain == pytest.approx(2.0 / 1)


def test_slippery_mixed_grid_irreducible():
    mdp = exploration_mix(generate_gridworld(3, 2, 0.2, {(0, 2): 1.0}), 0.05)[0]
    assert deterministic_stationary(mdp).min() > 0


def test_trace_round_trip(tmp_path):
    meta = {"a": np.float64(1.5), "b": np.arange(3)}
    rows = [{"k": np.int64(0), "x": [np.float32(0.25)]}, {"k": 1, "flag": np.bool_(True)}]
    digest = write_trace(tmp_path / "t.jsonl", meta, rows)
    assert digest == file_sha256(tmp_path / "t.jsonl")
    m, r = read_trace(tmp_path / "t.jsonl")
    assert m == {"a": 1.5, "b": [0, 1, 2]} and r[1]["flag"] is True
    assert dumps_trace(meta, rows) == (tmp_path / "t.jsonl").read_text()


def test_trace_errors(tmp_path):
    with pytest.raises(StructuralError, match="no such"):
        read_trace(tmp_path / "none.jsonl")
    (tmp_path / "bad.jsonl").write_text('{"rows": 1}\n')
    with pytest.raises(StructuralError, match="metadata"):
        read_trace(tmp_path / "bad.jsonl")


def api_config(tmp_path, seeds=(0,), **algo):
    block = {"kind": "api", "mode": "none", "iterations": 20}
    block.update(algo)
    return ExperimentConfig(instance={"kind": "random", "n_states": 4, "n_actions": 2, "seed": 1},
                            algorithm=block, seeds=list(seeds), output_dir=str(tmp_path))


def test_single_seed_api_experiment(tmp_path):
    manifest = run_experiment(api_config(tmp_path))
    assert manifest["complete"] and manifest["passed"]
    rows = list(csv.DictReader((tmp_path / "summary.csv").open()))
    assert rows[0]["status"] == "ok" and int(rows[0]["converged_at"]) >= 1
    assert int(rows[0]["violations"]) == 0
    assert [r["kind"] for r in manifest["transforms"]] == ["exploration_mix", "aperiodicity"]


def test_config_validation(tmp_path):
    with pytest.raises(StructuralError, match="empty"):
        api_config(tmp_path, seeds=())
    with pytest.raises(StructuralError):
        api_config(tmp_path, seeds=(1, 1))
    with pytest.raises(StructuralError, match="unknown config keys"):
        ExperimentConfig.from_dict({"instance": {}, "algorithm": {}, "seeds": [0], "output_dir": "x",
                                    "colour": "red"})
    with pytest.raises(StructuralError):
        ExperimentConfig.from_dict({"instance": {"kind": "random"}, "algorithm": {"kind": "api"},
                                    "seeds": [0], "output_dir": "x", "schema_version": 2})


def test_config_round_trip(tmp_path):
    cfg = api_config(tmp_path)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert ExperimentConfig.load(path).to_dict() == cfg.to_dict()


def test_repeated_runs_are_identical(tmp_path):
    a = run_experiment(api_config(tmp_path / "a", seeds=(0, 1), mode="random", eps=0.05, delta=0.05))
    b = run_experiment(api_config(tmp_path / "b", seeds=(0, 1), mode="random", eps=0.05, delta=0.05))
    a_files = {k: v for k, v in a["files"].items() if k != "config.json"}
    b_files = {k: v for k, v in b["files"].items() if k != "config.json"}
    assert a_files == b_files


def test_parallel_matches_serial(tmp_path):
    serial = api_config(tmp_path / "s", seeds=(0, 1, 2), mode="worst", eps=0.05, delta=0.02)
    parallel = api_config(tmp_path / "p", seeds=(0, 1, 2), mode="worst", eps=0.05, delta=0.02)
    parallel.workers = 2
    a, b = run_experiment(serial), run_experiment(parallel)
    assert {k: v for k, v in a["files"].items() if k.startswith("traces")} == \
        {k: v for k, v in b["files"].items() if k.startswith("traces")}


def test_build_instance_from_file_and_grid(tmp_path):
    save_mdp(generate_random_mdp(RandomMdpSpec(3, 2, seed=0)), tmp_path / "m.json")
    mdp, recs = build_instance({"kind": "file", "path": str(tmp_path / "m.json")}, {"eps": 0.05, "kappa": 0.1})
    assert mdp.n_states == 3 and len(recs) == 2
    grid, recs = build_instance({"kind": "gridworld", "width": 2, "height": 2, "rewards": [[0, 0, 1.0]]},
                                {"eps": None, "kappa": 0.2})
    assert grid.n_actions == 4 and [r["kind"] for r in recs] == ["aperiodicity"]


def test_td_scale_sets_step_constants_from_uniform_policy():
    from avgrl.harness import _td_config
    from avgrl.mdp import StochasticPolicy
    from avgrl.rl import conditioned_td_config

    mdp = generate_random_mdp(RandomMdpSpec(4, 2, seed=1))
    uniform = StochasticPolicy.uniform(4, 2)
    assert _td_config({"td_scale": 2.0}, mdp) == conditioned_td_config(mdp, uniform, lam=0.5, scale=2.0)
    plain = _td_config({}, mdp)
    assert (plain.c1, plain.c2) == (1.0, 10.0)


def test_regret_summary_reports_both_slopes(tmp_path):
    cfg = ExperimentConfig(instance={"kind": "random", "n_states": 3, "n_actions": 2, "seed": 0},
                           algorithm={"kind": "regret", "K": [500, 2000], "td_scale": 1.0},
                           seeds=[0], output_dir=str(tmp_path))
    run_experiment(cfg)
    rows = list(csv.DictReader((tmp_path / "summary.csv").open()))
    assert [int(r["K_nominal"]) for r in rows] == [500, 2000]
    assert all(int(r["K"]) <= int(r["K_nominal"]) for r in rows)
    assert rows[0]["slope"] and rows[0]["slope_nominal"]
