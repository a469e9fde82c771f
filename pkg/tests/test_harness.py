import json

import numpy as np
import pytest

from dqnf import nn
from dqnf.agent import DQNAgent
from dqnf.envs import make_gridrooms
from dqnf.harness import cli, oracle, reports
from dqnf.harness.runner import (CSV_HEADER, ConfigError, RunConfig, load_manifest_config, make_env,
                                 run_experiment, train)


def tiny_config(tmp_path, frontier=True, seeds=(0, 1), **env):
    doc = {
        "env": {"name": "gridrooms", "map": "rooms5", "k": 2, "max_steps": 40, **env},
        "agent": {"lr_start": 1e-3, "lr_end": 1e-4, "train_every": 4, "target_update": 50,
                  "learn_start": 100},
        "frontier": {"classifier_lr": 1e-3} if frontier else "disabled",
        "total_steps": 600,
        "seeds": list(seeds),
        "output_dir": str(tmp_path / "runs"),
        "precision": "float64",
    }
    return RunConfig.from_dict(doc, tmp_path)


def test_manifest_round_trip(tmp_path):
    cfg = tiny_config(tmp_path, seeds=(0,))
    run_experiment(cfg)
    assert load_manifest_config(tmp_path / "runs" / "seed0" / "manifest.json") == cfg


def test_config_errors(tmp_path):
    base = {"env": {"name": "gridrooms"}, "total_steps": 10, "seeds": [0]}
    with pytest.raises(ConfigError):
        RunConfig.from_dict({**base, "seeds": []})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({**base, "env": {"name": "gridrooms", "map": "missing.txt"}}, tmp_path)
    with pytest.raises(ConfigError):
        RunConfig.from_dict({**base, "agent": {"bogus": 1}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({**base, "env": {"name": "atari"}})


def test_map_file_resolved_relative_to_config(tmp_path):
    (tmp_path / "m.txt").write_text("#####\n#00G#\n#####\n")
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"env": {"name": "gridrooms", "map": "m.txt"}, "total_steps": 5, "seeds": [0]}))
    env = make_env(RunConfig.load(path).env)
    assert env.layout.goal == (1, 3)


def test_output_contract_and_integrity(tmp_path):
    cfg = tiny_config(tmp_path, seeds=range(5))
    results = run_experiment(cfg)
    assert [r.status for r in results] == ["ok"] * 5
    for s in range(5):
        d = tmp_path / "runs" / f"seed{s}"
        assert (d / "metrics.csv").read_text().splitlines()[0] == ",".join(CSV_HEADER)
        manifest = json.loads((d / "manifest.json").read_text())
        m = reports.load_metrics(d / "metrics.csv")
        assert np.all(np.diff(m["env_steps"]) > 0) and np.all(m["forbidden_count"] >= 0)
        assert m["forbidden_count"].sum() == manifest["summary"]["env_rejections"]
        assert m["env_steps"][-1] == 600
        assert manifest["wall_clock_s"] > 0 and manifest["status"] == "ok"


def test_divergence_is_recorded_and_other_seeds_continue(tmp_path, monkeypatch):
    original = DQNAgent.train_step

    def exploding(self, batch):
        if self.online.params.seed == 1:
            raise nn.DivergenceError("non-finite composite loss")
        return original(self, batch)

    monkeypatch.setattr(DQNAgent, "train_step", exploding)
    results = run_experiment(tiny_config(tmp_path, seeds=(0, 1)))
    assert [r.status for r in results] == ["ok", "diverged"]
    manifest = json.loads((tmp_path / "runs" / "seed1" / "manifest.json").read_text())
    assert manifest["status"] == "diverged" and "non-finite" in manifest["error"]


def test_ablation_isolation_all_valid_env(tmp_path):
    """With a single room type nothing is ever rejected, so both variants train identically."""
    (tmp_path / "open.txt").write_text("#####\n#000#\n#00G#\n#####\n")
    rows = {}
    for frontier in (True, False):
        cfg = tiny_config(tmp_path, frontier, seeds=(0,), map="open.txt", k=1)
        agent, _, rows[frontier] = train(cfg, 0)
        rows[frontier] = json.dumps([{k: v for k, v in r.items() if k not in ("frontier_loss", "classifier_acc")}
                                     for r in rows[frontier]])
        rows[(frontier, "params")] = agent.online.params
    assert rows[True] == rows[False]
    assert rows[(True, "params")].equals(rows[(False, "params")])


def test_ablation_isolation_until_first_rejection_sampled(tmp_path):
    cfgs = [tiny_config(tmp_path, f, seeds=(0,)) for f in (True, False)]
    env_a, env_b = make_env(cfgs[0].env), make_env(cfgs[1].env)
    from dqnf.harness.runner import build_agent
    a, b = build_agent(cfgs[0], env_a, 0), build_agent(cfgs[1], env_b, 0)
    seen_rejection = False
    oa, ob = env_a.reset(5), env_b.reset(5)
    for _ in range(600):
        act_a, act_b = a.act(oa), b.act(ob)
        assert act_a == act_b or seen_rejection
        sa, sb = env_a.step(act_a), env_b.step(act_b)
        ra, rb = a.observe(oa, act_a, sa), b.observe(ob, act_b, sb)
        if ra is not None and not seen_rejection:
            # a batch with a rejected transition produces a non-zero frontier loss or the same params
            seen_rejection = ra.frontier_loss > 0
            if not seen_rejection:
                assert a.online.params.equals(b.online.params)
        oa, ob = sa.observation, sb.observation
        if sa.done:
            oa, ob = env_a.reset(7), env_b.reset(7)
    assert seen_rejection


def _fake_run(path, steps, success, forbidden):
    path.mkdir(parents=True)
    lines = [",".join(CSV_HEADER)]
    for i, (t, s, f) in enumerate(zip(steps, success, forbidden)):
        lines.append(f"{i},{t},{s},{s},{f},0.1,nan,nan,0.05,1e-05")
    (path / "metrics.csv").write_text("\n".join(lines) + "\n")


def test_compare_identity_and_grid(tmp_path):
    rng = np.random.default_rng(0)
    for s in range(3):
        steps = np.cumsum(rng.integers(5, 40, size=200))
        _fake_run(tmp_path / "a" / f"seed{s}", steps, rng.integers(2, size=200), rng.integers(0, 9, size=200))
    cmp = reports.compare_runs(tmp_path / "a", tmp_path / "a", stride=100)
    for d in cmp.series.values():
        assert np.all(d["diff"] == 0)
    end = min(reports.load_metrics(f)["env_steps"][-1] for f in reports.find_metric_files([tmp_path / "a"]))
    assert cmp.grid[0] == 0 and cmp.grid[-1] <= end < cmp.grid[-1] + 100


def test_compare_refuses_single_seed_and_bad_schema(tmp_path):
    _fake_run(tmp_path / "one" / "seed0", [10, 20], [0, 1], [1, 2])
    with pytest.raises(reports.MetricsError):
        reports.compare_runs(tmp_path / "one", tmp_path / "one")
    bad = tmp_path / "bad" / "seed0"
    bad.mkdir(parents=True)
    (bad / "metrics.csv").write_text("episode,steps\n0,1\n")
    with pytest.raises(reports.MetricsError):
        reports.load_metrics(bad / "metrics.csv")


def test_plot_data_contract(tmp_path):
    rng = np.random.default_rng(1)
    for s in range(4):
        steps = np.cumsum(rng.integers(5, 40, size=100))
        _fake_run(tmp_path / "r" / f"seed{s}", steps, rng.integers(2, size=100), rng.integers(0, 5, size=100))
    files = reports.find_metric_files([tmp_path / "r"])
    out = tmp_path / "sr.dat"
    agg = reports.emit_plot_data(files, "success_rate", out, stride=50)
    rows = np.loadtxt(out)
    assert len(rows) == len(agg.grid)
    assert np.all((rows[:, 1:4] >= 0) & (rows[:, 1:4] <= 1))
    assert np.all(rows[:, 2] <= rows[:, 1] + 1e-12) and np.all(rows[:, 1] <= rows[:, 3] + 1e-12)
    with pytest.raises(reports.MetricsError, match="valid metrics"):
        reports.emit_plot_data(files, "bogus", out)


def test_oracle_values():
    env = make_gridrooms("rooms8", k=5)
    table = oracle.value_iteration_oracle(env)
    # (5, 4) faces south onto the goal; room type 3 -> forward is action 11
    assert table.q((5, 4), 1)[11] == pytest.approx(1.0)
    # (4, 4) heading south: forward reaches (5, 4) then the goal
    assert table.q((4, 4), 1)[11] == pytest.approx(0.99)
    for i, (pos, d) in enumerate(table.states):
        valid = sorted(env.valid_actions(env_state(env, pos, d)))
        best = table.values[i, valid].max()
        forbidden = [a for a in range(15) if a not in valid]
        np.testing.assert_allclose(table.values[i, forbidden], 0.99 * best)
        assert np.all(table.values[i, forbidden] < best)


def env_state(env, pos, d):
    from dqnf.envs.gridrooms import GridRoomsState
    return GridRoomsState(pos, d)


def test_oracle_refuses_large_maps():
    with pytest.raises(oracle.OracleRefusal, match="exceed"):
        oracle.value_iteration_oracle(make_gridrooms("rooms8"), max_states=10)


def test_oracle_path_lengths_agree_with_values():
    env = make_gridrooms("rooms5", k=2)
    table = oracle.value_iteration_oracle(env)
    for (pos, d), length in oracle.optimal_path_lengths(env).items():
        assert table.q(pos, d).max() == pytest.approx(0.99 ** (length - 1))
    # the oracle's own greedy policy is optimal from every start
    def policy(obs):
        s = env.state
        return table.greedy(s.pos, s.direction)
    frac, mismatches = oracle.path_length_agreement(policy, env)
    assert frac == 1.0 and not mismatches


def test_separation_report_rows_and_chance_level():
    env = make_gridrooms("rooms8", k=5)
    net = nn.Network.build(nn.conv_chain(27, 15), 0)
    rep = reports.q_separation_report(net, env, 50, seed=0)
    assert len(rep.rows) == 50
    assert rep.fraction < 0.5      # an untrained net rarely ranks all 12 rejected actions last


def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main(["train", "--config", str(tmp_path / "missing.json")]) == 1
    cfg = tiny_config(tmp_path, seeds=(0, 1))
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert cli.main(["train", "--config", str(path)]) == 0
    ckpt = tmp_path / "runs" / "seed0" / "checkpoint.json"
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--episodes", "3"]) == 0
    assert cli.main(["inspect-q", "--checkpoint", str(ckpt), "--states", "10"]) == 0
    assert cli.main(["compare", str(tmp_path / "runs"), str(tmp_path / "runs")]) == 0
    assert cli.main(["plot", "--metric", "lr", "--out", str(tmp_path / "lr.dat"), str(tmp_path / "runs")]) == 0
    assert cli.main(["plot", "--metric", "nope", str(tmp_path / "runs")]) == 1
    assert cli.main(["oracle", "--env", str(path)]) == 0
    assert "optimal_length" in capsys.readouterr().out


def test_cli_divergence_exit_code(tmp_path, monkeypatch):
    monkeypatch.setattr(DQNAgent, "train_step", lambda self, b: (_ for _ in ()).throw(nn.DivergenceError("x")))
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(tiny_config(tmp_path, seeds=(0,)).to_dict()))
    assert cli.main(["train", "--config", str(path)]) == 2
