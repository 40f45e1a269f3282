import json

import numpy as np
import pytest

from gridrl.cli import build_parser, main
from gridrl.rl import Hyperparams

CONFIG = """\
seed: 1
hp: {batch_size: 8, buffer_capacity: 128}
budgets: {demo_episodes: 1, pretrain_steps: 10, train_steps: 150}
train_chronics: {seeds: [100], horizon: 150}
demo_chronics: {seeds: [200], horizon: 300}
eval_chronics: {seeds: [0, 1], horizon: 150}
val_chronics: {seeds: [300], horizon: 150}
"""


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text(CONFIG + f"out_dir: {tmp_path / 'run'}\n")
    return p


def test_every_hyperparameter_has_a_flag():
    args = build_parser().parse_args(["train", "--lr", "0.01", "--n-step", "3", "--eps-half-life", "10"])
    assert args.hp_lr == 0.01 and args.hp_n_step == 3 and args.hp_eps_half_life == 10.0
    helptext = build_parser()._subparsers._group_actions[0].choices["train"].format_help()
    for name in Hyperparams().to_dict():
        assert f"--{name.replace('_', '-')}" in helptext


def test_gen_chronics(tmp_path, capsys):
    assert main(["gen-chronics", "--count", "2", "--horizon", "50", "--output", str(tmp_path / "ch")]) == 0
    assert len(list((tmp_path / "ch").iterdir())) == 2


def test_demo_pretrain_evaluate_pipeline(tmp_path, config, capsys):
    assert main(["expert-demo", "--config", str(config)]) == 0
    demos = tmp_path / "run/demos.jsonl"
    assert demos.exists()
    assert main(["pretrain", "--config", str(config), "--demos", str(demos)]) == 0
    ckpt = tmp_path / "run/pretrained.npz"
    assert ckpt.exists() and (tmp_path / "run/pretrain_metrics.csv").exists()
    capsys.readouterr()
    assert main(["evaluate", str(ckpt), "--output", str(tmp_path / "e.csv")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["n"] == 2 and "baseline_mean_survive_time" in summary
    assert len((tmp_path / "e.csv").read_text().splitlines()) == 3


def test_train_with_flag_overrides(tmp_path, config):
    out = tmp_path / "nodqfd"
    assert main(["train", "--config", str(config), "--no-dqfd", "--no-gnn", "--shaping", "static",
                 "--gamma", "0.95", "--train-steps", "60", "--out-dir", str(out)]) == 0
    assert (out / "metrics.csv").exists() and not (out / "demos.jsonl").exists()
    meta = np.load(out / "checkpoint.npz")["__header__"]
    cfg = json.loads(bytes(meta).decode())["meta"]["config"]
    assert cfg["hp"]["gamma"] == 0.95 and cfg["flags"]["gnn"] is False and cfg["budgets"]["train_steps"] == 60


def test_exports_and_bench(tmp_path, config, capsys):
    out = tmp_path / "t"
    assert main(["train", "--config", str(config), "--no-dqfd", "--train-steps", "20", "--out-dir", str(out)]) == 0
    ckpt = out / "checkpoint.npz"
    assert main(["export-heatmap", str(ckpt), "--output", str(tmp_path / "h.csv")]) == 0
    assert len((tmp_path / "h.csv").read_text().splitlines()) == 65
    assert main(["export-graph", "--config", str(config), "--t", "3", "--edges", str(tmp_path / "e.csv"),
                 "--features", str(tmp_path / "f.csv")]) == 0
    assert len((tmp_path / "f.csv").read_text().splitlines()) == 21
    capsys.readouterr()
    states = tmp_path / "s.jsonl"
    assert main(["bench-inference", str(ckpt), "--n-states", "5", "--repeats", "1", "--states", str(states)]) == 0
    assert states.exists()
    res = json.loads(capsys.readouterr().out)
    assert res["expert_over_agent_nofilter"] > 1.0


def test_missing_subcommand():
    with pytest.raises(SystemExit):
        main([])
