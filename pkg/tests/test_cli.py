import json
from pathlib import Path

import numpy as np
import pytest

from geco.cli import EXIT_ACCEPTANCE, EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, gradcheck_net, main
from geco.net import NetworkSpec, init_network, load_checkpoint

TINY = """
seed = {seed}
head = "{head}"
output_dir = "{out}"

[task]
n_conditions = 30

[train]
steps = 40
batch_size = 16
hidden_dims = [16]
log_every = 10
decay_onset = 0.8

[infer]
K_max = 8

[eval]
id_episodes = 3
ood_episodes = 3
rollout_episodes = 2
budgets = [2, 4]
baseline_steps = 3
oracle_points = 5
oracle_nodes = 64
T_total = 40
"""


def write_cfg(tmp_path, head="geco", seed=0, name=None):
    path = tmp_path / (name or f"{head}-{seed}.toml")
    path.write_text(TINY.format(seed=seed, head=head, out=tmp_path / "runs"))
    return path


def run_dir_of(capsys):
    out = capsys.readouterr().out.strip().splitlines()
    return Path(json.loads(out[-1])["run_dir"])


@pytest.fixture
def trained(tmp_path, capsys):
    dirs = {}
    for head in ("geco", "rectified_flow"):
        assert main(["train", str(write_cfg(tmp_path, head))]) == EXIT_OK
        dirs[head] = run_dir_of(capsys)
    return dirs


def test_train_writes_run_directory(trained):
    run = trained["geco"]
    for name in ("config.toml", "seed.txt", "version.json", "checkpoint.bin", "log.jsonl", "train_summary.json"):
        assert (run / name).exists(), name
    assert run.name.startswith("geco-") and run.name.endswith("-s0")
    _, spec, meta = load_checkpoint((run / "checkpoint.bin").read_bytes())
    assert spec.input_dim == 34 and meta["head"] == "geco"
    _, rf_spec, _ = load_checkpoint((trained["rectified_flow"] / "checkpoint.bin").read_bytes())
    assert rf_spec.input_dim == 32 + 2 + 1


def test_train_is_deterministic(tmp_path, capsys):
    digests = []
    for i in range(2):
        sub = tmp_path / f"r{i}"
        sub.mkdir()
        assert main(["train", str(write_cfg(sub))]) == EXIT_OK
        digests.append(json.loads(capsys.readouterr().out)["checkpoint_sha256"])
    assert digests[0] == digests[1]


def test_rollout_budget_sweep_and_contract(trained, tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    ck = trained["geco"] / "checkpoint.bin"
    assert main(["rollout", str(cfg), "--checkpoint", str(ck)]) == EXIT_OK
    rows = [json.loads(l) for l in capsys.readouterr().out.strip().splitlines()]
    assert [r["budget"] for r in rows] == [2, 4]
    assert all(max(map(int, r["nfe_hist"])) <= r["budget"] for r in rows)
    csv_text = (trained["geco"] / "rollout-geco-ID" / "summary.csv").read_text()
    assert csv_text.splitlines()[0].startswith("episodes,success_rate")

    rf_cfg = write_cfg(tmp_path, "rectified_flow")
    rf_ck = trained["rectified_flow"] / "checkpoint.bin"
    assert main(["rollout", str(rf_cfg), "--checkpoint", str(rf_ck), "--split", "OOD"]) == EXIT_OK
    row = json.loads(capsys.readouterr().out)
    assert row["nfe_hist"] == {"3": row["planning_calls"]}


def test_rollout_zero_episodes(trained, tmp_path, capsys):
    assert main(["rollout", str(write_cfg(tmp_path)), "--checkpoint", str(trained["geco"] / "checkpoint.bin"), "--budget", "5", "--episodes", "0"]) == EXIT_OK
    row = json.loads(capsys.readouterr().out)
    assert row["episodes"] == 0 and row["planning_calls"] == 0 and row["nfe_hist"] == {}


def test_rollout_summary_deterministic(trained, tmp_path, capsys):
    args = ["rollout", str(write_cfg(tmp_path)), "--checkpoint", str(trained["geco"] / "checkpoint.bin"), "--budget", "4"]
    main(args)
    first = capsys.readouterr().out
    main(args)
    assert capsys.readouterr().out == first


def test_rollout_rejects_mismatched_checkpoint(trained, tmp_path, capsys):
    other = tmp_path / "other.toml"
    other.write_text(TINY.format(seed=0, head="geco", out=tmp_path / "runs").replace("[task]", "[task]\nT_a = 8"))
    assert main(["rollout", str(other), "--checkpoint", str(trained["geco"] / "checkpoint.bin")]) == EXIT_VALIDATION
    assert "validation error" in capsys.readouterr().err


def test_eval_ood_and_report(trained, tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    code = main(["eval-ood", str(cfg), "--checkpoint", str(trained["geco"] / "checkpoint.bin"), "--baseline", str(trained["rectified_flow"] / "checkpoint.bin")])
    assert code == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    rows = [json.loads(l) for l in lines[:-1]]
    assert {(r["method"], r["scope"], r["detector"]) for r in rows} == {
        ("geco", "calls", "raw"), ("geco", "calls", "moving_average"), ("geco", "calls", "leaky_bucket"),
        ("geco", "refinement", "raw"), ("geco", "refinement", "moving_average"), ("geco", "refinement", "leaky_bucket"),
        ("fm_proxy", "calls", "raw"), ("fm_proxy", "calls", "moving_average"), ("fm_proxy", "calls", "leaky_bucket"),
    }
    assert (trained["geco"] / "eval-ood" / "metrics.csv").exists()
    out = tmp_path / "tables"
    assert main(["report", str(trained["geco"]), "--out", str(out)]) == EXIT_OK
    assert "auroc" in (out / "ood.csv").read_text().splitlines()[0]


def test_eval_ood_requires_matching_heads(trained, tmp_path):
    cfg = write_cfg(tmp_path)
    g = str(trained["geco"] / "checkpoint.bin")
    assert main(["eval-ood", str(cfg), "--checkpoint", g, "--baseline", g]) == EXIT_VALIDATION


def test_oracle_check_untrained_and_trained(trained, tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    zero = init_network(NetworkSpec(34, 32, (4,)), 0).zeros_like()
    from geco.net import save_checkpoint

    zpath = tmp_path / "zero.bin"
    zpath.write_bytes(save_checkpoint(zero, metadata={"head": "geco"}))
    assert main(["oracle-check", str(cfg), "--checkpoint", str(zpath)]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["cosine_median"] == 0.0 and report["euler_max_error"] < 1e-9
    assert main(["oracle-check", str(cfg), "--checkpoint", str(zpath), "--check"]) == EXIT_ACCEPTANCE


def test_gradcheck_commands(capsys):
    assert main(["gradcheck", "--nets", "3"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["passed"]
    assert main(["gradcheck", "--nets", "2", "--corrupt"]) == EXIT_ACCEPTANCE
    assert main(["gradcheck", "--nets", "1", "--zero"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1])["max_relative_error"] == 0.0


def test_gradcheck_helper_detects_corruption():
    p = init_network(NetworkSpec(3, 2, (4,)), 0)
    assert gradcheck_net(p, 0) < 1e-4
    assert gradcheck_net(p, 0, corrupt=True) > 1e-2


def test_exit_codes_for_bad_input(tmp_path, capsys):
    assert main(["train", str(tmp_path / "nope.toml")]) == EXIT_VALIDATION
    bad = tmp_path / "bad.toml"
    bad.write_text("seed = 1\n[train]\ndecay_onst = 0.8\n")
    assert main(["train", str(bad)]) == EXIT_VALIDATION
    assert "bad.toml:3" in capsys.readouterr().err
    assert main(["frobnicate"]) == EXIT_VALIDATION
    cfg = write_cfg(tmp_path)
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"not a checkpoint")
    assert main(["rollout", str(cfg), "--checkpoint", str(junk)]) == EXIT_VALIDATION


def test_runtime_error_exit_code(tmp_path, monkeypatch):
    import geco.cli as cli

    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli, "train", boom)
    assert main(["train", str(write_cfg(tmp_path))]) == EXIT_RUNTIME


def test_env_overrides(trained, tmp_path, capsys, monkeypatch):
    root = tmp_path / "override"
    monkeypatch.setenv("GECO_OUTPUT_ROOT", str(root))
    assert main(["train", str(write_cfg(tmp_path))]) == EXIT_OK
    assert run_dir_of(capsys).parent == root
    monkeypatch.setenv("GECO_WORKERS", "zero")
    ck = str(trained["geco"] / "checkpoint.bin")
    assert main(["rollout", str(write_cfg(tmp_path)), "--checkpoint", ck, "--episodes", "0"]) == EXIT_VALIDATION
    assert "GECO_WORKERS" in capsys.readouterr().err
    monkeypatch.setenv("GECO_WORKERS", "2")
    assert main(["rollout", str(write_cfg(tmp_path)), "--checkpoint", ck, "--budget", "3"]) == EXIT_OK
