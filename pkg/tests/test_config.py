import pytest

from geco.config import dump_config, load_config, parse_config
from geco.errors import ConfigError


def test_minimal_config_uses_defaults():
    cfg = parse_config("seed = 3\n")
    assert cfg.seed == 3 and cfg.head == "geco"
    assert cfg.train.decay.onset == 0.1 and cfg.train.steps == 20000 and cfg.train.batch_size == 64
    assert cfg.infer.K_max == 30 and cfg.infer.tau_opt == 0.4
    assert (cfg.eval.id_episodes, cfg.eval.ood_episodes) == (500, 500)
    assert cfg.protocol.T_a == 16 and cfg.protocol.T_total == 300


def test_round_trip_through_dump():
    text = "seed = 1\nhead = 'rectified_flow'\n[train]\ndecay_onset = 0.8\nhidden_dims = [32, 32]\n[infer]\nK_max = 10\n"
    cfg = parse_config(text)
    assert parse_config(dump_config(cfg)) == cfg
    assert cfg.train.head == "rectified_flow" and cfg.train.hidden_dims == (32, 32)


def test_missing_required_field_is_named():
    with pytest.raises(ConfigError, match="seed: required"):
        parse_config("[train]\nsteps = 3\n")


@pytest.mark.parametrize(
    "text, where",
    [
        ("seed = 1\n[train]\ndecay_onst = 0.8\n", "x.toml:3: train.decay_onst: unknown key"),
        ("seed = 1\nsed = 2\n", "x.toml:2: sed: unknown key"),
        ("seed = 1\n\n[trian]\nsteps = 1\n", "x.toml:3: trian: unknown section"),
        ("seed = 1.5\n", "x.toml:1: seed: expected an integer"),
        ("seed = 1\n[infer]\nK_max = 0\n", "x.toml:3: infer.K_max"),
        ("seed = 1\nhead = 'ddpm'\n", "x.toml:2: head: must be one of"),
        ("seed = 1\n[task]\nood_radii = [0.8, 2.0]\n", "x.toml:3: task"),
    ],
)
def test_line_level_diagnostics(text, where):
    with pytest.raises(ConfigError) as info:
        parse_config(text, "x.toml")
    assert where in str(info.value)


def test_syntax_error_and_unreadable_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config("seed = = 1\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")


def test_run_name_depends_on_content_and_seed():
    a, b = parse_config("seed = 1\n"), parse_config("seed = 2\n")
    c = parse_config("seed = 1\n[train]\ndecay_onset = 0.8\n")
    d = parse_config("seed = 1\noutput_dir = 'elsewhere'\n")
    assert a.digest() == b.digest() and a.run_name() != b.run_name()
    assert a.digest() != c.digest()
    assert a.run_name() == d.run_name()
