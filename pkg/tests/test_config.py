import pytest

from lvt.config import SYSTEM_PROMPT, ConfigError, RunConfig, load_config, parse_config_text, parse_overrides


def test_defaults_validate():
    cfg = RunConfig()
    assert cfg.k_latent == 4 and cfg.lam == 0.3 and cfg.system_prompt == SYSTEM_PROMPT
    assert cfg.effective_topk == 8


def test_topk_clamped_to_half_the_patches():
    assert RunConfig(grid_rows=3, grid_cols=3).effective_topk == 4


def test_comments_and_types():
    vals = parse_config_text("# header\nlam = 0.5  # weight\nuse_traj = false\n\nk_latent=6\n")
    assert vals == {"lam": 0.5, "use_traj": False, "k_latent": 6}


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigError, match="unknown"):
        parse_config_text("lamda = 0.3")
    with pytest.raises(ConfigError):
        parse_overrides(["--nope", "1"])


def test_bad_values():
    with pytest.raises(ConfigError):
        parse_config_text("k_latent = four")
    with pytest.raises(ConfigError):
        parse_config_text("just words")
    with pytest.raises(ConfigError, match="warmup"):
        RunConfig(warmup_steps=500, total_steps=100)
    with pytest.raises(ConfigError):
        RunConfig(lam=-1.0)


def test_overrides_win_over_file(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("lam = 0.1\nseed = 4\n")
    cfg = load_config(p, ["--lam", "0.7", "--k-latent=8"])
    assert (cfg.lam, cfg.seed, cfg.k_latent) == (0.7, 4, 8)


def test_snapshot_round_trips(tmp_path):
    cfg = RunConfig(seed=9, lam=0.25, single_stage=True)
    p = tmp_path / "snap.txt"
    p.write_text(cfg.to_text())
    assert load_config(p) == cfg


def test_system_prompt_keeps_hash():
    assert parse_config_text("system_prompt = look # carefully")["system_prompt"] == "look # carefully"
