import pytest

from protorecon.cli import build_parser, _config
from protorecon.config import TrainConfig, parse_kv_text
from protorecon.errors import ConfigError

PUBLISHED = dict(batch_size=32, lr_start=1e-3, lr_end=1e-4, lambda_d=1e-3, lambda_u=5.0, delta=0.3, iou_t=0.3,
             alpha0=0.9996, k=3, heads=2)


def test_defaults_carry_the_published_hyperparameters():
    cfg = TrainConfig()
    for name, value in PUBLISHED.items():
        assert getattr(cfg, name) == value, name
    assert (cfg.warmup_epochs, cfg.mutual_epochs) == (40, 20)
    assert (cfg.query_dim, cfg.token_dim) == (256, 128)


def test_text_roundtrip(tmp_path):
    cfg = TrainConfig(seed=4, use_pam=False, fusion="average", enc2d_channels=(8, 8, 16, 16))
    path = tmp_path / "run.cfg"
    path.write_text(cfg.to_text())
    assert TrainConfig.from_file(path) == cfg
    assert TrainConfig.from_file(path).to_text() == cfg.to_text()


def test_parse_comments_and_blank_lines():
    values = parse_kv_text("# header\n\nseed = 3  # trailing\nfusion=average\n")
    assert values == {"seed": "3", "fusion": "average"}
    with pytest.raises(ConfigError, match="<config>:1"):
        parse_kv_text("not a pair")


@pytest.mark.parametrize("bad", [{"seed": "x"}, {"use_pam": "maybe"}, {"tilt": "1"}, {"alpha0": "1.5"},
                                 {"fusion": "lstm"}, {"unsup_loss": "huber"}, {"lambda_u": "0"}])
def test_bad_values_are_config_errors(bad):
    with pytest.raises(ConfigError):
        TrainConfig.from_dict(bad)


def test_missing_file():
    with pytest.raises(ConfigError, match="not found"):
        TrainConfig.from_file("/nonexistent/x.cfg")


def test_cli_flags_override_the_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 1\nalpha0 = 0.99\nuse_score = true\n")
    args = build_parser().parse_args(["warmup", "--manifest", "m", "--bank", "b", "--out", "o", "--config", str(path),
                                      "--seed", "7", "--no-score", "--set", "lambda_u=2.5", "--fusion", "average"])
    cfg = _config(args)
    assert (cfg.seed, cfg.alpha0, cfg.use_score, cfg.lambda_u, cfg.fusion) == (7, 0.99, False, 2.5, "average")


def test_resume_keeps_the_checkpoint_config_unless_overridden():
    base = TrainConfig(seed=9, lambda_u=3.0)
    args = build_parser().parse_args(["mutual", "--resume", "r", "--out", "o", "--alpha0", "1.0"])
    cfg = _config(args, base=base)
    assert (cfg.seed, cfg.lambda_u, cfg.alpha0) == (9, 3.0, 1.0)
