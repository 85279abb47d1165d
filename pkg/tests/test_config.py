import pytest

from sugdg.config import TrainConfig, load_config, save_config
from sugdg.errors import ConfigError, LoadError


def test_round_trip(tmp_path):
    cfg = TrainConfig(lam=0.25, K=3, batch_size=12, kernel_multipliers=(0.5, 1.0), sda=False, split_method="entropy")
    save_config(cfg, tmp_path / "c.cfg")
    loaded = load_config(tmp_path / "c.cfg")
    assert loaded == cfg
    assert loaded.digest() == cfg.digest()
    assert cfg.digest() != TrainConfig().digest()


def test_unknown_duplicate_and_missing_keys():
    text = TrainConfig().to_text()
    with pytest.raises(LoadError, match="unknown key"):
        TrainConfig.from_text(text + "gamma = 1\n")
    with pytest.raises(LoadError, match="duplicate"):
        TrainConfig.from_text(text + "lam = 1.0\n")
    trimmed = "\n".join(l for l in text.splitlines() if not l.startswith("lam "))
    with pytest.raises(LoadError, match="lam"):
        TrainConfig.from_text(trimmed)
    with pytest.raises(LoadError, match="header"):
        TrainConfig.from_text("lam = 1\n")
    with pytest.raises(LoadError, match="bad value"):
        TrainConfig.from_text(text.replace("K = 2", "K = two"))


def test_comments_and_blank_lines_ignored():
    text = TrainConfig().to_text().replace("q = 0.2", "\n# weighting\nq = 0.3  # sharper")
    assert TrainConfig.from_text(text).q == 0.3


@pytest.mark.parametrize(
    "change",
    [dict(q=-1), dict(lam=-0.1), dict(batch_size=7), dict(K=4, batch_size=4), dict(split_method="x"),
     dict(sda_mode="pairs"), dict(kernel_multipliers=(0.0,)), dict(embed_widths=(2, 8))],
)
def test_validation(change):
    with pytest.raises(ConfigError):
        TrainConfig(**change)


def test_streams_are_independent_and_reproducible():
    cfg = TrainConfig(seed=4)
    a = cfg.stream("split").generate_state(2).tolist()
    assert a == cfg.stream("split").generate_state(2).tolist()
    assert a != cfg.stream("init").generate_state(2).tolist()
    assert a != cfg.with_(seed=5).stream("split").generate_state(2).tolist()
    assert cfg.stream("shuffle", 1).generate_state(1) != cfg.stream("shuffle", 2).generate_state(1)
