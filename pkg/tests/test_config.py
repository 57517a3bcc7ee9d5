import pytest

from hashqa.config import BETA_GRID, DELTA_GRID, TrainConfig, load_config, parse_config_text
from hashqa.errors import InputError, ParseError


def test_defaults_and_grids():
    cfg = TrainConfig()
    assert cfg.beta in BETA_GRID and cfg.delta in DELTA_GRID
    assert BETA_GRID == (1, 2, 5, 10, 20)
    assert DELTA_GRID == (0, 1e-7, 1e-6, 1e-5, 1e-4)
    assert cfg.margin == 0.1 and cfg.weight_decay == 0.01


@pytest.mark.parametrize("bad", [{"beta": 0.5}, {"delta": -1.0}, {"margin": 0.0}, {"D": 0}, {"layers": -1}, {"frozen": ("bogus",)}])
def test_validation(bad):
    with pytest.raises(InputError):
        TrainConfig(**bad)


def test_text_round_trip(tmp_path):
    cfg = TrainConfig(beta=10.0, delta=1e-5, frozen=("encoder",), delta_grid=(0.0, 1e-4), epochs=3)
    cfg.save(tmp_path / "c.txt")
    assert load_config(tmp_path / "c.txt") == cfg


def test_parse_comments_and_types():
    values = parse_config_text("# header\nbeta = 2   # inline\n\nepochs=7\nfrozen = encoder, attention\n")
    assert values == {"beta": 2.0, "epochs": 7, "frozen": ("encoder", "attention")}
    assert isinstance(values["epochs"], int)


@pytest.mark.parametrize("text,line", [("beta = 2\nnonsense\n", 2), ("colour = red\n", 1), ("epochs = many\n", 1)])
def test_parse_errors(text, line):
    with pytest.raises(ParseError) as info:
        parse_config_text(text)
    assert info.value.line == line


def test_overrides_win(tmp_path):
    (tmp_path / "c.txt").write_text("beta = 2\nseed = 4\n")
    cfg = load_config(tmp_path / "c.txt", beta=10, seed=None)
    assert cfg.beta == 10.0 and cfg.seed == 4
