import pytest

from madiff.config import load_config
from madiff.errors import ConfigurationError


def test_defaults():
    cfg = load_config(environ={})
    assert cfg.seed == 0 and cfg.edit.T == 1000 and cfg.train.lr == 0.5
    assert cfg.llm_endpoint is None


def test_file_and_overrides(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text('seed = 5\n[edit]\nS = 10\nmask_source = "foreground"\n[train]\nepochs = 3\n[eval]\nnoise_levels = [0.0, 0.25]\n')
    cfg = load_config(p, {"edit.S": 12, "train.lr": None}, environ={"MADIFF_LLM_ENDPOINT": "http://h/x"})
    assert cfg.seed == 5 and cfg.edit.seed == 5 and cfg.train.seed == 5
    assert cfg.edit.S == 12 and cfg.edit.mask_source == "foreground"
    assert cfg.train.epochs == 3 and cfg.train.lr == 0.5
    assert cfg.eval.noise_levels == (0.0, 0.25)
    assert cfg.llm_endpoint == "http://h/x"
    assert cfg.to_dict()["eval"]["noise_levels"] == [0.0, 0.25]


def test_section_seed_wins(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text("seed = 5\n[edit]\nseed = 9\n")
    assert load_config(p, environ={}).edit.seed == 9


@pytest.mark.parametrize(
    "text",
    ["[edit]\nbogus = 1\n", "[nosuch]\nx = 1\n", "[edit]\nmask_source = 'oracle'\n", "seed = \n"],
)
def test_bad_files(tmp_path, text):
    p = tmp_path / "bad.toml"
    p.write_text(text)
    with pytest.raises(ConfigurationError):
        load_config(p, environ={})


def test_bad_override_key():
    with pytest.raises(ConfigurationError):
        load_config(None, {"nosection": 1}, environ={})
