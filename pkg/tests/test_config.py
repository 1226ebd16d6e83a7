import inspect
import re
from pathlib import Path

import pytest

from app.config import (
    ModelConfig,
    RunConfig,
    Settings,
    TrainConfig,
    load_run_config,
    parse_run_config,
    settings,
)
from app.errors import ConfigError

SAMPLE = """
# toy run
output_dir = runs/toy
gen.vocab_size = 10
gen.reorder_rule = local_swap   # swap two words
gen.window = 3
model.embed_dim = 32
model.heads = 4
train.max_lr = 1e-3
"""


def test_parse_run_config():
    cfg = parse_run_config(SAMPLE)
    assert cfg.output_dir == "runs/toy"
    assert cfg.gen.reorder_rule == "local_swap"
    assert cfg.gen.window == 3
    assert cfg.model.embed_dim == 32
    assert cfg.train.max_lr == 1e-3
    # blank, pad, 10 source words, 10 target words
    assert cfg.model.vocab_size == 22


def test_load_run_config(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(SAMPLE)
    assert load_run_config(path) == parse_run_config(SAMPLE)


@pytest.mark.parametrize("text, key", [
    ("gen.colour = red", "gen.colour"),
    ("optimizer.lr = 1", "optimizer.lr"),
    ("gen.vocab_size = ten", "gen.vocab_size"),
    ("gen.reorder_rule = shuffle", "gen.reorder_rule"),
    ("model.embed_dim = 30\nmodel.heads = 4", "model.heads"),
    ("asn.temperature = 0", "asn.temperature"),
    ("train.phase = finetune", "train.phase"),
    ("gen.distance = 9", "gen.distance"),
])
def test_invalid_values_name_their_key(text, key):
    with pytest.raises(ConfigError) as err:
        parse_run_config(text)
    assert err.value.key == key
    assert key in str(err.value)


def test_lines_must_be_assignments():
    with pytest.raises(ConfigError):
        parse_run_config("gen.vocab_size 10")


def test_model_vocabulary_must_cover_the_corpus():
    with pytest.raises(ConfigError) as err:
        parse_run_config("gen.vocab_size = 10\nmodel.vocab_size = 12")
    assert err.value.key == "model.vocab_size"


def test_digest_is_stable_and_sensitive():
    a = parse_run_config(SAMPLE)
    b = parse_run_config(SAMPLE)
    assert a.digest() == b.digest()
    b.train.seed = 2
    assert a.digest() != b.digest()


def test_dict_round_trip():
    cfg = parse_run_config(SAMPLE)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


def test_reference_presets():
    model = ModelConfig.reference(vocab_size=100).validate()
    assert (model.embed_dim, model.ffn_dim, model.heads, model.layers) == (512, 2048, 8, 6)
    train = TrainConfig.reference().validate()
    assert train.max_steps == 300_000 and train.patience_steps == 25_000


def test_documented_environment_matches_settings():
    readme = (Path(__file__).resolve().parents[1] / "README.md").read_text(encoding="utf-8")
    section = readme.split("### Environment Variables")[1].split("###")[0]
    documented = set(re.findall(r"^- `([A-Z_]+)`:", section, flags=re.MULTILINE))
    read = set(re.findall(r'os\.getenv\("([A-Z_]+)"', inspect.getsource(Settings)))
    assert documented == read == {"LOG_LEVEL", "SIMT_LOG_DIR", "SIMT_METRICS_PORT"}
    assert not hasattr(settings, "DEVICE")
