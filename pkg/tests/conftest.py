import os
import tempfile

os.environ.setdefault("SIMT_LOG_DIR", tempfile.mkdtemp(prefix="simt-logs-"))

import pytest  # noqa: E402
import torch  # noqa: E402

from app.config import AsnConfig, GenConfig, ModelConfig, RunConfig, TrainConfig  # noqa: E402
from app.data import generate_corpus  # noqa: E402
from app.model import build_model  # noqa: E402


@pytest.fixture
def model_cfg():
    return ModelConfig(vocab_size=14, embed_dim=8, ffn_dim=16, heads=2, layers=2, dropout=0.0,
                       delay_k=1, upsample_ratio=2, max_positions=64).validate()


@pytest.fixture
def asn_cfg():
    return AsnConfig(decoder_layers=1).validate()


@pytest.fixture
def model(model_cfg):
    return build_model(model_cfg, None, seed=3).eval()


@pytest.fixture
def sorter_model(model_cfg, asn_cfg):
    return build_model(model_cfg, asn_cfg, seed=3).eval()


@pytest.fixture
def gen_cfg():
    return GenConfig(vocab_size=6, min_length=8, max_length=10, reorder_rule="block_move",
                     distance=5, block=2, seed=7, train_size=40, valid_size=8, test_size=8).validate()


@pytest.fixture
def corpus(gen_cfg):
    return generate_corpus(gen_cfg, 24)


@pytest.fixture
def run_cfg(tmp_path, gen_cfg):
    cfg = RunConfig(
        output_dir=str(tmp_path / "run"),
        gen=gen_cfg,
        model=ModelConfig(embed_dim=16, ffn_dim=32, heads=2, layers=1, dropout=0.0, max_positions=64),
        asn=AsnConfig(decoder_layers=1),
        train=TrainConfig(max_lr=1e-2, warmup_steps=5, max_steps=4, patience_steps=100,
                          validate_interval=2, log_interval=1, max_tokens=64, seed=5),
    )
    return cfg.validate()


@pytest.fixture
def random_source():
    gen = torch.Generator().manual_seed(11)

    def draw(length, low=2, high=8):
        return torch.randint(low, high, (length,), generator=gen).tolist()
    return draw
