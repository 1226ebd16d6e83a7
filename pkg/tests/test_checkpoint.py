import dataclasses

import pytest
import torch

from app.checkpoint import TrainState, capture, load_checkpoint, save_checkpoint
from app.errors import CheckpointError
from app.model import build_model


def _config_for(run_cfg, model):
    return dataclasses.replace(run_cfg, model=model.cfg)


def test_full_checkpoint_round_trip(tmp_path, run_cfg, sorter_model):
    state = TrainState(step=7, epoch=1, cursor=3, best_bleu=12.5, best_step=5, phase="asn_finetune")
    ckpt = capture(sorter_model, state, _config_for(run_cfg, sorter_model), rng=sorter_model.rng)
    path = save_checkpoint(ckpt, tmp_path / "full.safetensors")
    loaded = load_checkpoint(path)

    assert loaded.kind == "full"
    assert loaded.state == state
    assert loaded.config == ckpt.config
    assert loaded.model.keys() == ckpt.model.keys()
    for name, value in ckpt.model.items():
        assert torch.equal(loaded.model[name], value)
    assert torch.equal(loaded.rng["init"], ckpt.rng["init"])
    assert loaded.has_prefix("sorter.")


def test_inference_checkpoint_drops_the_sorter(tmp_path, run_cfg, sorter_model):
    ckpt = capture(sorter_model, TrainState(), _config_for(run_cfg, sorter_model), kind="inference")
    loaded = load_checkpoint(save_checkpoint(ckpt, tmp_path / "infer.safetensors"))
    assert loaded.kind == "inference"
    assert not loaded.has_prefix("sorter.")
    assert loaded.optimizer == {} and loaded.rng == {}


def test_load_into_restores_parameters(run_cfg, model_cfg, asn_cfg):
    source = build_model(model_cfg, asn_cfg, seed=1)
    target = build_model(model_cfg, asn_cfg, seed=2)
    ckpt = capture(source, TrainState(), _config_for(run_cfg, source))
    ckpt.load_into(target)
    for (name, a), b in zip(source.state_dict().items(), target.state_dict().values()):
        assert torch.equal(a, b), name


def test_base_prefixes_leave_the_sorter_alone(run_cfg, model_cfg, asn_cfg):
    baseline = build_model(model_cfg, None, seed=1)
    target = build_model(model_cfg, asn_cfg, seed=2)
    sorter_before = {k: v.clone() for k, v in target.state_dict().items() if k.startswith("sorter.")}
    ckpt = capture(baseline, TrainState(), _config_for(run_cfg, baseline))
    ckpt.load_into(target, prefixes=("encoder.", "projection."))
    assert torch.equal(target.encoder.embed_tokens.weight, baseline.encoder.embed_tokens.weight)
    for name, value in sorter_before.items():
        assert torch.equal(target.state_dict()[name], value)


def test_mismatched_shapes_are_listed(run_cfg, model_cfg):
    small = build_model(model_cfg, None, seed=1)
    wide = build_model(dataclasses.replace(model_cfg, ffn_dim=32), None, seed=1)
    ckpt = capture(small, TrainState(), _config_for(run_cfg, small))
    with pytest.raises(CheckpointError) as err:
        ckpt.load_into(wide)
    assert "encoder.layers.0.ffn.fc1.weight" in err.value.mismatched


def test_missing_parameters_are_listed(run_cfg, model_cfg, asn_cfg):
    baseline = build_model(model_cfg, None, seed=1)
    full = build_model(model_cfg, asn_cfg, seed=1)
    ckpt = capture(baseline, TrainState(), _config_for(run_cfg, baseline))
    with pytest.raises(CheckpointError) as err:
        ckpt.load_into(full)
    assert any(name.startswith("sorter.") for name in err.value.mismatched)


def test_optimizer_moments_survive_a_round_trip(tmp_path, run_cfg, model_cfg):
    model = build_model(model_cfg, None, seed=1)
    optimizer = torch.optim.Adam(model.parameters(), lr=1e-3)
    loss = model(torch.tensor([[3, 4, 5]])).logits.pow(2).sum()
    loss.backward()
    optimizer.step()
    ckpt = capture(model, TrainState(step=1), _config_for(run_cfg, model), optimizer, model.rng)
    loaded = load_checkpoint(save_checkpoint(ckpt, tmp_path / "opt.safetensors"))

    fresh = build_model(model_cfg, None, seed=9)
    fresh_optimizer = torch.optim.Adam(fresh.parameters(), lr=1e-3)
    loaded.load_into(fresh, fresh_optimizer, fresh.rng)
    param = fresh.projection.proj.weight
    original = optimizer.state[model.projection.proj.weight]
    assert torch.equal(fresh_optimizer.state[param]["exp_avg"], original["exp_avg"])
    assert fresh_optimizer.state[param]["step"].shape == original["step"].shape


def test_missing_checkpoint_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.safetensors")


def test_corrupt_checkpoint_file(tmp_path):
    path = tmp_path / "broken.safetensors"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
