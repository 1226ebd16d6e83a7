"""
Checkpoints as safetensors files: named little-endian tensors plus string metadata.

    model.<param>                 parameters
    optim.<param>.<slot>          Adam moments and step counters
    rng.<stream>                  generator states (uint8)
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from safetensors import safe_open
from safetensors.torch import save_file

from app.config import RunConfig
from app.errors import CheckpointError
from app.model import BASE_PREFIXES

logger = logging.getLogger(__name__)

FORMAT_VERSION = "1"
KINDS = ("full", "inference")
OPTIM_SLOTS = ("exp_avg", "exp_avg_sq", "step")


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    cursor: int = 0
    best_bleu: float = -1.0
    best_step: int = 0
    phase: str = "ctc_pretrain"


@dataclass
class Checkpoint:
    model: dict[str, torch.Tensor]
    state: TrainState = field(default_factory=TrainState)
    config: dict = field(default_factory=dict)
    optimizer: dict[str, dict[str, torch.Tensor]] = field(default_factory=dict)
    rng: dict[str, torch.Tensor] = field(default_factory=dict)
    kind: str = "full"

    @property
    def run_config(self) -> RunConfig:
        return RunConfig.from_dict(self.config)

    def has_prefix(self, prefix: str) -> bool:
        return any(name.startswith(prefix) for name in self.model)

    def for_inference(self) -> "Checkpoint":
        """Encoder and projection only, without optimizer moments or RNG states."""
        return Checkpoint(
            model={k: v for k, v in self.model.items() if k.startswith(BASE_PREFIXES)},
            state=TrainState(**asdict(self.state)),
            config=dict(self.config),
            kind="inference",
        )

    def load_into(self, model: torch.nn.Module, optimizer=None, rng=None, prefixes=None):
        """
        Copy parameters (only those under `prefixes` when given) into `model`,
        optionally restoring optimizer moments and RNG streams. Every missing,
        unexpected or mis-shaped name is reported in one CheckpointError.
        """
        wanted = lambda name: prefixes is None or name.startswith(tuple(prefixes))
        target = {k: v for k, v in model.state_dict().items() if wanted(k)}
        source = {k: v for k, v in self.model.items() if wanted(k)}
        mismatched = sorted(
            [k for k in target if k not in source]
            + [k for k in source if k not in target]
            + [k for k in source if k in target and tuple(source[k].shape) != tuple(target[k].shape)]
        )
        if mismatched:
            raise CheckpointError("checkpoint does not match the model", mismatched)
        with torch.no_grad():
            params = dict(model.state_dict(keep_vars=True))
            for name, value in source.items():
                params[name].copy_(value)

        if optimizer is not None:
            by_name = dict(model.named_parameters())
            for name, slots in self.optimizer.items():
                if name not in by_name:
                    raise CheckpointError("optimizer state for unknown parameter", [name])
                optimizer.state[by_name[name]] = {k: v.clone() for k, v in slots.items()}
        if rng is not None and self.rng:
            rng.load_state_dict(self.rng)


def capture(model, state: TrainState, config: RunConfig, optimizer=None, rng=None,
            kind: str = "full") -> Checkpoint:
    if kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind '{kind}'")
    if kind == "inference":
        return capture(model, state, config).for_inference()
    moments = {}
    if optimizer is not None:
        for name, param in model.named_parameters():
            slots = optimizer.state.get(param)
            if slots:
                moments[name] = {k: slots[k].detach().clone() for k in OPTIM_SLOTS if k in slots}
    return Checkpoint(
        model={k: v.detach().clone() for k, v in model.state_dict().items()},
        state=TrainState(**asdict(state)),
        config=config.to_dict(),
        optimizer=moments,
        rng=rng.state_dict() if rng is not None else {},
        kind=kind,
    )


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {f"model.{k}": v.contiguous() for k, v in ckpt.model.items()}
    for name, slots in ckpt.optimizer.items():
        for slot, value in slots.items():
            # scalar step counters are stored with one element
            tensors[f"optim.{name}.{slot}"] = value.reshape(-1).contiguous()
    for name, value in ckpt.rng.items():
        tensors[f"rng.{name}"] = value.contiguous()
    metadata = {k: json.dumps(v) for k, v in asdict(ckpt.state).items()}
    metadata.update({
        "format_version": FORMAT_VERSION,
        "kind": ckpt.kind,
        "config": json.dumps(ckpt.config, sort_keys=True),
    })
    save_file(tensors, str(path), metadata=metadata)
    logger.info("checkpoint saved", extra={"path": str(path), "kind": ckpt.kind, "step": ckpt.state.step})
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        handle = safe_open(str(path), framework="pt")
    except Exception as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}")
    model, optimizer, rng = {}, {}, {}
    with handle as f:
        metadata = f.metadata() or {}
        if metadata.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format {metadata.get('format_version')!r}")
        for key in f.keys():
            group, _, rest = key.partition(".")
            tensor = f.get_tensor(key)
            if group == "model":
                model[rest] = tensor
            elif group == "optim":
                name, _, slot = rest.rpartition(".")
                if slot == "step":
                    tensor = tensor.reshape(())
                optimizer.setdefault(name, {})[slot] = tensor
            elif group == "rng":
                rng[rest] = tensor
            else:
                raise CheckpointError("unexpected tensor in checkpoint", [key])
    state = TrainState(**{k: json.loads(metadata[k]) for k in TrainState.__dataclass_fields__ if k in metadata})
    return Checkpoint(
        model=model,
        state=state,
        config=json.loads(metadata.get("config", "{}")),
        optimizer=optimizer,
        rng=rng,
        kind=metadata.get("kind", "full"),
    )
