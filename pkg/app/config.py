import os
import json
import hashlib
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from app.errors import ConfigError


class Settings:
    APP_NAME = "Simultaneous Translation Toolkit"
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
    LOG_DIR = os.getenv("SIMT_LOG_DIR", ".")

    METRICS_PORT = int(os.getenv("SIMT_METRICS_PORT", "0")) or None


settings = Settings()


REORDER_RULES = ("monotonic", "local_swap", "block_move")
PHASES = ("ctc_pretrain", "asn_finetune", "from_scratch")
NORMALIZATIONS = ("sinkhorn", "softmax")
ASN_VARIANTS = ("default", "no_temperature", "no_noise", "gumbel_softmax")

BLANK_ID = 0
PAD_ID = 1
NUM_SPECIAL = 2


def _require(cond: bool, key: str, reason: str):
    if not cond:
        raise ConfigError(key, reason)


@dataclass
class GenConfig:
    vocab_size: int = 40
    min_length: int = 8
    max_length: int = 16
    reorder_rule: str = "block_move"
    window: int = 2
    distance: int = 5
    block: int = 2
    rule_prob: float = 1.0
    seed: int = 1
    train_size: int = 20000
    valid_size: int = 500
    test_size: int = 500

    def validate(self):
        _require(self.vocab_size >= 1, "gen.vocab_size", "must be >= 1")
        _require(self.min_length >= 2, "gen.min_length", "must be >= 2")
        _require(self.max_length >= self.min_length, "gen.max_length", "must be >= gen.min_length")
        _require(self.max_length <= 1024, "gen.max_length", "must be <= 1024")
        _require(self.reorder_rule in REORDER_RULES, "gen.reorder_rule",
                 f"must be one of {', '.join(REORDER_RULES)}")
        _require(0.0 <= self.rule_prob <= 1.0, "gen.rule_prob", "must lie in [0, 1]")
        if self.reorder_rule == "local_swap":
            _require(2 <= self.window <= self.min_length, "gen.window",
                     "must lie in [2, gen.min_length]")
        if self.reorder_rule == "block_move":
            _require(self.distance >= 1, "gen.distance", "must be >= 1")
            _require(self.block >= 1, "gen.block", "must be >= 1")
            _require(self.distance + self.block <= self.min_length, "gen.distance",
                     "gen.distance + gen.block must be <= gen.min_length")
        _require(self.train_size >= 1, "gen.train_size", "must be >= 1")
        _require(self.valid_size >= 0, "gen.valid_size", "must be >= 0")
        _require(self.test_size >= 0, "gen.test_size", "must be >= 0")
        return self

    @property
    def model_vocab_size(self) -> int:
        # blank, pad, source words, target words
        return NUM_SPECIAL + 2 * self.vocab_size


@dataclass
class ModelConfig:
    vocab_size: int = 0
    embed_dim: int = 128
    ffn_dim: int = 256
    heads: int = 4
    layers: int = 2
    dropout: float = 0.1
    delay_k: int = 1
    upsample_ratio: int = 2
    max_positions: int = 1024

    @classmethod
    def reference(cls, vocab_size: int) -> "ModelConfig":
        return cls(vocab_size=vocab_size, embed_dim=512, ffn_dim=2048, heads=8, layers=6)

    def validate(self):
        _require(self.vocab_size > NUM_SPECIAL, "model.vocab_size",
                 f"must be > {NUM_SPECIAL} (blank and pad are reserved)")
        _require(self.embed_dim >= 1, "model.embed_dim", "must be >= 1")
        _require(self.heads >= 1 and self.embed_dim % self.heads == 0, "model.heads",
                 "model.embed_dim must be divisible by model.heads")
        _require(self.ffn_dim >= 1, "model.ffn_dim", "must be >= 1")
        _require(self.layers >= 1, "model.layers", "must be >= 1")
        _require(0.0 <= self.dropout < 1.0, "model.dropout", "must lie in [0, 1)")
        _require(self.delay_k >= 1, "model.delay_k", "must be >= 1")
        _require(self.upsample_ratio >= 1, "model.upsample_ratio", "must be >= 1")
        return self


@dataclass
class AsnConfig:
    decoder_layers: int = 3
    sinkhorn_iters: int = 16
    temperature: float = 0.25
    noise_factor: float = 0.3
    context_mask_ratio: float = 0.5
    normalization: str = "sinkhorn"
    variant: str = "default"

    def validate(self):
        _require(self.decoder_layers >= 1, "asn.decoder_layers", "must be >= 1")
        _require(self.sinkhorn_iters >= 0, "asn.sinkhorn_iters", "must be >= 0")
        _require(self.temperature > 0, "asn.temperature", "must be > 0")
        _require(self.noise_factor >= 0, "asn.noise_factor", "must be >= 0")
        _require(0.0 <= self.context_mask_ratio <= 1.0, "asn.context_mask_ratio",
                 "must lie in [0, 1]")
        _require(self.normalization in NORMALIZATIONS, "asn.normalization",
                 f"must be one of {', '.join(NORMALIZATIONS)}")
        _require(self.variant in ASN_VARIANTS, "asn.variant",
                 f"must be one of {', '.join(ASN_VARIANTS)}")
        return self


@dataclass
class TrainConfig:
    max_lr: float = 5e-4
    warmup_steps: int = 4000
    max_steps: int = 20000
    patience_steps: int = 2000
    accumulate_batches: int = 1
    label_smoothing: float = 0.1
    seed: int = 1
    phase: str = "ctc_pretrain"
    max_tokens: int = 4096
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    validate_interval: int = 500
    log_interval: int = 50

    @classmethod
    def reference(cls) -> "TrainConfig":
        return cls(max_steps=300_000, patience_steps=25_000)

    def validate(self):
        _require(self.max_lr > 0, "train.max_lr", "must be > 0")
        _require(self.warmup_steps >= 1, "train.warmup_steps", "must be >= 1")
        _require(self.max_steps >= 1, "train.max_steps", "must be >= 1")
        _require(self.patience_steps >= 1, "train.patience_steps", "must be >= 1")
        _require(self.accumulate_batches >= 1, "train.accumulate_batches", "must be >= 1")
        _require(0.0 <= self.label_smoothing < 1.0, "train.label_smoothing", "must lie in [0, 1)")
        _require(self.phase in PHASES, "train.phase", f"must be one of {', '.join(PHASES)}")
        _require(self.max_tokens >= 1, "train.max_tokens", "must be >= 1")
        _require(self.validate_interval >= 1, "train.validate_interval", "must be >= 1")
        return self


@dataclass
class RunConfig:
    output_dir: str = "runs/default"
    gen: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    asn: AsnConfig = field(default_factory=AsnConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        if self.model.vocab_size == 0:
            self.model.vocab_size = self.gen.model_vocab_size
        self.gen.validate()
        self.model.validate()
        self.asn.validate()
        self.train.validate()
        _require(self.model.vocab_size >= self.gen.model_vocab_size, "model.vocab_size",
                 f"must cover the generated vocabulary ({self.gen.model_vocab_size})")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return cls(
            output_dir=data.get("output_dir", cls.output_dir),
            gen=GenConfig(**data.get("gen", {})),
            model=ModelConfig(**data.get("model", {})),
            asn=AsnConfig(**data.get("asn", {})),
            train=TrainConfig(**data.get("train", {})),
        )

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


SECTIONS = {"gen": GenConfig, "model": ModelConfig, "asn": AsnConfig, "train": TrainConfig}


def _coerce(key: str, raw: str, typ):
    try:
        if typ is bool:
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return lowered in ("true", "1", "yes")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(key, f"expected {typ.__name__}, got '{raw}'")


def parse_run_config(text: str) -> RunConfig:
    values: dict[str, dict] = {name: {} for name in SECTIONS}
    top: dict = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"line {line_no} is not of the form 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        section, _, name = key.partition(".")
        if name:
            cls = SECTIONS.get(section)
            fields = {f.name: f for f in dataclasses.fields(cls)} if cls else {}
            if name not in fields:
                raise ConfigError(key, "unknown key")
            values[section][name] = _coerce(key, raw, fields[name].type)
        elif key == "output_dir":
            top["output_dir"] = raw
        else:
            raise ConfigError(key, "unknown key")

    cfg = RunConfig(
        output_dir=top.get("output_dir", RunConfig.output_dir),
        gen=GenConfig(**values["gen"]),
        model=ModelConfig(**values["model"]),
        asn=AsnConfig(**values["asn"]),
        train=TrainConfig(**values["train"]),
    )
    return cfg.validate()


def load_run_config(path) -> RunConfig:
    return parse_run_config(Path(path).read_text(encoding="utf-8"))
