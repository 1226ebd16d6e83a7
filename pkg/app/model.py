"""
The translation model: causal encoder, length projection and, during training
only, the sorting network that reorders encoder states before projection.
"""
from dataclasses import dataclass

import torch
import torch.nn as nn

from app.config import AsnConfig, ModelConfig
from app.encoder import CausalEncoder, LengthProjection, reset_parameters
from app.sorting import PermutationSample, SortingNetwork
from app.tensor import RngStreams

BASE_PREFIXES = ("encoder.", "projection.")
SORTER_PREFIX = "sorter."


@dataclass
class ModelOutput:
    logits: torch.Tensor
    frame_lengths: torch.Tensor
    permutation: PermutationSample | None = None


class SimulTranslator(nn.Module):
    def __init__(self, cfg: ModelConfig, asn_cfg: AsnConfig | None, rng: RngStreams):
        super().__init__()
        self.cfg = cfg
        self.asn_cfg = asn_cfg
        self.rng = rng
        self.encoder = CausalEncoder(cfg, rng)
        self.projection = LengthProjection(cfg.embed_dim, cfg.upsample_ratio, cfg.vocab_size)
        self.sorter = SortingNetwork(cfg, asn_cfg, rng) if asn_cfg is not None else None

    @property
    def has_sorter(self) -> bool:
        return self.sorter is not None

    def reset_parameters(self, generator: torch.Generator):
        reset_parameters(self.encoder, generator)
        reset_parameters(self.projection, generator)
        self.reset_sorter(generator)

    def reset_sorter(self, generator: torch.Generator):
        if self.sorter is not None:
            reset_parameters(self.sorter, generator)
            self.sorter.reset_mask_embedding(generator)

    def frame_lengths(self, source_lengths: torch.Tensor) -> torch.Tensor:
        return source_lengths * self.cfg.upsample_ratio

    def forward(self, source, source_lengths=None, target=None, target_lengths=None,
                delay_k=None, use_sorter=True) -> ModelOutput:
        """Z = I (plain projection of H) unless a sorter exists, `use_sorter` is set and a target is given."""
        if source_lengths is None:
            source_lengths = torch.full((source.shape[0],), source.shape[1], dtype=torch.long)
        states, pad = self.encoder(source, source_lengths, delay_k)
        sample = None
        if use_sorter and self.sorter is not None and target is not None:
            states, sample = self.sorter(states, target, states_pad=pad, tgt_lengths=target_lengths)
        logits = self.projection(states)
        return ModelOutput(logits, self.frame_lengths(source_lengths), sample)


def build_model(cfg: ModelConfig, asn_cfg: AsnConfig | None, seed: int) -> SimulTranslator:
    rng = RngStreams(seed)
    model = SimulTranslator(cfg, asn_cfg, rng)
    model.reset_parameters(rng["init"])
    return model
