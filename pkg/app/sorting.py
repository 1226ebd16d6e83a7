"""
Auxiliary sorting network: turns encoder states plus (masked) target context
into a near-permutation Z with the Gumbel-Sinkhorn operator. Used for training
and for diagnostics only; streaming inference never builds it.
"""
import csv
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from app.config import ASN_VARIANTS, AsnConfig, ModelConfig
from app.encoder import Dropout, FeedForward, HiddenStates, MultiheadAttention, padding_mask
from app.errors import ConfigError, ShapeError, SimulError
from app.tensor import DTYPE, RngStreams, check_finite, primitive_forward, sinusoidal_positions

ABLATIONS = ASN_VARIANTS
GUMBEL_EPS = 1e-20


@dataclass
class PermutationSample:
    matrix: torch.Tensor
    config: AsnConfig
    noise_seed: int | None = None


def sinkhorn_normalize(x: torch.Tensor, iters: int, mask: torch.Tensor | None = None) -> torch.Tensor:
    """
    S^0 = exp(X); every iteration normalizes rows, then columns. Runs in log space.
    `mask` (B, N) marks padded positions; their rows/columns are pinned to identity.
    """
    check_finite(x.detach(), "sinkhorn input")
    if x.shape[-1] != x.shape[-2]:
        raise ShapeError("sinkhorn_normalize", [x.shape], "expected square matrices")
    if iters < 0:
        raise SimulError(f"sinkhorn iterations must be >= 0, got {iters}")
    log_alpha = _pin_padding(x, mask)
    for _ in range(iters):
        log_alpha = log_alpha - torch.logsumexp(log_alpha, dim=-1, keepdim=True)
        log_alpha = log_alpha - torch.logsumexp(log_alpha, dim=-2, keepdim=True)
    return torch.exp(log_alpha)


def _pin_padding(x, mask):
    if mask is None:
        return x
    n = x.shape[-1]
    eye = torch.eye(n, dtype=torch.bool)
    pad_rc = mask.unsqueeze(-1) | mask.unsqueeze(-2)
    x = x.masked_fill(pad_rc & ~eye, float("-inf"))
    return x.masked_fill(pad_rc & eye, 0.0)


def sample_gumbel(shape, generator: torch.Generator | None = None) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=DTYPE)
    return -torch.log(-torch.log(u + GUMBEL_EPS) + GUMBEL_EPS)


def gumbel_sinkhorn(
    scores: torch.Tensor,
    cfg: AsnConfig,
    generator: torch.Generator | None = None,
    mask: torch.Tensor | None = None,
) -> PermutationSample:
    """Z = S^l((A + delta * E) / tau), E ~ Gumbel(0, 1); noise is a constant w.r.t. A."""
    if cfg.temperature <= 0:
        raise ConfigError("asn.temperature", "must be > 0")
    if scores.shape[-1] != scores.shape[-2]:
        raise ShapeError("gumbel_sinkhorn", [scores.shape], "expected square matrices")
    noisy = scores
    if cfg.noise_factor > 0:
        noisy = scores + cfg.noise_factor * sample_gumbel(scores.shape, generator)
    noisy = noisy / cfg.temperature
    if cfg.normalization == "softmax":
        z = torch.softmax(_pin_padding(noisy, mask), dim=-1)
    else:
        z = sinkhorn_normalize(noisy, cfg.sinkhorn_iters, mask)
    seed = generator.initial_seed() if generator is not None else None
    return PermutationSample(matrix=z, config=cfg, noise_seed=seed)


def sinkhorn_attention(q: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    """A = Q H^T / sqrt(d_h), no normalization."""
    if q.shape != h.shape:
        raise ShapeError("sinkhorn_attention", [q.shape, h.shape])
    scores = primitive_forward("matmul", q, primitive_forward("transpose", h))
    return scores / math.sqrt(h.shape[-1])


def apply_permutation(z: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    """H_bar = Z H."""
    return primitive_forward("matmul", z, h)


def ablation_switches(cfg: AsnConfig, variant: str) -> AsnConfig:
    if variant not in ABLATIONS:
        raise ConfigError("asn.variant", f"unknown ablation '{variant}', expected one of {', '.join(ABLATIONS)}")
    if variant == "no_temperature":
        return dataclasses.replace(cfg, temperature=1.0, variant=variant)
    if variant == "no_noise":
        return dataclasses.replace(cfg, noise_factor=0.0, variant=variant)
    if variant == "gumbel_softmax":
        return dataclasses.replace(cfg, normalization="softmax", variant=variant)
    return dataclasses.replace(cfg, variant=variant)


def hard_assignment(z: torch.Tensor) -> list[int]:
    """
    Greedy row-argmax: rows are served in decreasing order of their best score and
    a column already taken falls through to the row's next best free column.
    """
    z = z.detach()
    n = z.shape[0]
    order = sorted(range(n), key=lambda r: -float(z[r].max()))
    taken: set[int] = set()
    assignment = [0] * n
    for r in order:
        for c in torch.argsort(z[r], descending=True, stable=True).tolist():
            if c not in taken:
                taken.add(c)
                assignment[r] = c
                break
    return assignment


def export_matrix_csv(z: torch.Tensor, path, row_labels=None, col_labels=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        if col_labels is not None:
            writer.writerow([""] + list(col_labels))
        for i, row in enumerate(z.detach().tolist()):
            lead = [row_labels[i]] if row_labels is not None else []
            writer.writerow(lead + [f"{v:.6g}" for v in row])


class SorterLayer(nn.Module):
    """Non-causal decoder layer: self-attention over states, cross-attention over target context."""

    def __init__(self, cfg: ModelConfig, rng: RngStreams):
        super().__init__()
        d = cfg.embed_dim
        self.self_attn = MultiheadAttention(d, cfg.heads, cfg.dropout, rng)
        self.self_attn_layer_norm = nn.LayerNorm(d, dtype=DTYPE)
        self.encoder_attn = MultiheadAttention(d, cfg.heads, cfg.dropout, rng)
        self.encoder_attn_layer_norm = nn.LayerNorm(d, dtype=DTYPE)
        self.ffn = FeedForward(d, cfg.ffn_dim, cfg.dropout, rng)
        self.final_layer_norm = nn.LayerNorm(d, dtype=DTYPE)
        self.dropout = Dropout(cfg.dropout, rng)

    def forward(self, x, context, x_pad=None, context_pad=None):
        h = self.self_attn_layer_norm(x)
        x = x + self.dropout(self.self_attn(h, h, key_padding_mask=x_pad))
        h = self.encoder_attn_layer_norm(x)
        x = x + self.dropout(self.encoder_attn(h, context, key_padding_mask=context_pad))
        return x + self.dropout(self.ffn(self.final_layer_norm(x)))


class SortingNetwork(nn.Module):
    def __init__(self, model_cfg: ModelConfig, asn_cfg: AsnConfig, rng: RngStreams):
        super().__init__()
        self.cfg = asn_cfg
        self.rng = rng
        d = model_cfg.embed_dim
        self.embed_scale = math.sqrt(d)
        self.embed_targets = nn.Embedding(model_cfg.vocab_size, d, dtype=DTYPE)
        self.mask_embedding = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.layers = nn.ModuleList([SorterLayer(model_cfg, rng) for _ in range(asn_cfg.decoder_layers)])
        self.layer_norm = nn.LayerNorm(d, dtype=DTYPE)
        self.register_buffer(
            "positions", sinusoidal_positions(model_cfg.max_positions, d), persistent=False
        )

    def reset_mask_embedding(self, generator: torch.Generator):
        with torch.no_grad():
            self.mask_embedding.normal_(0.0, self.mask_embedding.numel() ** -0.5, generator=generator)

    def context(self, tgt_tokens, mask_ratio: float, generator: torch.Generator | None = None):
        """Target embeddings with each position independently swapped for [M] w.p. mask_ratio."""
        emb = primitive_forward("embedding_lookup", self.embed_targets.weight, tgt_tokens)
        if mask_ratio >= 1.0:
            masked = torch.ones(tgt_tokens.shape, dtype=torch.bool)
        elif mask_ratio <= 0.0:
            masked = torch.zeros(tgt_tokens.shape, dtype=torch.bool)
        else:
            masked = torch.rand(tgt_tokens.shape, generator=generator, dtype=DTYPE) < mask_ratio
        emb = torch.where(masked.unsqueeze(-1), self.mask_embedding.expand_as(emb), emb)
        length = tgt_tokens.shape[-1]
        return self.embed_scale * emb + self.positions[:length]

    def compute_q(self, states, tgt_tokens, states_pad=None, tgt_lengths=None, mask_ratio=None):
        """states: (B, N, d); tgt_tokens: (B, M) -> Q of shape (B, N, d)."""
        if tgt_tokens.shape[-1] < 1:
            raise ShapeError("compute_Q", [tgt_tokens.shape], "empty target")
        ratio = self.cfg.context_mask_ratio if mask_ratio is None else mask_ratio
        ctx = self.context(tgt_tokens, ratio, self.rng["mask"])
        ctx_pad = None
        if tgt_lengths is not None:
            ctx_pad = padding_mask(tgt_lengths, tgt_tokens.shape[-1])
        x = states
        for layer in self.layers:
            x = layer(x, ctx, x_pad=states_pad, context_pad=ctx_pad)
        return self.layer_norm(x)

    def forward(self, states, tgt_tokens, states_pad=None, tgt_lengths=None, cfg=None, mask_ratio=None):
        """Returns (H_bar, PermutationSample)."""
        cfg = cfg or self.cfg
        q = self.compute_q(states, tgt_tokens, states_pad, tgt_lengths, mask_ratio)
        scores = sinkhorn_attention(q, states)
        sample = gumbel_sinkhorn(scores, cfg, self.rng["gumbel"], mask=states_pad)
        return apply_permutation(sample.matrix, states), sample


def compute_q(h, target_ids, mask_ratio: float, sorter: SortingNetwork) -> torch.Tensor:
    """Single-sentence form: H (N, d), target ids (M,) -> Q (N, d)."""
    values = h.values if isinstance(h, HiddenStates) else h
    tgt = torch.as_tensor(target_ids, dtype=torch.long)
    if tgt.numel() < 1:
        raise ShapeError("compute_Q", [tgt.shape], "empty target")
    return sorter.compute_q(values.unsqueeze(0), tgt.unsqueeze(0), mask_ratio=mask_ratio)[0]
