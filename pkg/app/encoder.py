"""
Causal Transformer encoder with a delay-k first layer, and the position-wise
length projection that turns hidden states into CTC frames.
"""
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from app.config import ModelConfig
from app.errors import ShapeError, SimulError
from app.tensor import DTYPE, RngStreams, primitive_forward, sinusoidal_positions


def delay_mask(length: int, k: int) -> torch.Tensor:
    """allowed[t, j] is True iff position t may attend to source token j (0-based j <= t+k-1)."""
    if length < 1 or k < 1:
        raise SimulError(f"delay_mask needs length >= 1 and k >= 1, got {length}, {k}")
    rows = torch.arange(length).unsqueeze(1)
    cols = torch.arange(length).unsqueeze(0)
    return cols <= rows + (k - 1)


def padding_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    """True at padded positions."""
    return torch.arange(max_len).unsqueeze(0) >= lengths.unsqueeze(1)


def reset_parameters(module: nn.Module, generator: torch.Generator):
    """Fan-based uniform init for affine maps, N(0, d^-1/2) for embeddings."""
    with torch.no_grad():
        for sub in module.modules():
            if isinstance(sub, nn.Linear):
                fan_out, fan_in = sub.weight.shape
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                sub.weight.uniform_(-bound, bound, generator=generator)
                if sub.bias is not None:
                    sub.bias.zero_()
            elif isinstance(sub, nn.Embedding):
                sub.weight.normal_(0.0, sub.embedding_dim ** -0.5, generator=generator)
            elif isinstance(sub, nn.LayerNorm):
                sub.weight.fill_(1.0)
                sub.bias.zero_()


class Dropout(nn.Module):
    def __init__(self, rate: float, rng: RngStreams):
        super().__init__()
        self.rate = rate
        self.rng = rng

    def forward(self, x):
        return primitive_forward(
            "dropout", x, rate=self.rate, generator=self.rng["dropout"], training=self.training
        )


class MultiheadAttention(nn.Module):
    def __init__(self, embed_dim: int, heads: int, dropout: float, rng: RngStreams):
        super().__init__()
        if embed_dim % heads:
            raise ShapeError("attention", [(embed_dim,), (heads,)], "embed_dim not divisible by heads")
        self.heads = heads
        self.head_dim = embed_dim // heads
        self.q_proj = nn.Linear(embed_dim, embed_dim, dtype=DTYPE)
        self.k_proj = nn.Linear(embed_dim, embed_dim, dtype=DTYPE)
        self.v_proj = nn.Linear(embed_dim, embed_dim, dtype=DTYPE)
        self.out_proj = nn.Linear(embed_dim, embed_dim, dtype=DTYPE)
        self.dropout = Dropout(dropout, rng)

    def _split(self, x):
        bsz, length, _ = x.shape
        x = primitive_forward("reshape", x, (bsz, length, self.heads, self.head_dim))
        return x.transpose(1, 2)

    def project_kv(self, x):
        return self._split(self.k_proj(x)), self._split(self.v_proj(x))

    def forward(self, query, key=None, allowed=None, key_padding_mask=None, kv=None):
        """
        query: (B, T, d); key: (B, S, d) or cached `kv` = (k, v) of shape (B, H, S, d/H).
        allowed: (T, S) bool; key_padding_mask: (B, S) bool, True at padding.
        """
        q = self._split(self.q_proj(query))
        k, v = kv if kv is not None else self.project_kv(key)
        scores = primitive_forward("matmul", q, primitive_forward("transpose", k))
        scores = scores / math.sqrt(self.head_dim)
        if allowed is not None:
            scores = primitive_forward("masked_fill", scores, ~allowed, float("-inf"))
        if key_padding_mask is not None:
            scores = primitive_forward(
                "masked_fill", scores, key_padding_mask[:, None, None, :], float("-inf")
            )
        probs = self.dropout(primitive_forward("softmax", scores, axis=-1))
        out = primitive_forward("matmul", probs, v)
        bsz, _, length, _ = out.shape
        out = primitive_forward("reshape", out.transpose(1, 2), (bsz, length, self.heads * self.head_dim))
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, embed_dim: int, ffn_dim: int, dropout: float, rng: RngStreams):
        super().__init__()
        self.fc1 = nn.Linear(embed_dim, ffn_dim, dtype=DTYPE)
        self.fc2 = nn.Linear(ffn_dim, embed_dim, dtype=DTYPE)
        self.dropout = Dropout(dropout, rng)

    def forward(self, x):
        return self.fc2(self.dropout(primitive_forward("relu", self.fc1(x))))


class EncoderLayer(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, cfg: ModelConfig, rng: RngStreams):
        super().__init__()
        self.self_attn = MultiheadAttention(cfg.embed_dim, cfg.heads, cfg.dropout, rng)
        self.self_attn_layer_norm = nn.LayerNorm(cfg.embed_dim, dtype=DTYPE)
        self.ffn = FeedForward(cfg.embed_dim, cfg.ffn_dim, cfg.dropout, rng)
        self.final_layer_norm = nn.LayerNorm(cfg.embed_dim, dtype=DTYPE)
        self.dropout = Dropout(cfg.dropout, rng)

    def forward(self, x, allowed=None, key_padding_mask=None, kv=None):
        h = self.self_attn_layer_norm(x)
        x = x + self.dropout(self.self_attn(h, h, allowed, key_padding_mask, kv=kv))
        return x + self.dropout(self.ffn(self.final_layer_norm(x)))


@dataclass
class HiddenStates:
    values: torch.Tensor
    source_length: int


@dataclass
class IncrementalEncoderState:
    """Per-layer key/value caches for one stream."""
    delay_k: int
    consumed: int = 0
    finalized: int = 0
    inputs: list = field(default_factory=list)
    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)


class CausalEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: RngStreams):
        super().__init__()
        self.cfg = cfg
        self.embed_scale = math.sqrt(cfg.embed_dim)
        self.embed_tokens = nn.Embedding(cfg.vocab_size, cfg.embed_dim, dtype=DTYPE)
        self.layers = nn.ModuleList([EncoderLayer(cfg, rng) for _ in range(cfg.layers)])
        self.layer_norm = nn.LayerNorm(cfg.embed_dim, dtype=DTYPE)
        self.dropout = Dropout(cfg.dropout, rng)
        self.register_buffer(
            "positions", sinusoidal_positions(cfg.max_positions, cfg.embed_dim), persistent=False
        )

    def embed(self, tokens, offset: int = 0):
        length = tokens.shape[-1]
        if offset + length > self.cfg.max_positions:
            raise ShapeError("embed", [tokens.shape], f"longer than {self.cfg.max_positions} positions")
        x = self.embed_scale * primitive_forward("embedding_lookup", self.embed_tokens.weight, tokens)
        return self.dropout(x + self.positions[offset:offset + length])

    def forward(self, src_tokens, src_lengths=None, delay_k=None):
        """src_tokens: (B, T) -> states (B, T, d) and padding mask (B, T)."""
        k = delay_k or self.cfg.delay_k
        bsz, length = src_tokens.shape
        if src_lengths is None:
            src_lengths = torch.full((bsz,), length, dtype=torch.long)
        pad = padding_mask(src_lengths, length)
        first = delay_mask(length, k)
        causal = delay_mask(length, 1)

        x = self.embed(src_tokens)
        for i, layer in enumerate(self.layers):
            x = layer(x, allowed=first if i == 0 else causal, key_padding_mask=pad)
        return self.layer_norm(x), pad

    # -- incremental evaluation ------------------------------------------------

    def init_state(self, delay_k=None) -> IncrementalEncoderState:
        state = IncrementalEncoderState(delay_k=delay_k or self.cfg.delay_k)
        state.keys = [[] for _ in self.layers]
        state.values = [[] for _ in self.layers]
        return state

    def read(self, state: IncrementalEncoderState, token: int) -> list[torch.Tensor]:
        """Consume one source token; return the hidden states it makes final."""
        ids = torch.tensor([[token]], dtype=torch.long)
        x0 = self.embed(ids, offset=state.consumed)
        state.inputs.append(x0)
        first = self.layers[0]
        k, v = first.self_attn.project_kv(first.self_attn_layer_norm(x0))
        state.keys[0].append(k)
        state.values[0].append(v)
        state.consumed += 1
        ready = state.consumed - state.delay_k + 1
        return [self._finalize(state) for _ in range(state.finalized, max(ready, state.finalized))]

    def finish(self, state: IncrementalEncoderState) -> list[torch.Tensor]:
        return [self._finalize(state) for _ in range(state.finalized, state.consumed)]

    def _finalize(self, state: IncrementalEncoderState) -> torch.Tensor:
        t = state.finalized
        x = state.inputs[t]
        for i, layer in enumerate(self.layers):
            if i == 0:
                visible = min(t + state.delay_k, state.consumed)
            else:
                k, v = layer.self_attn.project_kv(layer.self_attn_layer_norm(x))
                state.keys[i].append(k)
                state.values[i].append(v)
                visible = t + 1
            kv = (
                torch.cat(state.keys[i][:visible], dim=2),
                torch.cat(state.values[i][:visible], dim=2),
            )
            x = layer(x, kv=kv)
        state.finalized += 1
        return self.layer_norm(x)[0, 0]


def encode(source_ids, encoder: CausalEncoder, delay_k=None) -> HiddenStates:
    ids = torch.as_tensor(source_ids, dtype=torch.long)
    if ids.dim() != 1 or ids.numel() < 1:
        raise ShapeError("encode", [ids.shape], "expected a non-empty 1-D token sequence")
    states, _ = encoder(ids.unsqueeze(0), delay_k=delay_k)
    return HiddenStates(values=states[0], source_length=ids.numel())


class LengthProjection(nn.Module):
    """A single position-wise affine map d_h -> mu * V; position i owns frames mu*i .. mu*i+mu-1."""

    def __init__(self, embed_dim: int, upsample_ratio: int, vocab_size: int):
        super().__init__()
        self.upsample_ratio = upsample_ratio
        self.vocab_size = vocab_size
        self.proj = nn.Linear(embed_dim, upsample_ratio * vocab_size, dtype=DTYPE)

    def forward(self, states):
        *lead, length, _ = states.shape
        out = self.proj(states)
        return primitive_forward(
            "reshape", out, (*lead, length * self.upsample_ratio, self.vocab_size)
        )


def length_project(states: torch.Tensor, projection: LengthProjection) -> torch.Tensor:
    if states.dim() < 2 or states.shape[-2] < 1:
        raise ShapeError("length_project", [states.shape], "needs at least one position")
    return projection(states)
