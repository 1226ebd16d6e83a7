"""
Synthetic parallel corpora with known reorderings, corpus files and token batching.

Token layout: 0 blank, 1 pad, source words 2..2+S-1, target word = source word + S.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch.utils.data import Dataset

from app.config import NUM_SPECIAL, PAD_ID, GenConfig
from app.errors import CorpusFormatError, SimulError

logger = logging.getLogger(__name__)

MAX_SENTENCE_TOKENS = 1024
SPLITS = ("train", "valid", "test")


@dataclass(frozen=True)
class AlignmentLink:
    source_index: int
    target_index: int


@dataclass
class SentencePair:
    source_ids: list[int]
    target_ids: list[int]
    oracle_links: list[AlignmentLink] = field(default_factory=list)
    # 1-based: target position j is the transcription of source position oracle_permutation[j-1]
    oracle_permutation: list[int] | None = None

    def validate(self):
        n, m = len(self.source_ids), len(self.target_ids)
        for link in self.oracle_links:
            if not (1 <= link.source_index <= n and 1 <= link.target_index <= m):
                raise SimulError(f"link {link.source_index}-{link.target_index} outside {n}x{m} pair")
        if self.oracle_permutation is not None:
            if sorted(self.oracle_permutation) != list(range(1, n + 1)):
                raise SimulError("oracle permutation is not a bijection on the source positions")
        return self


def source_word(index: int) -> int:
    return NUM_SPECIAL + index


def transcribe(source_id: int, vocab_size: int) -> int:
    return source_id + vocab_size


def block_move_order(length: int, start: int, distance: int, block: int) -> list[int]:
    """0-based source order: block [start, start+block) reversed and moved `distance` slots forward."""
    moved = list(range(start + block - 1, start - 1, -1))
    return (
        list(range(0, start - distance))
        + moved
        + list(range(start - distance, start))
        + list(range(start + block, length))
    )


def local_swap_order(length: int, start: int, window: int) -> list[int]:
    order = list(range(length))
    end = start + window - 1
    order[start], order[end] = order[end], order[start]
    return order


def _reorder(cfg: GenConfig, length: int, rs: np.random.Generator) -> list[int]:
    if cfg.reorder_rule == "monotonic" or rs.random() >= cfg.rule_prob:
        return list(range(length))
    if cfg.reorder_rule == "local_swap":
        start = int(rs.integers(0, length - cfg.window + 1))
        return local_swap_order(length, start, cfg.window)
    start = int(rs.integers(cfg.distance, length - cfg.block + 1))
    return block_move_order(length, start, cfg.distance, cfg.block)


def generate_corpus(cfg: GenConfig, size: int, seed: int | None = None) -> list[SentencePair]:
    if size < 1:
        raise SimulError(f"corpus size must be >= 1, got {size}")
    cfg.validate()
    rs = np.random.default_rng(cfg.seed if seed is None else seed)
    pairs = []
    for _ in range(size):
        length = int(rs.integers(cfg.min_length, cfg.max_length + 1))
        source = [source_word(int(w)) for w in rs.integers(0, cfg.vocab_size, size=length)]
        order = _reorder(cfg, length, rs)
        target = [transcribe(source[i], cfg.vocab_size) for i in order]
        links = [AlignmentLink(i + 1, j + 1) for j, i in enumerate(order)]
        pairs.append(SentencePair(source, target, links, [i + 1 for i in order]))
    return pairs


def generate_splits(cfg: GenConfig) -> dict[str, list[SentencePair]]:
    """Train/valid/test corpora from independent seeds derived from `cfg.seed`."""
    sizes = {"train": cfg.train_size, "valid": cfg.valid_size, "test": cfg.test_size}
    splits = {}
    for offset, name in enumerate(SPLITS):
        if sizes[name] > 0:
            splits[name] = generate_corpus(cfg, sizes[name], seed=cfg.seed * 1000 + offset)
        else:
            splits[name] = []
    return splits


# -- corpus files ------------------------------------------------------------

def _ints(text: str) -> list[int]:
    return [int(tok) for tok in text.split()]


def format_pair(pair: SentencePair) -> str:
    fields = [
        " ".join(map(str, pair.source_ids)),
        " ".join(map(str, pair.target_ids)),
        " ".join(f"{l.source_index}-{l.target_index}" for l in pair.oracle_links),
        " ".join(map(str, pair.oracle_permutation)) if pair.oracle_permutation is not None else "",
    ]
    return "\t".join(fields)


def parse_pair(line: str, path, line_no: int) -> SentencePair:
    fields = line.rstrip("\n").split("\t")
    if len(fields) < 2 or len(fields) > 4:
        raise CorpusFormatError(path, line_no, f"expected 2 to 4 tab-separated fields, got {len(fields)}")
    try:
        source, target = _ints(fields[0]), _ints(fields[1])
    except ValueError as e:
        raise CorpusFormatError(path, line_no, f"malformed token: {e}")
    if not source or not target:
        # rejected by accept_pair, whatever the link columns hold
        return SentencePair(source, target)
    try:
        links = []
        if len(fields) > 2:
            for item in fields[2].split():
                i, j = item.split("-")
                links.append(AlignmentLink(int(i), int(j)))
        perm = _ints(fields[3]) if len(fields) > 3 and fields[3].strip() else None
    except ValueError as e:
        raise CorpusFormatError(path, line_no, f"malformed token: {e}")
    pair = SentencePair(source, target, links, perm)
    try:
        return pair.validate()
    except SimulError as e:
        raise CorpusFormatError(path, line_no, str(e))


def accept_pair(pair: SentencePair) -> bool:
    """Drops pairs with an empty side or a side longer than 1024 tokens."""
    lengths = (len(pair.source_ids), len(pair.target_ids))
    return min(lengths) > 0 and max(lengths) <= MAX_SENTENCE_TOKENS


def save_corpus(pairs: Sequence[SentencePair], path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for pair in pairs:
            f.write(format_pair(pair) + "\n")


def load_corpus(path) -> list[SentencePair]:
    path = Path(path)
    pairs, rejected = [], 0
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip("\n"):
                continue
            pair = parse_pair(line, path, line_no)
            if not accept_pair(pair):
                rejected += 1
                logger.warning("corpus pair rejected", extra={"path": str(path), "line_no": line_no})
                continue
            pairs.append(pair)
    logger.info("corpus loaded", extra={"path": str(path), "pairs": len(pairs), "rejected": rejected})
    return pairs


# -- batching ----------------------------------------------------------------

@dataclass
class Batch:
    indices: list[int]
    source: torch.Tensor
    source_lengths: torch.Tensor
    target: torch.Tensor
    target_lengths: torch.Tensor

    @property
    def ntokens(self) -> int:
        return int(self.target_lengths.sum())

    def __len__(self):
        return len(self.indices)


def _pad(seqs: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([len(s) for s in seqs], dtype=torch.long)
    out = torch.full((len(seqs), max(1, int(lengths.max()))), PAD_ID, dtype=torch.long)
    for row, seq in enumerate(seqs):
        out[row, : len(seq)] = torch.tensor(seq, dtype=torch.long)
    return out, lengths


def collate(pairs: Sequence[SentencePair], indices: Sequence[int]) -> Batch:
    source, source_lengths = _pad([pairs[i].source_ids for i in indices])
    target, target_lengths = _pad([pairs[i].target_ids for i in indices])
    return Batch(list(indices), source, source_lengths, target, target_lengths)


def plan_batches(pairs: Sequence[SentencePair], max_tokens: int, seed: int | None = None) -> list[list[int]]:
    """
    Length-bucketed index groups whose padded source size (rows x longest row)
    stays within `max_tokens`. With a seed the group order is shuffled.
    """
    for i, pair in enumerate(pairs):
        if len(pair.source_ids) > max_tokens:
            raise SimulError(f"pair {i} has {len(pair.source_ids)} source tokens, above max_tokens={max_tokens}")
    order = sorted(range(len(pairs)), key=lambda i: (len(pairs[i].source_ids), len(pairs[i].target_ids), i))
    groups, current, longest = [], [], 0
    for i in order:
        width = max(longest, len(pairs[i].source_ids))
        if current and width * (len(current) + 1) > max_tokens:
            groups.append(current)
            current, width = [], len(pairs[i].source_ids)
        current.append(i)
        longest = width
    if current:
        groups.append(current)
    if seed is not None:
        rs = np.random.default_rng(seed)
        groups = [groups[i] for i in rs.permutation(len(groups))]
    return groups


def make_batches(pairs: Sequence[SentencePair], max_tokens: int, seed: int | None = None) -> list[Batch]:
    return [collate(pairs, group) for group in plan_batches(pairs, max_tokens, seed)]


class PlannedBatches(Dataset):
    """Map-style dataset over a batch plan: item i is the collated group plan[i]."""

    def __init__(self, pairs: Sequence[SentencePair], plan: Sequence[Sequence[int]]):
        self.pairs = pairs
        self.plan = plan

    def __len__(self):
        return len(self.plan)

    def __getitem__(self, i: int) -> Batch:
        return collate(self.pairs, self.plan[i])
