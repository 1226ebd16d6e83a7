"""
CTC: the forward-algorithm likelihood (with the uniform-prior smoothing term),
best-path alignment, and offline/online collapse of frame symbols.

Frames are rows of a (T, V) logit tensor; index 0 of the vocabulary is blank.
"""
import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch

from app.config import BLANK_ID, PAD_ID
from app.errors import InfeasibleAlignmentError, ShapeError
from app.tensor import DTYPE, primitive_forward

# finite stand-in for log(0); keeps gradients of unreachable cells at 0 instead of nan
LOG_ZERO = -1e30


def extend_with_blanks(target: Sequence[int]) -> tuple[list[int], list[bool]]:
    """Blank-augmented label sequence and, per position, whether the skip transition from s-2 is legal."""
    ext, skip = [BLANK_ID], [False]
    for i, label in enumerate(target):
        ext.append(int(label))
        skip.append(i > 0 and target[i] != target[i - 1])
        ext.append(BLANK_ID)
        skip.append(False)
    return ext, skip


def required_frames(target: Sequence[int]) -> int:
    """|y| plus one mandatory blank between every pair of equal neighbours."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def check_feasible(input_length: int, target: Sequence[int]):
    needed = required_frames(target)
    if input_length < needed:
        raise InfeasibleAlignmentError(input_length, needed)


def _extended_batch(targets: torch.Tensor, target_lengths: torch.Tensor):
    bsz, width = targets.shape
    size = 2 * width + 1
    ext = torch.full((bsz, size), BLANK_ID, dtype=torch.long)
    skip = torch.zeros((bsz, size), dtype=torch.bool)
    for b in range(bsz):
        labels = targets[b, : int(target_lengths[b])].tolist()
        e, s = extend_with_blanks(labels)
        ext[b, : len(e)] = torch.tensor(e, dtype=torch.long)
        skip[b, : len(s)] = torch.tensor(s, dtype=torch.bool)
    # positions past a sentence's end only feed positions further right
    return ext, skip


def forward_log_likelihood(
    log_probs: torch.Tensor,
    input_lengths: torch.Tensor,
    targets: torch.Tensor,
    target_lengths: torch.Tensor,
) -> torch.Tensor:
    """
    log p_CTC(y_b | frames_b) for every sentence in the batch, computed with the
    log-space forward recursion.

    log_probs: (B, T, V) normalized log-probabilities; targets: (B, U) padded.
    """
    bsz, frames, _ = log_probs.shape
    ext, skip = _extended_batch(targets, target_lengths)
    size = ext.shape[1]
    emit = log_probs.gather(2, ext.unsqueeze(1).expand(bsz, frames, size))

    neg = torch.full((bsz, 1), LOG_ZERO, dtype=DTYPE)
    alpha = torch.full((bsz, size), LOG_ZERO, dtype=DTYPE)
    alpha = torch.cat([emit[:, 0, :2], alpha[:, 2:]], dim=1) if size > 1 else emit[:, 0, :1]
    for t in range(1, frames):
        stay = alpha
        step = torch.cat([neg, alpha[:, :-1]], dim=1)
        jump = torch.cat([neg, neg, alpha[:, :-2]], dim=1).masked_fill(~skip, LOG_ZERO)
        moved = torch.logsumexp(torch.stack([stay, step, jump]), dim=0) + emit[:, t]
        active = (t < input_lengths).unsqueeze(1)
        alpha = torch.where(active, moved, alpha)

    last = (2 * target_lengths).unsqueeze(1)
    final_blank = alpha.gather(1, last).squeeze(1)
    final_label = alpha.gather(1, (last - 1).clamp(min=0)).squeeze(1)
    final_label = torch.where(target_lengths > 0, final_label, torch.full_like(final_label, LOG_ZERO))
    return torch.logaddexp(final_blank, final_label)


def uniform_kl(log_probs: torch.Tensor, input_lengths: torch.Tensor) -> torch.Tensor:
    """Per sentence mean over valid frames of KL(uniform || p)."""
    bsz, frames, vocab = log_probs.shape
    per_frame = -math.log(vocab) - primitive_forward("mean", log_probs, axis=-1)
    valid = torch.arange(frames).unsqueeze(0) < input_lengths.unsqueeze(1)
    per_frame = primitive_forward("masked_fill", per_frame, ~valid, 0.0)
    return primitive_forward("sum", per_frame, axis=-1) / input_lengths.to(DTYPE)


def batch_ctc_loss(
    logits: torch.Tensor,
    input_lengths: torch.Tensor,
    targets: torch.Tensor,
    target_lengths: torch.Tensor,
    label_smoothing: float = 0.0,
) -> torch.Tensor:
    """Per-sentence losses (B,): (1 - eps) * NLL + eps * mean-frame KL(uniform || p)."""
    if logits.dim() != 3 or targets.dim() != 2 or logits.shape[0] != targets.shape[0]:
        raise ShapeError("ctc_loss", [logits.shape, targets.shape])
    for b in range(targets.shape[0]):
        check_feasible(int(input_lengths[b]), targets[b, : int(target_lengths[b])].tolist())
    log_probs = primitive_forward("log_softmax", logits, axis=-1)
    nll = -forward_log_likelihood(log_probs, input_lengths, targets, target_lengths)
    if label_smoothing == 0.0:
        return nll
    return (1.0 - label_smoothing) * nll + label_smoothing * uniform_kl(log_probs, input_lengths)


def ctc_loss(logits: torch.Tensor, target_ids: Sequence[int], label_smoothing: float = 0.0) -> torch.Tensor:
    """Scalar loss for one sentence; logits are (T, V)."""
    if logits.dim() != 2:
        raise ShapeError("ctc_loss", [logits.shape], "expected (frames, vocab)")
    target = torch.as_tensor(list(target_ids), dtype=torch.long)
    targets = target.unsqueeze(0) if target.numel() else torch.full((1, 1), PAD_ID, dtype=torch.long)
    losses = batch_ctc_loss(
        logits.unsqueeze(0),
        torch.tensor([logits.shape[0]]),
        targets,
        torch.tensor([target.numel()]),
        label_smoothing,
    )
    return losses[0]


def viterbi_align(logits: torch.Tensor, target_ids: Sequence[int]) -> list[int]:
    """Most probable blank-augmented path (one symbol per frame) that collapses to the target."""
    target = [int(t) for t in target_ids]
    frames = logits.shape[0]
    if frames < 1:
        raise ShapeError("viterbi_align", [logits.shape], "no frames")
    check_feasible(frames, target)
    ext, skip = extend_with_blanks(target)
    size = len(ext)
    with torch.no_grad():
        lp = torch.log_softmax(logits.to(DTYPE), dim=-1).tolist()

    score = [[-math.inf] * size for _ in range(frames)]
    back = [[0] * size for _ in range(frames)]
    score[0][0] = lp[0][ext[0]]
    if size > 1:
        score[0][1] = lp[0][ext[1]]
    for t in range(1, frames):
        for s in range(size):
            candidates = [(score[t - 1][s], s)]
            if s >= 1:
                candidates.append((score[t - 1][s - 1], s - 1))
            if s >= 2 and skip[s]:
                candidates.append((score[t - 1][s - 2], s - 2))
            best, arg = max(candidates, key=lambda c: c[0])
            score[t][s] = best + lp[t][ext[s]]
            back[t][s] = arg

    ends = [size - 1] + ([size - 2] if size > 1 else [])
    s = max(ends, key=lambda e: score[frames - 1][e])
    path = [0] * frames
    for t in range(frames - 1, -1, -1):
        path[t] = ext[s]
        s = back[t][s]
    return path


def path_log_probability(logits: torch.Tensor, path: Sequence[int]) -> float:
    with torch.no_grad():
        lp = torch.log_softmax(logits.to(DTYPE), dim=-1)
        return float(sum(lp[t, sym] for t, sym in enumerate(path)))


def collapse(frame_symbols: Sequence[int]) -> list[int]:
    """Merge repeats, then drop blanks."""
    out, prev = [], None
    for sym in frame_symbols:
        sym = int(sym)
        if sym != prev and sym != BLANK_ID:
            out.append(sym)
        prev = sym
    return out


@dataclass(frozen=True)
class CollapseState:
    last_symbol: int | None = None


def online_collapse_step(state: CollapseState, frame_symbol: int) -> tuple[CollapseState, int | None]:
    sym = int(frame_symbol)
    emitted = sym if sym != BLANK_ID and sym != state.last_symbol else None
    return CollapseState(last_symbol=sym), emitted


def export_alignment_csv(path_symbols: Sequence[int], path, labels: dict[int, str] | None = None):
    """Rows of (frame, symbol, label)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["frame", "symbol", "label"])
        for frame, sym in enumerate(path_symbols):
            label = "<blank>" if sym == BLANK_ID else (labels or {}).get(sym, str(sym))
            writer.writerow([frame, sym, label])
