import itertools
import math

import pytest
import torch

from app.ctc import (
    CollapseState,
    batch_ctc_loss,
    collapse,
    ctc_loss,
    export_alignment_csv,
    online_collapse_step,
    path_log_probability,
    required_frames,
    viterbi_align,
)
from app.errors import InfeasibleAlignmentError, ShapeError
from app.tensor import DTYPE, grad_check


def _log_probs(logits):
    return torch.log_softmax(logits, dim=-1).tolist()


def _valid_paths(frames, vocab, target):
    return [p for p in itertools.product(range(vocab), repeat=frames) if collapse(p) == list(target)]


def _brute_force_log_prob(logits, target):
    """log of the summed probability of every frame path that collapses to `target`."""
    lp = _log_probs(logits)
    scores = [sum(lp[t][s] for t, s in enumerate(p)) for p in _valid_paths(*logits.shape, target)]
    top = max(scores)
    return top + math.log(sum(math.exp(s - top) for s in scores))


def _random_instance(gen):
    vocab = int(torch.randint(2, 5, (1,), generator=gen))
    frames = int(torch.randint(1, 6, (1,), generator=gen))
    length = int(torch.randint(1, 4, (1,), generator=gen))
    target = torch.randint(1, vocab, (length,), generator=gen).tolist()
    logits = torch.randn(frames, vocab, generator=gen, dtype=DTYPE) * 2
    return logits, target


def test_single_frame_single_label():
    logits = torch.tensor([[0.2, 1.5, -0.3]], dtype=DTYPE)
    expected = -torch.log_softmax(logits, dim=-1)[0, 1]
    assert ctc_loss(logits, [1]).item() == pytest.approx(expected.item(), abs=1e-12)


def test_two_uniform_frames():
    # valid paths: (a, blank), (blank, a), (a, a)
    loss = ctc_loss(torch.zeros(2, 3, dtype=DTYPE), [1])
    assert loss.item() == pytest.approx(math.log(3), abs=1e-12)


def test_forward_algorithm_matches_path_enumeration():
    gen = torch.Generator().manual_seed(0)
    checked = 0
    while checked < 200:
        logits, target = _random_instance(gen)
        if logits.shape[0] < required_frames(target):
            with pytest.raises(InfeasibleAlignmentError):
                ctc_loss(logits, target)
            continue
        log_p = -ctc_loss(logits, target).item()
        assert abs(log_p - _brute_force_log_prob(logits, target)) <= 1e-9
        assert 0.0 < math.exp(log_p) <= 1.0
        checked += 1


def test_repeated_labels_need_a_separating_blank():
    assert required_frames([3, 3]) == 3
    assert required_frames([3, 4, 4, 4]) == 6
    with pytest.raises(InfeasibleAlignmentError) as err:
        ctc_loss(torch.zeros(2, 4, dtype=DTYPE), [3, 3])
    assert err.value.required == 3
    assert math.isfinite(ctc_loss(torch.zeros(3, 4, dtype=DTYPE), [3, 3]).item())


def test_label_smoothing_adds_uniform_kl():
    logits = torch.randn(4, 5, generator=torch.Generator().manual_seed(1), dtype=DTYPE)
    nll = ctc_loss(logits, [2, 3])
    lp = torch.log_softmax(logits, dim=-1)
    kl = (-math.log(5) - lp.mean(dim=-1)).mean()
    smoothed = ctc_loss(logits, [2, 3], label_smoothing=0.1)
    assert smoothed.item() == pytest.approx((0.9 * nll + 0.1 * kl).item(), abs=1e-12)


@pytest.mark.parametrize("smoothing", [0.0, 0.1])
def test_gradients_match_finite_differences(smoothing):
    logits = torch.randn(5, 4, generator=torch.Generator().manual_seed(2), dtype=DTYPE)
    assert grad_check(lambda x: ctc_loss(x, [1, 2, 2], label_smoothing=smoothing), logits) <= 1e-4


def test_batched_loss_matches_single_sentences():
    gen = torch.Generator().manual_seed(3)
    logits = torch.randn(3, 6, 5, generator=gen, dtype=DTYPE)
    input_lengths = torch.tensor([6, 4, 5])
    targets = torch.tensor([[2, 3, 4], [4, 4, 1], [3, 1, 1]])
    target_lengths = torch.tensor([3, 2, 1])
    losses = batch_ctc_loss(logits, input_lengths, targets, target_lengths)
    for b in range(3):
        single = ctc_loss(logits[b, : input_lengths[b]], targets[b, : target_lengths[b]].tolist())
        assert losses[b].item() == pytest.approx(single.item(), abs=1e-12)


def test_unreachable_cells_give_finite_gradients():
    logits = torch.randn(1, 8, 4, generator=torch.Generator().manual_seed(4), dtype=DTYPE).requires_grad_()
    loss = batch_ctc_loss(logits, torch.tensor([5]), torch.tensor([[1, 2, 3]]), torch.tensor([3]))
    loss.sum().backward()
    assert torch.isfinite(logits.grad).all()
    assert logits.grad[0, 5:].abs().max() == 0.0


def test_loss_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        ctc_loss(torch.zeros(2, 3, 4, dtype=DTYPE), [1])


def test_collapse_examples():
    assert collapse([1, 1, 0, 2, 0, 0, 2]) == [1, 2, 2]
    assert collapse([0, 0, 0]) == []
    assert collapse([1, 0, 1]) == [1, 1]
    assert collapse([1, 1, 1]) == [1]


def test_online_collapse_matches_offline():
    gen = torch.Generator().manual_seed(5)
    for _ in range(1000):
        symbols = torch.randint(0, 4, (int(torch.randint(0, 12, (1,), generator=gen)),), generator=gen).tolist()
        state, emitted = CollapseState(), []
        for sym in symbols:
            state, token = online_collapse_step(state, sym)
            if token is not None:
                emitted.append(token)
        assert emitted == collapse(symbols)


def test_online_collapse_steps():
    assert online_collapse_step(CollapseState(), 0) == (CollapseState(0), None)
    assert online_collapse_step(CollapseState(0), 3) == (CollapseState(3), 3)
    assert online_collapse_step(CollapseState(3), 3) == (CollapseState(3), None)


def test_viterbi_on_diagonal_logits_follows_target():
    target = [2, 3, 1]
    logits = torch.full((3, 4), -5.0, dtype=DTYPE)
    for t, label in enumerate(target):
        logits[t, label] = 5.0
    assert viterbi_align(logits, target) == target


def test_viterbi_path_is_the_best_valid_path():
    gen = torch.Generator().manual_seed(6)
    for _ in range(30):
        logits, target = _random_instance(gen)
        if logits.shape[0] < required_frames(target):
            continue
        path = viterbi_align(logits, target)
        assert collapse(path) == target
        lp = _log_probs(logits)
        best = max(sum(lp[t][s] for t, s in enumerate(p)) for p in _valid_paths(*logits.shape, target))
        assert path_log_probability(logits, path) == pytest.approx(best, abs=1e-9)


def test_viterbi_rejects_infeasible_and_empty_inputs():
    with pytest.raises(InfeasibleAlignmentError):
        viterbi_align(torch.zeros(1, 3, dtype=DTYPE), [1, 2])
    with pytest.raises(ShapeError):
        viterbi_align(torch.zeros(0, 3, dtype=DTYPE), [])


def test_export_alignment_csv(tmp_path):
    path = tmp_path / "align.csv"
    export_alignment_csv([0, 5, 5, 0], path, {5: "w5"})
    lines = path.read_text().splitlines()
    assert lines[0] == "frame,symbol,label"
    assert lines[1] == "0,0,<blank>"
    assert lines[2] == "1,5,w5"
