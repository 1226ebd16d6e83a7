import dataclasses
import json
import math

import pytest

from app.data import AlignmentLink, generate_corpus
from app.errors import IncompleteTraceError, SimulError
from app.metrics import (
    BleuScorer,
    al_ca,
    attach_significance,
    anticipation_curve,
    average_lagging,
    bleu,
    chrf,
    corpus_chrf,
    k_anticipation_rate,
    length_adaptive_average_lagging,
    paired_bootstrap,
    summarize,
    write_curve_csv,
    write_report_json,
)
from app.streaming import StreamTrace, wait_k_schedule


def _trace(g, source_length, ms=None, finished=True):
    trace = StreamTrace(source_length=source_length, finished=finished)
    for t, reads in enumerate(g):
        trace.record(100 + t, reads, float(reads) if ms is None else ms[t])
    return trace


@pytest.mark.parametrize("k", [1, 3, 5, 7, 9])
def test_average_lagging_of_wait_k_is_k(k):
    assert average_lagging(wait_k_schedule(k, 10, 10), 10, 10) == pytest.approx(k, abs=1e-12)


def test_average_lagging_examples():
    assert average_lagging([3, 4, 5, 6, 7, 8, 9, 10, 10, 10], 10, 10) == pytest.approx(3.0)
    assert average_lagging([1], 1, 1) == 1.0
    # full-sentence policy
    assert average_lagging([4, 4, 4, 4], 4, 4) == 4.0


def test_average_lagging_needs_a_complete_schedule():
    with pytest.raises(IncompleteTraceError):
        average_lagging([1, 2, 3], 5, 3)
    with pytest.raises(SimulError):
        average_lagging([2, 1, 3], 3, 3)


def test_length_adaptive_lagging_uses_the_longer_length():
    g = [2, 3, 3]
    assert length_adaptive_average_lagging(g, 3, 3, 6) == average_lagging(g, 3, 6)
    assert length_adaptive_average_lagging(g, 3, 3, 2) == average_lagging(g, 3, 3)


def test_computation_aware_lagging_with_read_count_clock():
    g = wait_k_schedule(3, 8, 8)
    trace = _trace(g, 8)
    assert al_ca(trace) == pytest.approx(average_lagging(g, 8, 8), abs=1e-9)
    shifted = _trace(g, 8, ms=[reads + 2.5 for reads in g])
    assert al_ca(shifted) == pytest.approx(average_lagging(g, 8, 8) + 2.5, abs=1e-9)


def test_computation_aware_lagging_single_token():
    assert al_ca(_trace([1], 1, ms=[5.0])) == 5.0
    with pytest.raises(IncompleteTraceError):
        al_ca(_trace([1], 1, finished=False))
    with pytest.raises(IncompleteTraceError):
        al_ca(_trace([], 3))


def test_bleu_of_identical_corpus():
    hyps = [[2, 3, 4, 5, 6], [7, 8, 9, 10]]
    result = bleu(hyps, [[h] for h in hyps])
    assert result.score == pytest.approx(100.0)
    assert result.bp == 1.0


def test_bleu_brevity_penalty():
    result = bleu([[2, 3, 4, 5]], [[[2, 3, 4, 5, 6]]])
    assert result.precisions == pytest.approx([100.0] * 4)
    assert result.score == pytest.approx(100 * math.exp(-0.25), abs=1e-9)


def test_bleu_without_four_gram_overlap():
    result = bleu([[2, 3, 4, 9]], [[[2, 3, 4, 5]]], smooth_method="none")
    assert result.score == 0.0


def test_bleu_is_invariant_to_corpus_order():
    hyps = [[2, 3, 4, 5, 6], [7, 8, 9], [2, 9, 9, 4, 5, 6]]
    refs = [[[2, 3, 4, 5, 7]], [[7, 8, 9, 10]], [[2, 9, 4, 5, 6]]]
    order = [2, 0, 1]
    assert bleu(hyps, refs).score == pytest.approx(
        bleu([hyps[i] for i in order], [refs[i] for i in order]).score, abs=1e-12
    )


def test_bleu_rejects_mismatched_corpora():
    with pytest.raises(SimulError):
        bleu([[2]], [[[2]], [[3]]])
    with pytest.raises(SimulError):
        bleu([], [])


def test_sentence_chrf():
    assert chrf([2, 3, 4], [2, 3, 4]) == pytest.approx(1.0)
    assert chrf([2, 3], [5, 6]) == 0.0
    assert chrf([], [2, 3]) == 0.0
    assert chrf([2, 3], [2, 3, 4]) == pytest.approx(35 / 55, abs=1e-9)
    with pytest.raises(SimulError):
        chrf([2], [])


def test_corpus_chrf_bounds():
    score = corpus_chrf([[2, 3, 4], [5, 6]], [[[2, 3, 5]], [[5, 6]]])
    assert 0.0 < score < 1.0


def test_k_anticipation_rate_examples():
    assert k_anticipation_rate([[AlignmentLink(3, 1)]], 2) == 1.0
    diagonal = [[AlignmentLink(i, i) for i in range(1, 6)]]
    assert all(rate == 0.0 for _, rate in anticipation_curve(diagonal))
    with pytest.raises(SimulError):
        k_anticipation_rate([[]], 1)
    with pytest.raises(SimulError):
        k_anticipation_rate(diagonal, 0)


def test_k_anticipation_rate_is_non_increasing():
    links = [[AlignmentLink(1, 1), AlignmentLink(5, 2), AlignmentLink(3, 3), AlignmentLink(2, 4)]]
    rates = [rate for _, rate in anticipation_curve(links)]
    assert rates == sorted(rates, reverse=True)
    assert rates[0] == 0.25


def _accuracy(hyps, refs):
    return sum(h == r for h, r in zip(hyps, refs)) / len(refs)


def test_paired_bootstrap_identical_systems():
    refs = [[2, 3, 4, 5], [4, 5, 6, 7, 8], [6, 7, 8, 9]]
    result = paired_bootstrap(_accuracy, refs, refs, refs, resamples=200, seed=1)
    assert result.p_value == 1.0
    scorer = BleuScorer()
    result = paired_bootstrap(scorer, refs, refs, [[r] for r in refs], resamples=200, seed=1)
    assert result.p_value == 1.0
    assert result.score_a == pytest.approx(100.0)


def test_paired_bootstrap_clear_winner():
    refs = [[i, i + 1] for i in range(2, 22)]
    wrong = [[i + 1, i] for i in range(2, 22)]
    result = paired_bootstrap(_accuracy, refs, wrong, refs, resamples=1000, seed=2)
    assert result.p_value <= 1 / 1000
    assert result.mean_a == 1.0 and result.ci_a == 0.0


def test_paired_bootstrap_is_deterministic():
    refs = [[2, 3, 4], [5, 6], [7, 8, 9]]
    hyps_a = [[2, 3, 4], [5, 7], [7, 8]]
    hyps_b = [[2, 3], [5, 6], [9, 8, 7]]
    ref_sets = [[r] for r in refs]
    first = paired_bootstrap(BleuScorer(), hyps_a, hyps_b, ref_sets, resamples=100, seed=5)
    second = paired_bootstrap(BleuScorer(), hyps_a, hyps_b, ref_sets, resamples=100, seed=5)
    assert first == second


def test_paired_bootstrap_needs_equal_sizes():
    with pytest.raises(SimulError):
        paired_bootstrap(_accuracy, [[2]], [[2], [3]], [[2]])


def test_summarize_skips_empty_hypotheses(tmp_path):
    refs = [[9, 10, 11], [12, 13]]
    hyps = [[9, 10, 11], []]
    traces = [_trace([1, 2, 3], 3), _trace([], 2)]
    report = summarize(1, hyps, refs, traces)
    assert report.latency_skipped == 1
    assert report.al == pytest.approx(1.0)
    assert report.sentences[1].al is None

    write_report_json([report], tmp_path / "report.json")
    assert json.loads((tmp_path / "report.json").read_text())[0]["k"] == 1
    write_curve_csv([report], tmp_path / "curve.csv")
    lines = (tmp_path / "curve.csv").read_text().splitlines()
    assert lines[0].startswith("k,bleu,chrf,al")
    assert len(lines) == 2


def _report(k, hyps, refs):
    return summarize(k, hyps, refs, [_trace(list(range(1, len(h) + 1)), len(h)) for h in hyps])


def test_significance_attaches_a_bootstrap_per_delay():
    refs = [[i, i + 1, i + 2, i + 3] for i in range(2, 22)]
    wrong = [[r[1], r[0], r[3], r[2]] for r in refs]
    reports = [_report(k, refs, refs) for k in (1, 3)]
    baseline = [_report(k, wrong, refs) for k in (3, 1)]
    attach_significance(reports, baseline, resamples=200)
    for report in reports:
        assert report.significance["score_a"] == pytest.approx(100.0)
        assert report.significance["score_b"] < report.significance["score_a"]
        assert report.significance["p_value"] <= 1 / 200
        assert report.to_dict(with_sentences=False)["significance"]["resamples"] == 200


def test_significance_needs_matching_delays_and_references():
    refs = [[2, 3, 4], [5, 6, 7]]
    with pytest.raises(SimulError):
        attach_significance([_report(1, refs, refs)], [_report(3, refs, refs)])
    with pytest.raises(SimulError):
        attach_significance([_report(1, refs, refs)], [_report(1, refs, refs[::-1])])


def test_average_lagging_grows_with_the_delay(gen_cfg):
    pairs = generate_corpus(dataclasses.replace(gen_cfg, reorder_rule="monotonic"), 30)
    means = []
    for k in range(1, 10):
        als = []
        for pair in pairs:
            n, m = len(pair.source_ids), len(pair.target_ids)
            als.append(average_lagging(wait_k_schedule(k, n, m), n, m))
        means.append(sum(als) / len(als))
        if k > 1:
            assert all(a >= b for a, b in zip(als, previous))
        previous = als
    assert means == sorted(means)
    assert means[0] < means[-1]
