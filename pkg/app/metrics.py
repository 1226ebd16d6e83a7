"""
Latency, quality and anticipation metrics.

BLEU and chrF are computed with sacrebleu on token ids rendered as text: BLEU
sees space-separated ids, chrF sees one character per id.
"""
import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np
from sacrebleu.metrics import BLEU, CHRF

from app.errors import IncompleteTraceError, SimulError

if TYPE_CHECKING:
    from app.data import AlignmentLink
    from app.streaming import StreamTrace

CHAR_BASE = 0x4E00
CURVE_FIELDS = ("k", "bleu", "chrf", "al", "al_ca_ms", "laal", "bp", "oracle_bleu", "latency_skipped")


def render_words(ids: Sequence[int]) -> str:
    return " ".join(str(int(i)) for i in ids)


def render_chars(ids: Sequence[int]) -> str:
    return "".join(chr(CHAR_BASE + int(i)) for i in ids)


# -- latency -----------------------------------------------------------------

def _cutoff(g: Sequence[int], source_length: int) -> int:
    prev = 0
    for t, value in enumerate(g, start=1):
        if value < prev:
            raise SimulError(f"schedule decreases at step {t}: {prev} -> {value}")
        if value > source_length:
            raise SimulError(f"schedule reads {value} tokens of a {source_length}-token source")
        prev = value
    for t, value in enumerate(g, start=1):
        if value == source_length:
            return t
    raise IncompleteTraceError(f"schedule never reaches the full source ({source_length} tokens)")


def average_lagging(g: Sequence[int], source_length: int, target_length: int) -> float:
    """AL = 1/tau * sum_{t <= tau} g(t) - (t-1) * |x| / |y|, tau the first t reading all of x."""
    if source_length < 1 or target_length < 1:
        raise SimulError("average lagging needs non-empty source and target")
    tau = _cutoff(g, source_length)
    rate = target_length / source_length
    return sum(g[t - 1] - (t - 1) / rate for t in range(1, tau + 1)) / tau


def length_adaptive_average_lagging(g: Sequence[int], source_length: int, target_length: int,
                                    reference_length: int) -> float:
    return average_lagging(g, source_length, max(target_length, reference_length))


def al_ca(trace: "StreamTrace", step_ms: float = 1.0) -> float:
    """Computation-aware AL in ms, d_CA taken from the trace's clock readings."""
    if not trace.finished:
        raise IncompleteTraceError("trace is not finished")
    target_length = len(trace.g)
    if target_length < 1:
        raise IncompleteTraceError("trace has no emissions")
    tau = _cutoff(trace.g, trace.source_length)
    rate = target_length / trace.source_length
    return sum(trace.ms[i - 1] - (i - 1) * step_ms / rate for i in range(1, tau + 1)) / tau


# -- quality -----------------------------------------------------------------

@dataclass
class BleuResult:
    score: float
    precisions: list[float]
    bp: float
    sys_len: int
    ref_len: int


class BleuScorer:
    """Corpus BLEU from summed per-sentence statistics (exp smoothing, lowercased, no tokenizer)."""

    def __init__(self, max_n: int = 4, smooth_method: str = "exp"):
        self.max_n = max_n
        self.smooth_method = smooth_method
        self._bleu = BLEU(lowercase=True, tokenize="none", smooth_method=smooth_method,
                          max_ngram_order=max_n)

    def sentence_stats(self, hypotheses, reference_sets) -> np.ndarray:
        """(n, 2 * max_n + 2): correct n-grams, total n-grams, hyp length, closest ref length."""
        rows = []
        for hyp, refs in zip(hypotheses, reference_sets):
            s = self._bleu.corpus_score([render_words(hyp)], [[render_words(r)] for r in refs])
            rows.append(list(s.counts) + list(s.totals) + [s.sys_len, s.ref_len])
        return np.asarray(rows, dtype=np.int64).reshape(len(rows), 2 * self.max_n + 2)

    def from_stats(self, totals: np.ndarray) -> BleuResult:
        n = self.max_n
        s = BLEU.compute_bleu(
            correct=[int(v) for v in totals[:n]],
            total=[int(v) for v in totals[n:2 * n]],
            sys_len=int(totals[2 * n]),
            ref_len=int(totals[2 * n + 1]),
            smooth_method=self.smooth_method,
            max_ngram_order=n,
        )
        return BleuResult(score=s.score, precisions=list(s.precisions), bp=s.bp,
                          sys_len=s.sys_len, ref_len=s.ref_len)

    def score_stats(self, totals: np.ndarray) -> float:
        return self.from_stats(totals).score

    def __call__(self, hypotheses, reference_sets) -> float:
        return bleu(hypotheses, reference_sets, self.max_n, self.smooth_method).score


def _check_corpus(hypotheses, reference_sets):
    if len(hypotheses) == 0:
        raise SimulError("empty corpus")
    if len(hypotheses) != len(reference_sets):
        raise SimulError(f"{len(hypotheses)} hypotheses but {len(reference_sets)} reference sets")
    for refs in reference_sets:
        if len(refs) < 1:
            raise SimulError("every hypothesis needs at least one reference")


def bleu(hypotheses: Sequence[Sequence[int]], reference_sets: Sequence[Sequence[Sequence[int]]],
         max_n: int = 4, smooth_method: str = "exp") -> BleuResult:
    _check_corpus(hypotheses, reference_sets)
    scorer = BleuScorer(max_n, smooth_method)
    return scorer.from_stats(scorer.sentence_stats(hypotheses, reference_sets).sum(axis=0))


def chrf(hypothesis: Sequence[int], reference: Sequence[int], beta: int = 2, max_n: int = 6) -> float:
    """Sentence chrF in [0, 1]; an empty hypothesis scores 0."""
    if len(reference) == 0:
        raise SimulError("chrF needs a non-empty reference")
    return corpus_chrf([hypothesis], [[reference]], beta, max_n)


def corpus_chrf(hypotheses, reference_sets, beta: int = 2, max_n: int = 6) -> float:
    _check_corpus(hypotheses, reference_sets)
    width = len(reference_sets[0])
    if any(len(refs) != width for refs in reference_sets):
        raise SimulError("chrF needs the same number of references for every sentence")
    metric = CHRF(char_order=max_n, word_order=0, beta=beta, whitespace=False)
    streams = [[render_chars(refs[r]) for refs in reference_sets] for r in range(width)]
    score = metric.corpus_score([render_chars(h) for h in hypotheses], streams)
    return score.score / 100.0


def corpus_chrf_percent(hypotheses, reference_sets) -> float:
    return 100.0 * corpus_chrf(hypotheses, reference_sets)


# -- anticipation ------------------------------------------------------------

def k_anticipation_rate(links: Sequence[Sequence["AlignmentLink"]], k: int) -> float:
    """Share of links whose source word lies k or more words ahead: i - k + 1 > j."""
    if k < 1:
        raise SimulError(f"k must be >= 1, got {k}")
    total = hits = 0
    for pair_links in links:
        for link in pair_links:
            total += 1
            hits += link.source_index - k + 1 > link.target_index
    if total == 0:
        raise SimulError("no alignment links to score")
    return hits / total


def anticipation_curve(links, ks: Sequence[int] = tuple(range(1, 10))) -> list[tuple[int, float]]:
    return [(k, k_anticipation_rate(links, k)) for k in ks]


# -- significance ------------------------------------------------------------

@dataclass
class BootstrapResult:
    p_value: float
    score_a: float
    score_b: float
    mean_a: float
    ci_a: float
    mean_b: float
    ci_b: float
    resamples: int


def paired_bootstrap(metric: Callable, system_a, system_b, references,
                     resamples: int = 1000, seed: int = 1) -> BootstrapResult:
    """
    One-sided paired bootstrap: p is the share of resamples where B scores at
    least as well as A. Scorers exposing `sentence_stats`/`score_stats` are
    resampled on summed statistics; any other `metric(hyps, refs)` is re-run.
    """
    if not (len(system_a) == len(system_b) == len(references)):
        raise SimulError(
            f"paired bootstrap needs equal sizes, got {len(system_a)}, {len(system_b)}, {len(references)}"
        )
    if len(references) == 0:
        raise SimulError("empty corpus")
    n = len(references)
    rs = np.random.RandomState(seed)
    indices = rs.randint(0, n, size=(resamples, n))

    if hasattr(metric, "sentence_stats"):
        stats_a = metric.sentence_stats(system_a, references)
        stats_b = metric.sentence_stats(system_b, references)
        score = lambda stats, idx: metric.score_stats(stats[idx].sum(axis=0))
        full_a, full_b = score(stats_a, slice(None)), score(stats_b, slice(None))
        samples_a = np.array([score(stats_a, idx) for idx in indices])
        samples_b = np.array([score(stats_b, idx) for idx in indices])
    else:
        pick = lambda seq, idx: [seq[i] for i in idx]
        full_a, full_b = metric(system_a, references), metric(system_b, references)
        samples_a = np.array([metric(pick(system_a, idx), pick(references, idx)) for idx in indices])
        samples_b = np.array([metric(pick(system_b, idx), pick(references, idx)) for idx in indices])

    return BootstrapResult(
        p_value=float(np.mean(samples_b >= samples_a)),
        score_a=float(full_a),
        score_b=float(full_b),
        mean_a=float(samples_a.mean()),
        ci_a=float(1.96 * samples_a.std()),
        mean_b=float(samples_b.mean()),
        ci_b=float(1.96 * samples_b.std()),
        resamples=resamples,
    )


# -- reports -----------------------------------------------------------------

@dataclass
class SentenceRecord:
    index: int
    hypothesis: list[int]
    reference: list[int]
    g: list[int]
    al: float | None
    al_ca_ms: float | None


@dataclass
class EvalReport:
    k: int
    bleu: float
    chrf: float
    al: float
    al_ca_ms: float
    laal: float
    precisions: list[float]
    bp: float
    latency_skipped: int = 0
    oracle_bleu: float | None = None
    significance: dict | None = None
    sentences: list[SentenceRecord] = field(default_factory=list)

    def to_dict(self, with_sentences: bool = True) -> dict:
        data = asdict(self)
        if not with_sentences:
            data.pop("sentences")
        return data

    def curve_row(self) -> dict:
        return {name: getattr(self, name) for name in CURVE_FIELDS}


def _mean(values: list[float]) -> float:
    return float(np.mean(values)) if values else math.nan


def summarize(k: int, hypotheses, references, traces, oracle_hypotheses=None) -> EvalReport:
    """Corpus scores plus latency means over sentences with a complete, non-empty trace."""
    reference_sets = [[r] for r in references]
    quality = bleu(hypotheses, reference_sets)
    records, als, cas, laals, skipped = [], [], [], [], 0
    for i, (hyp, ref, trace) in enumerate(zip(hypotheses, references, traces)):
        al = ca = None
        if hyp and trace.finished:
            try:
                al = average_lagging(trace.g, trace.source_length, len(hyp))
                ca = al_ca(trace)
                laals.append(length_adaptive_average_lagging(trace.g, trace.source_length, len(hyp), len(ref)))
            except IncompleteTraceError:
                al = ca = None
        if al is None:
            skipped += 1
        else:
            als.append(al)
            cas.append(ca)
        records.append(SentenceRecord(i, list(hyp), list(ref), list(trace.g), al, ca))
    oracle = None
    if oracle_hypotheses is not None:
        oracle = bleu(oracle_hypotheses, reference_sets).score
    return EvalReport(
        k=k,
        bleu=quality.score,
        chrf=corpus_chrf_percent(hypotheses, reference_sets),
        al=_mean(als),
        al_ca_ms=_mean(cas),
        laal=_mean(laals),
        precisions=quality.precisions,
        bp=quality.bp,
        latency_skipped=skipped,
        oracle_bleu=oracle,
        sentences=records,
    )


def attach_significance(reports: Sequence[EvalReport], baseline: Sequence[EvalReport],
                        resamples: int = 1000, seed: int = 1) -> list[EvalReport]:
    """
    Paired BLEU bootstrap of each report against the baseline report at the same k.
    The p-value is the share of resamples where the baseline scores at least as
    well, so a small p means the evaluated system is better.
    """
    by_k = {r.k: r for r in baseline}
    for report in reports:
        other = by_k.get(report.k)
        if other is None:
            raise SimulError(f"baseline has no report for k={report.k}")
        if [s.reference for s in report.sentences] != [s.reference for s in other.sentences]:
            raise SimulError(f"k={report.k}: systems were scored on different references")
        result = paired_bootstrap(
            BleuScorer(),
            [s.hypothesis for s in report.sentences],
            [s.hypothesis for s in other.sentences],
            [[s.reference] for s in report.sentences],
            resamples=resamples,
            seed=seed,
        )
        report.significance = asdict(result)
    return list(reports)


def write_report_json(reports: Sequence[EvalReport], path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = [r.to_dict() for r in reports]
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")


def write_curve_csv(reports: Sequence[EvalReport], path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(CURVE_FIELDS))
        writer.writeheader()
        for report in reports:
            writer.writerow(report.curve_row())
