import pytest
import torch

from app.data import generate_corpus, make_batches
from app.errors import SimulError
from app.streaming import (
    MonotonicClock,
    StreamingEngine,
    StreamTrace,
    decode_batch,
    decode_with_oracle,
    offline_decode,
    oracle_permutation_matrix,
    read_count_clock,
    stream_translate,
    wait_k_schedule,
)


def test_wait_k_schedule():
    assert wait_k_schedule(3, 5, 7) == [3, 4, 5, 5, 5, 5, 5]
    assert wait_k_schedule(1, 4, 2) == [1, 2]
    with pytest.raises(SimulError):
        wait_k_schedule(0, 4, 4)


@pytest.mark.parametrize("k", [1, 2, 4])
def test_streaming_matches_offline_decoding(model, random_source, k):
    for length in range(1, 13):
        source = random_source(length)
        tokens, trace = stream_translate(model, source, delay_k=k, clock=read_count_clock)
        assert tokens == offline_decode(model, source, delay_k=k)
        assert trace.finished and trace.source_length == length


def test_prefix_emissions_are_stable(model, random_source):
    source = random_source(10)
    _, full = stream_translate(model, source, delay_k=2, clock=read_count_clock)
    for cut in range(1, 10):
        engine = StreamingEngine(model, delay_k=2, clock=read_count_clock)
        emitted = []
        for token in source[:cut]:
            emitted.extend(engine.read(token))
        assert emitted == [t for t, g in zip(full.tokens, full.g) if g <= cut]


def test_single_token_with_k1_emits_at_first_read(model):
    tokens, trace = stream_translate(model, [5], delay_k=1, clock=read_count_clock)
    assert trace.g == [1] * len(tokens)


def test_trace_is_monotone(model, random_source):
    _, trace = stream_translate(model, random_source(12), delay_k=3, clock=MonotonicClock())
    assert trace.g == sorted(trace.g)
    assert trace.ms == sorted(trace.ms)
    assert all(g <= 12 for g in trace.g)


def test_empty_source(model):
    tokens, trace = stream_translate(model, [], clock=read_count_clock)
    assert tokens == [] and trace.finished and trace.source_length == 0


def test_engine_rejects_reads_after_finish(model):
    engine = StreamingEngine(model, clock=read_count_clock)
    engine.read(3)
    engine.finish()
    with pytest.raises(SimulError):
        engine.read(4)
    engine.start()
    engine.read(4)


def test_trace_round_trip(tmp_path, model, random_source):
    _, trace = stream_translate(model, random_source(8), clock=read_count_clock)
    path = tmp_path / "trace.jsonl"
    trace.save(path)
    loaded = StreamTrace.load(path, source_length=8)
    assert loaded == trace


def test_trace_rejects_decreasing_reads():
    trace = StreamTrace(source_length=3)
    trace.record(5, 2, 2.0)
    with pytest.raises(SimulError):
        trace.record(6, 1, 3.0)


def test_batched_decoding_matches_single_sentences(model, gen_cfg):
    pairs = generate_corpus(gen_cfg, 12)
    for batch in make_batches(pairs, max_tokens=40):
        for index, hyp in zip(batch.indices, decode_batch(model, batch)):
            assert hyp == offline_decode(model, pairs[index].source_ids)


def test_oracle_decoding(sorter_model, model, random_source):
    source = random_source(6)
    reference = [s + 6 for s in source]
    z, states = oracle_permutation_matrix(sorter_model, source, reference)
    assert z.shape == (6, 6)
    assert torch.allclose(z.sum(dim=0), torch.ones(6, dtype=z.dtype))
    assert isinstance(decode_with_oracle(sorter_model, source, reference), list)
    with pytest.raises(SimulError):
        decode_with_oracle(model, source, reference)


@pytest.mark.slow
@pytest.mark.parametrize("k", [1, 3])
def test_streaming_matches_offline_on_a_full_corpus(model, gen_cfg, k):
    pairs = generate_corpus(gen_cfg, 500, seed=31)
    batched = {}
    for batch in make_batches(pairs, max_tokens=200):
        batched.update(zip(batch.indices, decode_batch(model, batch, delay_k=k)))
    for index, pair in enumerate(pairs):
        tokens, trace = stream_translate(model, pair.source_ids, delay_k=k, clock=read_count_clock)
        assert tokens == offline_decode(model, pair.source_ids, delay_k=k) == batched[index], index
        assert trace.finished
