"""
Simultaneous decoding with Z = I: source tokens arrive one at a time, every
hidden state that becomes final is projected into frames, and frames are
collapsed online into target tokens.
"""
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import torch

from app.ctc import CollapseState, collapse, online_collapse_step
from app.data import Batch
from app.encoder import IncrementalEncoderState
from app.errors import SimulError
from app.model import SimulTranslator
from app.monitoring import STREAM_EMISSIONS, STREAM_TOKEN_LATENCY_MS
from app.sorting import apply_permutation, gumbel_sinkhorn, sinkhorn_attention

Clock = Callable[[int], float]


def read_count_clock(reads: int) -> float:
    """Zero-computation clock: every emission is stamped with the number of reads, in ms."""
    return float(reads)


class MonotonicClock:
    def __init__(self):
        self.start = time.perf_counter()

    def __call__(self, reads: int) -> float:
        return (time.perf_counter() - self.start) * 1000.0


@dataclass
class StreamTrace:
    source_length: int = 0
    tokens: list[int] = field(default_factory=list)
    g: list[int] = field(default_factory=list)
    ms: list[float] = field(default_factory=list)
    finished: bool = False

    @property
    def target_length(self) -> int:
        return len(self.tokens)

    def record(self, token: int, reads: int, ms: float):
        if self.g and (reads < self.g[-1] or ms < self.ms[-1]):
            raise SimulError("trace must be non-decreasing in reads and time")
        self.tokens.append(token)
        self.g.append(reads)
        self.ms.append(ms)

    def to_lines(self) -> list[str]:
        return [json.dumps({"token": t, "g": g, "ms": ms}) for t, g, ms in zip(self.tokens, self.g, self.ms)]

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(line + "\n" for line in self.to_lines()), encoding="utf-8")

    @classmethod
    def load(cls, path, source_length: int) -> "StreamTrace":
        trace = cls(source_length=source_length, finished=True)
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                item = json.loads(line)
                trace.record(int(item["token"]), int(item["g"]), float(item["ms"]))
        return trace


class StreamingEngine:
    """One stream at a time. `start` resets, `read` consumes a source token, `finish` ends the stream."""

    def __init__(self, model: SimulTranslator, delay_k: int | None = None, clock: Clock | None = None):
        self.model = model.eval()
        self.delay_k = delay_k or model.cfg.delay_k
        self.clock_factory = (lambda: clock) if clock is not None else MonotonicClock
        self.start()

    def start(self):
        self.clock = self.clock_factory()
        self.state: IncrementalEncoderState = self.model.encoder.init_state(self.delay_k)
        self.collapse_state = CollapseState()
        self.trace = StreamTrace()
        self.reads = 0

    @torch.no_grad()
    def read(self, token: int) -> list[int]:
        if self.trace.finished:
            raise SimulError("stream already finished")
        finalized = self.model.encoder.read(self.state, int(token))
        self.reads += 1
        return self._emit(finalized)

    @torch.no_grad()
    def finish(self) -> list[int]:
        emitted = self._emit(self.model.encoder.finish(self.state))
        self.trace.source_length = self.reads
        self.trace.finished = True
        return emitted

    def _emit(self, states: list[torch.Tensor]) -> list[int]:
        emitted = []
        for h in states:
            frames = self.model.projection(h.view(1, 1, -1))[0]
            for symbol in frames.argmax(dim=-1).tolist():
                self.collapse_state, token = online_collapse_step(self.collapse_state, symbol)
                if token is None:
                    continue
                ms = self.clock(self.reads)
                self.trace.record(token, self.reads, ms)
                STREAM_EMISSIONS.inc()
                STREAM_TOKEN_LATENCY_MS.observe(ms)
                emitted.append(token)
        return emitted


def stream_translate(model: SimulTranslator, source_tokens: Iterable[int], delay_k: int | None = None,
                     clock: Clock | None = None) -> tuple[list[int], StreamTrace]:
    engine = StreamingEngine(model, delay_k, clock)
    for token in source_tokens:
        engine.read(token)
    engine.finish()
    return list(engine.trace.tokens), engine.trace


def wait_k_schedule(k: int, source_length: int, target_length: int) -> list[int]:
    """g(t) = min(t + k - 1, |x|) for t = 1..|y|."""
    if k < 1:
        raise SimulError(f"k must be >= 1, got {k}")
    return [min(t + k - 1, source_length) for t in range(1, target_length + 1)]


# -- offline decoding --------------------------------------------------------

@torch.no_grad()
def offline_frames(model: SimulTranslator, source_ids: Sequence[int], delay_k: int | None = None) -> list[int]:
    model.eval()
    src = torch.as_tensor(list(source_ids), dtype=torch.long).unsqueeze(0)
    out = model(src, delay_k=delay_k, use_sorter=False)
    return out.logits[0].argmax(dim=-1).tolist()


def offline_decode(model: SimulTranslator, source_ids: Sequence[int], delay_k: int | None = None) -> list[int]:
    if len(source_ids) == 0:
        return []
    return collapse(offline_frames(model, source_ids, delay_k))


@torch.no_grad()
def decode_batch(model: SimulTranslator, batch: Batch, delay_k: int | None = None) -> list[list[int]]:
    model.eval()
    out = model(batch.source, batch.source_lengths, delay_k=delay_k, use_sorter=False)
    symbols = out.logits.argmax(dim=-1)
    return [collapse(symbols[b, : int(n)].tolist()) for b, n in enumerate(out.frame_lengths)]


@torch.no_grad()
def oracle_permutation_matrix(model: SimulTranslator, source_ids: Sequence[int], reference_ids: Sequence[int],
                              delay_k: int | None = None):
    """Z computed from the reference as unmasked context and without noise; also returns H."""
    if not model.has_sorter:
        raise SimulError("model has no sorting network; oracle decoding needs a full checkpoint")
    model.eval()
    src = torch.as_tensor(list(source_ids), dtype=torch.long).unsqueeze(0)
    ref = torch.as_tensor(list(reference_ids), dtype=torch.long).unsqueeze(0)
    states, _ = model.encoder(src, delay_k=delay_k)
    q = model.sorter.compute_q(states, ref, mask_ratio=0.0)
    cfg = dataclasses.replace(model.sorter.cfg, noise_factor=0.0)
    sample = gumbel_sinkhorn(sinkhorn_attention(q, states), cfg)
    return sample.matrix[0], states


def decode_with_oracle(model: SimulTranslator, source_ids: Sequence[int], reference_ids: Sequence[int],
                       delay_k: int | None = None) -> list[int]:
    z, states = oracle_permutation_matrix(model, source_ids, reference_ids, delay_k)
    with torch.no_grad():
        logits = model.projection(apply_permutation(z.unsqueeze(0), states))
    return collapse(logits[0].argmax(dim=-1).tolist())
