from prometheus_client import Counter, Gauge, Histogram, start_http_server

TRAIN_STEPS = Counter(
    "simt_train_steps_total",
    "Optimizer steps taken",
    ["phase"]
)

SKIPPED_PAIRS = Counter(
    "simt_skipped_pairs_total",
    "Sentence pairs skipped for infeasible CTC alignment"
)

TRAIN_LOSS = Gauge(
    "simt_train_loss",
    "Per-token training loss at the last logged step",
    ["phase"]
)

LEARNING_RATE = Gauge(
    "simt_learning_rate",
    "Learning rate at the last step"
)

VALID_BLEU = Gauge(
    "simt_valid_bleu",
    "Validation corpus BLEU at the last validation",
    ["phase"]
)

STREAM_EMISSIONS = Counter(
    "simt_stream_emissions_total",
    "Target tokens emitted by streaming engines"
)

STREAM_TOKEN_LATENCY_MS = Histogram(
    "simt_stream_token_latency_ms",
    "Elapsed milliseconds from stream start to each emission",
    buckets=(0.1, 0.5, 1, 2, 5, 10, 25, 50, 100, 250, 1000)
)


def maybe_start_exporter(port, logger=None):
    if not port:
        return False
    start_http_server(port)
    if logger:
        logger.info("metrics exporter started", extra={"port": port})
    return True
