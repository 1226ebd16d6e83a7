"""
Two-phase training: CTC pretraining of encoder + projection, then fine-tuning
with the sorting network in the loop. Also the evaluation sweep over delays.
"""
import logging
import math
from pathlib import Path
from typing import Sequence

import torch
from torch.utils.data import DataLoader

from app.checkpoint import Checkpoint, TrainState, capture, load_checkpoint, save_checkpoint
from app.config import AsnConfig, RunConfig
from app.ctc import batch_ctc_loss, required_frames
from app.data import Batch, PlannedBatches, SentencePair, make_batches, plan_batches
from app.errors import ConfigError, SimulError
from app.logger import close_logger, init_train_logger
from app.metrics import EvalReport, bleu, summarize
from app.model import BASE_PREFIXES, SimulTranslator, build_model
from app.monitoring import LEARNING_RATE, SKIPPED_PAIRS, TRAIN_LOSS, TRAIN_STEPS, VALID_BLEU
from app.sorting import ablation_switches
from app.streaming import Clock, decode_batch, decode_with_oracle, stream_translate

logger = logging.getLogger(__name__)

BEST_NAME = "best.safetensors"
LAST_NAME = "last.safetensors"
LOG_NAME = "train_log.jsonl"
MODEL_NAME = "model.safetensors"
PREFETCH_FACTOR = 4


def lr_schedule(step: int, max_lr: float, warmup_steps: int) -> float:
    """Linear warm-up to max_lr, then inverse square-root decay."""
    if step < 1:
        raise SimulError(f"step must be >= 1, got {step}")
    return max_lr * min(step / warmup_steps, math.sqrt(warmup_steps / step))


def feasible_pairs(pairs: Sequence[SentencePair], upsample_ratio: int) -> list[SentencePair]:
    kept = []
    for i, pair in enumerate(pairs):
        frames = upsample_ratio * len(pair.source_ids)
        needed = required_frames(pair.target_ids)
        if frames < needed:
            SKIPPED_PAIRS.inc()
            logger.warning("infeasible pair skipped", extra={"index": i, "frames": frames, "required": needed})
            continue
        kept.append(pair)
    return kept


def _keep(batch: Batch) -> Batch:
    return batch


def batch_loader(pairs: Sequence[SentencePair], plan: Sequence[Sequence[int]], seed: int,
                 workers: int = 0) -> DataLoader:
    """Batches in plan order; with workers they are collated ahead of the optimizer in worker processes."""
    return DataLoader(
        PlannedBatches(pairs, plan),
        batch_size=None,
        shuffle=False,
        collate_fn=_keep,
        num_workers=workers,
        prefetch_factor=PREFETCH_FACTOR if workers else None,
        generator=torch.Generator().manual_seed(seed),
    )


def batch_stream(pairs: Sequence[SentencePair], max_tokens: int, seed: int, epoch: int, cursor: int,
                 workers: int = 0):
    """Endless (epoch, next_cursor, batch) items; each epoch reshuffles with seed + epoch."""
    while True:
        plan = plan_batches(pairs, max_tokens, seed=seed + epoch)
        loader = batch_loader(pairs, plan[cursor:], seed + epoch, workers)
        for offset, batch in enumerate(loader):
            yield epoch, cursor + offset + 1, batch
        epoch, cursor = epoch + 1, 0


def model_config_for(cfg: RunConfig) -> tuple:
    """(ModelConfig, AsnConfig or None) for the configured phase, ablation applied."""
    if cfg.train.phase == "ctc_pretrain":
        return cfg.model, None
    return cfg.model, ablation_switches(cfg.asn, cfg.asn.variant)


class Trainer:
    def __init__(self, cfg: RunConfig, train_pairs: Sequence[SentencePair], valid_pairs: Sequence[SentencePair],
                 output_dir, init: Checkpoint | None = None, resume: Checkpoint | None = None,
                 prefetch: bool = True, log=None):
        self.cfg = cfg.validate()
        self.tcfg = cfg.train
        self.phase = cfg.train.phase
        self.output_dir = Path(output_dir)
        self.log = log or logger
        self.prefetch = prefetch

        self.train_pairs = feasible_pairs(train_pairs, cfg.model.upsample_ratio)
        if not self.train_pairs:
            raise SimulError("no feasible training pairs")
        self.valid_pairs = list(valid_pairs)

        model_cfg, asn_cfg = model_config_for(cfg)
        self.model = build_model(model_cfg, asn_cfg, self.tcfg.seed)
        self.optimizer = torch.optim.Adam(
            self.model.parameters(), lr=0.0, betas=(self.tcfg.adam_beta1, self.tcfg.adam_beta2)
        )
        self.state = TrainState(phase=self.phase)

        if self.phase == "asn_finetune" and init is None and resume is None:
            raise ConfigError("train.phase", "asn_finetune needs an initial CTC checkpoint (--init)")
        if init is not None and resume is None:
            init.load_into(self.model, prefixes=BASE_PREFIXES)
            self.log.info("encoder and projection initialized", extra={"from_step": init.state.step})
        if resume is not None:
            resume.load_into(self.model, self.optimizer, self.model.rng)
            self.state = TrainState(**vars(resume.state))
            self.log.info("training resumed", extra={"step": self.state.step, "epoch": self.state.epoch})

    # -- one optimizer step ----------------------------------------------------

    def compute_loss(self, batch: Batch, normalizer: int) -> torch.Tensor:
        out = self.model(batch.source, batch.source_lengths, batch.target, batch.target_lengths)
        losses = batch_ctc_loss(out.logits, out.frame_lengths, batch.target, batch.target_lengths,
                                self.tcfg.label_smoothing)
        return losses.sum() / normalizer

    def train_step(self, batches: Sequence[Batch]) -> float:
        """Gradients of the summed loss over the group, normalized by the group's target tokens."""
        self.model.train()
        self.optimizer.zero_grad()
        normalizer = sum(b.ntokens for b in batches)
        total = 0.0
        for batch in batches:
            loss = self.compute_loss(batch, normalizer)
            loss.backward()
            total += loss.item()
        self.state.step += 1
        lr = lr_schedule(self.state.step, self.tcfg.max_lr, self.tcfg.warmup_steps)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.step()
        TRAIN_STEPS.labels(self.phase).inc()
        TRAIN_LOSS.labels(self.phase).set(total)
        LEARNING_RATE.set(lr)
        return total

    # -- validation --------------------------------------------------------------

    def validate(self) -> tuple[float, list[float]] | None:
        if not self.valid_pairs:
            return None
        hyps = [None] * len(self.valid_pairs)
        for batch in make_batches(self.valid_pairs, self.tcfg.max_tokens):
            for index, hyp in zip(batch.indices, decode_batch(self.model, batch)):
                hyps[index] = hyp
        result = bleu(hyps, [[p.target_ids] for p in self.valid_pairs])
        VALID_BLEU.labels(self.phase).set(result.score)
        return result.score, result.precisions

    def checkpoint(self) -> Checkpoint:
        return capture(self.model, self.state, self.cfg, self.optimizer, self.model.rng)

    # -- loop --------------------------------------------------------------------

    def fit(self) -> Checkpoint:
        train_log = init_train_logger(self.output_dir / LOG_NAME)
        batches = batch_stream(self.train_pairs, self.tcfg.max_tokens, self.tcfg.seed,
                               self.state.epoch, self.state.cursor, workers=1 if self.prefetch else 0)
        best = None
        self.log.info("training started", extra={
            "phase": self.phase, "pairs": len(self.train_pairs), "start_step": self.state.step,
        })
        try:
            while self.state.step < self.tcfg.max_steps:
                group = []
                for _ in range(self.tcfg.accumulate_batches):
                    epoch, cursor, batch = next(batches)
                    group.append(batch)
                self.state.epoch, self.state.cursor = epoch, cursor
                loss = self.train_step(group)
                step = self.state.step
                lr = self.optimizer.param_groups[0]["lr"]

                if step % self.tcfg.log_interval == 0:
                    train_log.info("train", extra={"step": step, "loss": loss, "lr": lr, "val_bleu": None})

                if step % self.tcfg.validate_interval == 0 or step == self.tcfg.max_steps:
                    best, stop = self._on_validation(train_log, step, loss, lr, best)
                    if stop:
                        break
        finally:
            batches.close()
            close_logger(train_log)

        last = self.checkpoint()
        save_checkpoint(last, self.output_dir / LAST_NAME)
        if best is None:
            best = last
            save_checkpoint(best, self.output_dir / BEST_NAME)
        save_checkpoint(best.for_inference(), self.output_dir / MODEL_NAME)
        self.log.info("training finished", extra={
            "phase": self.phase, "steps": self.state.step, "best_bleu": self.state.best_bleu,
            "best_step": self.state.best_step,
        })
        return best

    def _on_validation(self, train_log, step, loss, lr, best):
        result = self.validate()
        if result is None:
            train_log.info("train", extra={"step": step, "loss": loss, "lr": lr, "val_bleu": None})
            return best, False
        score, precisions = result
        train_log.info("validation", extra={
            "step": step, "loss": loss, "lr": lr, "val_bleu": score, "val_precisions": precisions,
        })
        if score > self.state.best_bleu:
            self.state.best_bleu, self.state.best_step = score, step
            best = self.checkpoint()
            save_checkpoint(best, self.output_dir / BEST_NAME)
        save_checkpoint(self.checkpoint(), self.output_dir / LAST_NAME)
        if step - self.state.best_step >= self.tcfg.patience_steps:
            self.log.warning("early stopping", extra={
                "step": step, "best_step": self.state.best_step, "best_bleu": self.state.best_bleu,
            })
            return best, True
        return best, False


def train_ctc_baseline(train_pairs, valid_pairs, cfg: RunConfig, output_dir, **kwargs) -> Checkpoint:
    if cfg.train.phase != "ctc_pretrain":
        raise ConfigError("train.phase", "train_ctc_baseline runs the ctc_pretrain phase")
    return Trainer(cfg, train_pairs, valid_pairs, output_dir, **kwargs).fit()


def train_asn(train_pairs, valid_pairs, cfg: RunConfig, output_dir, init: Checkpoint | None = None,
              **kwargs) -> Checkpoint:
    if cfg.train.phase not in ("asn_finetune", "from_scratch"):
        raise ConfigError("train.phase", "train_asn runs asn_finetune or from_scratch")
    return Trainer(cfg, train_pairs, valid_pairs, output_dir, init=init, **kwargs).fit()


# -- evaluation ----------------------------------------------------------------

def model_from_checkpoint(ckpt: Checkpoint | str | Path) -> SimulTranslator:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    cfg = ckpt.run_config
    asn_cfg: AsnConfig | None = None
    if ckpt.has_prefix("sorter."):
        asn_cfg = ablation_switches(cfg.asn, cfg.asn.variant)
    model = build_model(cfg.model, asn_cfg, cfg.train.seed)
    ckpt.load_into(model)
    return model.eval()


def evaluate(model: SimulTranslator, pairs: Sequence[SentencePair], ks: Sequence[int],
             clock: Clock | None = None, oracle: bool = False) -> list[EvalReport]:
    """Streams every pair at every delay k and scores quality and latency."""
    if not pairs:
        raise SimulError("nothing to evaluate")
    references = [p.target_ids for p in pairs]
    oracle_hyps = None
    if oracle:
        oracle_hyps = [decode_with_oracle(model, p.source_ids, p.target_ids) for p in pairs]
    reports = []
    for k in ks:
        hyps, traces = [], []
        for pair in pairs:
            tokens, trace = stream_translate(model, pair.source_ids, delay_k=k, clock=clock)
            hyps.append(tokens)
            traces.append(trace)
        report = summarize(k, hyps, references, traces, oracle_hyps)
        logger.info("evaluated", extra={
            "k": k, "bleu": round(report.bleu, 2), "al": report.al, "skipped": report.latency_skipped,
        })
        reports.append(report)
    return reports
