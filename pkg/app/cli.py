"""
Command-line entry point: generate corpora, train, evaluate and analyze.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
import hashlib
import json
import sys
from pathlib import Path

import click

from app.checkpoint import load_checkpoint
from app.config import PHASES, RunConfig, load_run_config, settings
from app.ctc import export_alignment_csv, viterbi_align
from app.data import generate_splits, load_corpus, save_corpus
from app.errors import ConfigError, InfeasibleAlignmentError, SimulError
from app.logger import init_logger
from app.metrics import anticipation_curve, attach_significance, write_curve_csv, write_report_json
from app.monitoring import maybe_start_exporter
from app.sorting import ABLATIONS, apply_permutation, export_matrix_csv, hard_assignment
from app.streaming import oracle_permutation_matrix, read_count_clock
from app.trainer import BEST_NAME, LAST_NAME, LOG_NAME, MODEL_NAME, Trainer, evaluate, model_from_checkpoint

logger = init_logger("simt", settings.LOG_LEVEL)

CORPUS_SUFFIX = ".tsv"
MANIFEST_NAME = "manifest.json"


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: RunConfig | None, inputs: dict, outputs: list[Path],
                   extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "config_digest": cfg.digest() if cfg is not None else None,
        "seeds": {"gen": cfg.gen.seed, "train": cfg.train.seed} if cfg is not None else {},
        "inputs": {name: sha256_file(p) for name, p in sorted(inputs.items())},
        "outputs": {p.name: sha256_file(p) for p in sorted(outputs) if p.exists()},
    }
    manifest.update(extra or {})
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def parse_ks(raw: str) -> list[int]:
    try:
        ks = [int(item) for item in raw.split(",") if item.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got '{raw}'")
    if not ks or any(k < 1 for k in ks):
        raise click.BadParameter("every k must be >= 1")
    return ks


def run_guarded(action):
    """ConfigError -> exit 2, any other failure -> exit 1."""
    try:
        action()
    except ConfigError as e:
        logger.error(f"configuration error: {e}", extra={"key": e.key})
        click.echo(f"Error: {e}", err=True)
        sys.exit(2)
    except SimulError as e:
        logger.error(f"failed: {e}")
        click.echo(f"Error: {e}", err=True)
        sys.exit(1)
    except Exception as e:
        logger.exception(f"unexpected failure: {e}")
        sys.exit(1)
    sys.exit(0)


@click.group()
def main():
    """Anticipation-free simultaneous translation toolkit."""
    maybe_start_exporter(settings.METRICS_PORT, logger)


@main.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Corpus directory (default: <output_dir>/data)")
def gen(config_path: Path, out_dir: Path | None):
    """Generate train/valid/test corpora with oracle alignments."""
    def action():
        cfg = load_run_config(config_path)
        target = out_dir or Path(cfg.output_dir) / "data"
        logger.info("generating corpus", extra={"rule": cfg.gen.reorder_rule, "seed": cfg.gen.seed})
        outputs = []
        for name, pairs in generate_splits(cfg.gen).items():
            path = target / f"{name}{CORPUS_SUFFIX}"
            save_corpus(pairs, path)
            outputs.append(path)
            logger.info(f"{name} corpus written to {path}", extra={"pairs": len(pairs)})
        write_manifest(target, "gen", cfg, {"config": config_path}, outputs,
                       {"reorder_rule": cfg.gen.reorder_rule})
    run_guarded(action)


@main.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--phase", type=click.Choice(PHASES), default=None, help="Overrides train.phase")
@click.option("--init", "init_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help="CTC baseline checkpoint for encoder and projection")
@click.option("--resume", "resume_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              default=None, help="Full checkpoint to continue from")
@click.option("--ablation", type=click.Choice(ABLATIONS), default=None, help="Overrides asn.variant")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False, path_type=Path), default=None,
              help="Corpus directory (default: <output_dir>/data)")
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.option("--no-prefetch", is_flag=True, default=False)
def train(config_path, phase, init_path, resume_path, ablation, data_dir, out_dir, no_prefetch):
    """Train the CTC baseline or the model with the sorting network."""

    def action():
        cfg = load_run_config(config_path)
        if phase:
            cfg.train.phase = phase
        if ablation:
            cfg.asn.variant = ablation
        cfg.validate()
        data = data_dir or Path(cfg.output_dir) / "data"
        train_path, valid_path = data / f"train{CORPUS_SUFFIX}", data / f"valid{CORPUS_SUFFIX}"
        if not train_path.exists():
            raise ConfigError("data", f"missing training corpus {train_path}")
        run_name = cfg.train.phase if cfg.asn.variant == "default" else f"{cfg.train.phase}-{cfg.asn.variant}"
        target = out_dir or Path(cfg.output_dir) / run_name

        valid = load_corpus(valid_path) if valid_path.exists() else []
        init = load_checkpoint(init_path) if init_path else None
        resume = load_checkpoint(resume_path) if resume_path else None
        trainer = Trainer(cfg, load_corpus(train_path), valid, target, init=init, resume=resume,
                          prefetch=not no_prefetch, log=logger)
        best = trainer.fit()
        logger.info(f"best checkpoint at step {best.state.step}", extra={"best_bleu": best.state.best_bleu})

        inputs = {"config": config_path, "train": train_path}
        if valid_path.exists():
            inputs["valid"] = valid_path
        if init_path:
            inputs["init"] = init_path
        outputs = [target / name for name in (BEST_NAME, LAST_NAME, MODEL_NAME, LOG_NAME)]
        write_manifest(target, "train", cfg, inputs, outputs,
                       {"phase": cfg.train.phase, "variant": cfg.asn.variant})
    run_guarded(action)


@main.command(name="eval")
@click.argument("checkpoint_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("corpus_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--k", "k_list", default="1,3,5,7,9", help="Comma-separated delays")
@click.option("--oracle", is_flag=True, default=False, help="Add reference-context (oracle) decoding")
@click.option("--clock", type=click.Choice(["wall", "reads"]), default="wall",
              help="'reads' stamps emissions with the read count for reproducible AL-CA")
@click.option("--plot", is_flag=True, default=False, help="Also render curve.svg")
@click.option("--compare", "compare_path", default=None,
              type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="Checkpoint to test against with a paired BLEU bootstrap at every k")
@click.option("--resamples", type=click.IntRange(min=1), default=1000, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), default=None)
def evaluate_command(checkpoint_path, corpus_path, k_list, oracle, clock, plot, compare_path, resamples, out_dir):
    """Stream a corpus at every k and write report.json and curve.csv."""

    ks = parse_ks(k_list)

    def action():
        ckpt = load_checkpoint(checkpoint_path)
        model = model_from_checkpoint(ckpt)
        pairs = load_corpus(corpus_path)
        target = out_dir or checkpoint_path.parent / "eval"
        stamp = read_count_clock if clock == "reads" else None
        reports = evaluate(model, pairs, ks, clock=stamp, oracle=oracle)
        inputs = {"checkpoint": checkpoint_path, "corpus": corpus_path}
        if compare_path is not None:
            baseline = evaluate(model_from_checkpoint(compare_path), pairs, ks, clock=stamp)
            attach_significance(reports, baseline, resamples=resamples)
            inputs["compare"] = compare_path
        outputs = [target / "report.json", target / "curve.csv"]
        write_report_json(reports, outputs[0])
        write_curve_csv(reports, outputs[1])
        if plot:
            from app.plotting import plot_latency_quality
            outputs.append(plot_latency_quality([r.curve_row() for r in reports], target / "curve.svg"))
        for r in reports:
            logger.info(f"k={r.k} BLEU={r.bleu:.2f} chrF={r.chrf:.2f} AL={r.al:.3f} AL-CA={r.al_ca_ms:.3f}ms")
            if r.significance is not None:
                logger.info(f"k={r.k} baseline BLEU={r.significance['score_b']:.2f}",
                            extra={"p_value": r.significance["p_value"]})
        write_manifest(target, "eval", ckpt.run_config, inputs, outputs,
                       {"ks": ks, "oracle": oracle, "clock": clock, "resamples": resamples})
    run_guarded(action)


def _frame_labels(symbols: list[int], ratio: int) -> list[str]:
    render = lambda s: "_" if s == 0 else str(s)
    return ["|".join(render(s) for s in symbols[i:i + ratio]) for i in range(0, len(symbols), ratio)]


def analyze_checkpoint(checkpoint_path: Path, corpus_path: Path, samples: int, target: Path, plot: bool):

    ckpt = load_checkpoint(checkpoint_path)
    model = model_from_checkpoint(ckpt)
    pairs = load_corpus(corpus_path)[:samples]
    ratio = model.cfg.upsample_ratio
    outputs, matched, total = [], 0, 0
    for i, pair in enumerate(pairs):
        z, states = oracle_permutation_matrix(model, pair.source_ids, pair.target_ids)
        logits = model.projection(apply_permutation(z.unsqueeze(0), states))[0].detach()
        row_labels = None
        try:
            path = viterbi_align(logits, pair.target_ids)
            row_labels = _frame_labels(path, ratio)
            outputs.append(target / f"alignment_{i:04d}.csv")
            export_alignment_csv(path, outputs[-1])
        except InfeasibleAlignmentError as e:
            logger.warning(f"no Viterbi labels for sentence {i}: {e}")
        col_labels = [str(t) for t in pair.source_ids]
        outputs.append(target / f"z_{i:04d}.csv")
        export_matrix_csv(z, outputs[-1], row_labels, col_labels)
        if plot:
            from app.plotting import plot_permutation
            outputs.append(plot_permutation(z, target / f"z_{i:04d}.svg", row_labels, col_labels))
        if pair.oracle_permutation is not None:
            predicted = hard_assignment(z)
            matched += sum(p + 1 == o for p, o in zip(predicted, pair.oracle_permutation))
            total += len(predicted)
    recovery = matched / total if total else None
    summary = target / "recovery.json"
    summary.write_text(json.dumps({"sentences": len(pairs), "positions": total, "recovery": recovery},
                                  indent=2, sort_keys=True), encoding="utf-8")
    logger.info("permutation recovery", extra={"recovery": recovery, "positions": total})
    outputs.append(summary)
    return ckpt.run_config, {"checkpoint": checkpoint_path, "corpus": corpus_path}, outputs


def analyze_corpus(corpus_path: Path, target: Path, plot: bool):
    pairs = load_corpus(corpus_path)
    curve = anticipation_curve([p.oracle_links for p in pairs])
    path = target / "k_ar.csv"
    target.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("k,rate\n")
        for k, rate in curve:
            f.write(f"{k},{rate:.6f}\n")
    outputs = [path]
    if plot:
        from app.plotting import plot_anticipation
        outputs.append(plot_anticipation(curve, target / "k_ar.svg"))
    logger.info("k-anticipation curve", extra={"curve": [round(r, 4) for _, r in curve]})
    return None, {"corpus": corpus_path}, outputs


@main.command()
@click.argument("input_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--corpus", "corpus_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              default=None, help="Corpus to analyze a checkpoint on")
@click.option("--samples", type=click.IntRange(min=1), default=200)
@click.option("--plot", is_flag=True, default=False)
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), default=None)
def analyze(input_path, corpus_path, samples, plot, out_dir):
    """k-AR curve of a corpus, or Z heatmaps and permutation recovery of a checkpoint."""
    is_checkpoint = input_path.suffix == ".safetensors"
    if is_checkpoint and corpus_path is None:
        raise click.UsageError("analyzing a checkpoint needs --corpus")

    def action():
        target = out_dir or input_path.parent / "analysis"
        target.mkdir(parents=True, exist_ok=True)
        if is_checkpoint:
            cfg, inputs, outputs = analyze_checkpoint(input_path, corpus_path, samples, target, plot)
        else:
            cfg, inputs, outputs = analyze_corpus(input_path, target, plot)
        write_manifest(target, "analyze", cfg, inputs, outputs)
    run_guarded(action)


if __name__ == "__main__":
    main()
