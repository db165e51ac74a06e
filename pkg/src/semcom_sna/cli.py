"""``semcom-sna`` command line.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command reads the same config (``--config`` YAML plus dotted
``--set key=value`` overrides) and writes under one output directory that
is locked for the duration of the command.
"""

from __future__ import annotations

import functools
import logging
import sys
from pathlib import Path

import click
import numpy as np
from filelock import FileLock, Timeout

from ._validation import ContractError
from .attack import AdversarialBatch, AttackError
from .datasets import DatasetSplit, IngestionError, ParseError, PreprocessingError
from .evaluation import (
    ConfigurationError,
    SweepConfig,
    curve_inventory,
    generate_adversarial,
    plot_curves,
    read_provenance,
    read_results,
    run_snr_sweep,
    write_results,
)
from .experiment import (
    REFERENCE_SNR_DB,
    ConfigError,
    format_criteria,
    load_config,
    prepare_data,
    provenance,
    resolve_output_dir,
    run_experiment,
    sweep_config,
    train_mode,
    write_json,
)
from .semcom import ModelCheckpoint, TrainingError, task_accuracy

logger = logging.getLogger("semcom_sna")

USAGE_ERRORS = (ConfigError, ConfigurationError, ContractError, IngestionError, ParseError, PreprocessingError)


class _Fail(click.ClickException):
    def __init__(self, message, exit_code):
        super().__init__(message)
        self.exit_code = exit_code


def _config_options(fn):
    fn = click.option("--output-dir", "-o", type=click.Path(file_okay=False), default=None,
                      help="Output directory (default: $SEMCOM_SNA_OUTPUT_ROOT/<scale>-<digest>).")(fn)
    fn = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                      help="Dotted config override, e.g. --set train.epochs=5 (repeatable).")(fn)
    fn = click.option("--config", "-c", "config_path", type=click.Path(dir_okay=False), default=None,
                      help="YAML/JSON experiment config.")(fn)
    return fn


def _guarded(fn):
    """Map library exceptions onto the exit-code contract."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except USAGE_ERRORS as exc:
            raise _Fail(str(exc), 2) from None
        except FileNotFoundError as exc:
            raise _Fail(f"missing input: {exc}", 2) from None
        except Timeout as exc:
            raise _Fail(f"output directory is locked by another command ({exc.lock_file})", 1) from None
        except TrainingError as exc:
            raise _Fail(f"training diverged: {exc}", 1) from None
        except AttackError as exc:
            raise _Fail(f"attack failed after {exc.queries_used} queries: {exc}", 1) from None
        except Exception as exc:  # noqa: BLE001
            logger.debug("unhandled failure", exc_info=True)
            raise _Fail(f"{type(exc).__name__}: {exc}", 1) from None

    return wrapper


def _setup(config_path, overrides, output_dir, scale=None):
    config = load_config(config_path, overrides, scale=scale)
    out = resolve_output_dir(config, output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return config, out, FileLock(str(out / ".lock"), timeout=0)


def _header(config):
    click.echo(f"config_digest={config.digest()} seed={config.seed}")


def _load_split(out: Path, config) -> DatasetSplit:
    path = out / "data" / "split.npz"
    if not path.exists():
        raise ConfigError(f"no prepared data at {path}; run `semcom-sna prepare-data` first")
    return DatasetSplit.load(path)


def _test_subset(config, split):
    n = len(split.X_test) if config.sweep.n_samples is None else min(config.sweep.n_samples, len(split.X_test))
    return split.X_test[:n], split.y_test[:n]


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--verbose", "-v", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Semantic noise attacks and SDM defense for task-oriented semantic communication."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command("prepare-data")
@_config_options
@_guarded
def prepare_data_cmd(config_path, overrides, output_dir):
    """Materialise the train/test split and its manifest."""
    config, out, lock = _setup(config_path, overrides, output_dir)
    with lock:
        _header(config)
        split = prepare_data(config)
        split.save(out / "data" / "split.npz")
        manifest = {**split.manifest(), **provenance(config)}
        write_json(out / "data" / "manifest.json", manifest)
    click.echo(f"n_train={manifest['n_train']} n_test={manifest['n_test']} digest={manifest['digest']}")
    click.echo(f"wrote {out / 'data'}")


def _train(config_path, overrides, output_dir, mode):
    config, out, lock = _setup(config_path, overrides, output_dir)
    with lock:
        _header(config)
        split = _load_split(out, config)
        ckpt = train_mode(config, split, mode, log_path=out / "models" / f"{mode}.log.jsonl")
        path = ckpt.save(out / "models" / f"{mode}.pt")
        X, y = _test_subset(config, split)
        acc = task_accuracy(ckpt, X, y, REFERENCE_SNR_DB, 0)
    click.echo(f"mode={mode} epochs={len(ckpt.history)} natural_accuracy@{REFERENCE_SNR_DB:g}dB={acc:.4f}")
    click.echo(f"checkpoint={path}")


@main.command("train")
@click.option("--mode", type=click.Choice(["natural", "sdm", "random_defense"]), default="natural",
              show_default=True)
@_config_options
@_guarded
def train_cmd(mode, config_path, overrides, output_dir):
    """Train a SemCom model (natural, SDM or random-noise defense)."""
    _train(config_path, overrides, output_dir, mode)


@main.command("defend")
@_config_options
@_guarded
def defend_cmd(config_path, overrides, output_dir):
    """Alias of ``train --mode sdm``."""
    _train(config_path, overrides, output_dir, "sdm")


@main.command("attack")
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None,
              help="Target checkpoint (default: <output-dir>/models/natural.pt).")
@click.option("--mode", type=click.Choice(["sna", "pgd", "random"]), default="sna", show_default=True)
@_config_options
@_guarded
def attack_cmd(checkpoint, mode, config_path, overrides, output_dir):
    """Perturb the test split against one checkpoint."""
    config, out, lock = _setup(config_path, overrides, output_dir)
    ckpt_path = Path(checkpoint) if checkpoint else out / "models" / "natural.pt"
    if not ckpt_path.exists():
        raise ConfigError(f"checkpoint {ckpt_path} does not exist")
    with lock:
        _header(config)
        split = _load_split(out, config)
        ckpt = ModelCheckpoint.load(ckpt_path)
        X, y = _test_subset(config, split)
        budget = sweep_config(config, split).budget
        batch = generate_adversarial(ckpt, X, mode, budget, labels=y)
        batch.check_invariants()
        stem = out / "attacks" / f"{ckpt.tag}_{mode}"
        batch.save(stem.with_suffix(".npz"))
        write_json(stem.with_suffix(".json"), {**batch.manifest(), **provenance(config),
                                              "checkpoint": str(ckpt_path)})
    click.echo(f"attack={mode} model={ckpt.tag} epsilon={batch.epsilon:.6g} n={len(batch.perturbed)} "
               f"mean_l2={float(np.mean(batch.norms)):.6g} queries={batch.queries_used} "
               f"truncated={batch.truncated}")
    click.echo(f"batch={stem.with_suffix('.npz')}")


@main.command("evaluate")
@click.option("--checkpoint", "checkpoints", multiple=True, type=click.Path(dir_okay=False),
              help="Checkpoint to evaluate (repeatable; default: every <output-dir>/models/*.pt).")
@click.option("--adversarial", "adversarial", multiple=True, type=click.Path(dir_okay=False),
              help="Adversarial batch from `attack` (repeatable; none gives a benign-only sweep).")
@_config_options
@_guarded
def evaluate_cmd(checkpoints, adversarial, config_path, overrides, output_dir):
    """Accuracy-vs-SNR sweep over the supplied checkpoints and adversarial batches."""
    config, out, lock = _setup(config_path, overrides, output_dir)
    paths = [Path(p) for p in checkpoints] or sorted((out / "models").glob("*.pt"))
    if not paths:
        raise ConfigError(f"no checkpoints given and none found under {out / 'models'}")
    with lock:
        _header(config)
        split = _load_split(out, config)
        models = {}
        for p in paths:
            ckpt = ModelCheckpoint.load(p)
            if ckpt.tag in models:
                raise ConfigError(f"two checkpoints carry the tag {ckpt.tag!r}")
            models[ckpt.tag] = ckpt
        batches = {}
        for p in adversarial:
            batch = AdversarialBatch.load(p)
            if batch.model_tag is None:
                raise ConfigError(f"{p} does not record its target model")
            batches[(batch.model_tag, batch.attack)] = batch
        attacks = ["none"] + sorted({a for _, a in batches})
        base = sweep_config(config, split, attacks)
        X, y = _test_subset(config, split)
        sweep = SweepConfig(base.snr_grid, base.budget, base.attacks, base.metric, len(X), base.seed)
        table = run_snr_sweep(sweep, models, X, y, batches, generate_missing=False)
        prov = provenance(config)
        csv_path = write_results(table, out / "results" / "results.csv", prov)
        plot_curves(table, "benign", out / "plots" / "benign.png", prov)
        if batches:
            plot_curves(table, "adversarial", out / "plots" / "adversarial.png", prov)
    click.echo(f"rows={len(table)} results={csv_path}")
    for row in table:
        if row.snr_db == REFERENCE_SNR_DB:
            click.echo(f"  {row.attack_tag:>6} vs {row.model_tag:<14} @{row.snr_db:g}dB accuracy={row.accuracy:.4f}")


@main.command("plot")
@click.option("--results", "results_path", type=click.Path(dir_okay=False), default=None,
              help="Results CSV (default: <output-dir>/results/results.csv).")
@_config_options
@_guarded
def plot_cmd(results_path, config_path, overrides, output_dir):
    """Redraw both curve families from a results CSV."""
    config, out, lock = _setup(config_path, overrides, output_dir)
    path = Path(results_path) if results_path else out / "results" / "results.csv"
    if not path.exists():
        raise ConfigError(f"results file {path} does not exist")
    table = read_results(path)
    prov = read_provenance(path) or provenance(config)
    with lock:
        for selector in ("benign", "adversarial"):
            if curve_inventory(table, selector):
                target = plot_curves(table, selector, out / "plots" / f"{selector}.png", prov)
                click.echo(f"{selector}: {', '.join(curve_inventory(table, selector))} -> {target}")


@main.command("reproduce")
@click.option("--scale", type=click.Choice(["desk", "full"]), default="desk", show_default=True,
              help="desk runs on synthetic data on a CPU; full needs GTSRB and hours of training.")
@_config_options
@_guarded
def reproduce_cmd(scale, config_path, overrides, output_dir):
    """Run the whole chain and print the pass/fail table of the acceptance criteria."""
    config, out, lock = _setup(config_path, overrides, output_dir, scale=scale)
    if scale == "full" and config.data.root is None:
        raise ConfigError("full scale needs data.root pointing at a GTSRB download (--set data.root=PATH)")
    with lock:
        _header(config)
        click.echo(f"output={out}")
        result = run_experiment(config, out, echo=lambda msg: click.echo(f"[{scale}] {msg}", err=True))
    click.echo(format_criteria(result.criteria), nl=False)
    failed = [c.cid for c in result.criteria if c.required and not c.passed]
    if failed:
        raise _Fail(f"criteria failed: {', '.join(failed)}", 1)
    click.echo("all required criteria passed")


if __name__ == "__main__":  # pragma: no cover
    main()
