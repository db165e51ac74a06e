"""Accuracy-versus-SNR sweeps, attack success accounting, result tables and curve plots."""

from __future__ import annotations

import csv
import logging
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import spearmanr

from ._validation import ContractError
from .attack import AdversarialBatch, AttackBudget, SemanticOracle, pgd_whitebox_attack, random_attack, sna_attack
from .semcom import ModelCheckpoint, task_accuracy

logger = logging.getLogger(__name__)

ATTACK_TAGS = ("none", "sna", "pgd", "random")
MODEL_TAGS = ("natural", "sdm", "random_defense")
CSV_HEADER = ("model_tag", "attack_tag", "snr_db", "epsilon", "accuracy", "n_samples", "seed")


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class ResultRow:
    model_tag: str
    attack_tag: str
    snr_db: float
    epsilon: float
    accuracy: float
    n_samples: int
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ContractError(f"accuracy {self.accuracy} outside [0, 1]")

    @property
    def key(self):
        return (self.model_tag, self.attack_tag, self.snr_db, self.epsilon, self.seed)


@dataclass(frozen=True)
class SweepConfig:
    snr_grid: tuple[float, ...]
    budget: AttackBudget
    attacks: tuple[str, ...] = ATTACK_TAGS
    metric: str = "classification"
    n_samples: int | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "snr_grid", tuple(float(s) for s in self.snr_grid))
        object.__setattr__(self, "attacks", tuple(self.attacks))
        if not self.snr_grid:
            raise ContractError("sweep needs a non-empty SNR grid")
        unknown = set(self.attacks) - set(ATTACK_TAGS)
        if unknown:
            raise ContractError(f"unknown attacks {sorted(unknown)}")
        if self.metric not in ("classification", "plate_recognition"):
            raise ContractError(f"unknown metric selector {self.metric!r}")


def channel_seed(seed: int, snr_db: float) -> int:
    """Noise seed for one grid point; shared by every model and attack so comparisons are paired."""
    return zlib.crc32(f"{seed}:{snr_db!r}".encode()) & 0x7FFFFFFF


def generate_adversarial(model: ModelCheckpoint, X, attack: str, budget: AttackBudget, labels=None) -> AdversarialBatch:
    """Perturb ``X`` once; perturbations live in pixel space and serve the whole SNR grid."""
    if attack == "sna":
        batch = sna_attack(SemanticOracle.from_model(model), X, budget, labels=labels)
    elif attack == "pgd":
        batch = pgd_whitebox_attack(model, X, budget, labels=labels)
    elif attack == "random":
        batch = random_attack(X, budget.epsilon, budget.seed, labels=labels)
    else:
        raise ContractError(f"cannot generate adversarial samples for attack {attack!r}")
    batch.model_tag = model.tag
    return batch


def run_snr_sweep(config: SweepConfig, models: Mapping[str, ModelCheckpoint] | Sequence[ModelCheckpoint], X, y,
                  batches: dict | None = None, generate_missing: bool = True) -> list[ResultRow]:
    """Evaluate every (model, attack) pair over ``config.snr_grid``.

    ``batches`` maps ``(model_tag, attack_tag)`` to a precomputed
    :class:`AdversarialBatch`; missing entries are generated and stored back
    into the dict unless ``generate_missing`` is false, in which case those
    curves are skipped.
    """
    if not isinstance(models, Mapping):
        models = {m.tag: m for m in models}
    if not models:
        raise ContractError("sweep needs at least one model")
    batches = {} if batches is None else batches
    n = len(X) if config.n_samples is None else min(config.n_samples, len(X))
    X = np.asarray(X, dtype=np.float32)[:n]
    y = y[:n] if isinstance(y, (list, tuple)) else np.asarray(y)[:n]

    rows: list[ResultRow] = []
    for tag in sorted(models):
        ckpt = models[tag]
        if ckpt.config.task != config.metric:
            raise ConfigurationError(f"model {tag!r} solves {ckpt.config.task}, sweep expects {config.metric}")
        if tuple(X.shape[1:]) != ckpt.config.image_shape:
            raise ConfigurationError(
                f"model {tag!r} expects inputs {ckpt.config.image_shape}, test data is {tuple(X.shape[1:])}")
        for attack in config.attacks:
            if attack == "none":
                inputs, eps = X, 0.0
            else:
                batch = batches.get((tag, attack))
                if batch is None and not generate_missing:
                    continue
                if batch is None:
                    batch = generate_adversarial(ckpt, X, attack, config.budget, labels=y)
                    batches[(tag, attack)] = batch
                if len(batch.perturbed) != n:
                    raise ConfigurationError(f"adversarial batch for {(tag, attack)} has {len(batch.perturbed)} "
                                             f"samples, sweep uses {n}")
                inputs, eps = batch.perturbed, float(batch.epsilon)
            for snr in config.snr_grid:
                acc = task_accuracy(ckpt, inputs, y, snr, channel_seed(config.seed, snr))
                rows.append(ResultRow(tag, attack, snr, eps, acc, n, config.seed))
    return sorted(rows)


def compute_attack_success(natural_row: ResultRow, robust_row: ResultRow) -> float:
    """Accuracy drop ``natural - robust``; negative drops are returned as-is with a warning."""
    for attr in ("model_tag", "snr_db", "seed"):
        if getattr(natural_row, attr) != getattr(robust_row, attr):
            raise ContractError(f"rows disagree on {attr}: {getattr(natural_row, attr)!r} vs "
                                f"{getattr(robust_row, attr)!r}")
    drop = natural_row.accuracy - robust_row.accuracy
    if drop < 0:
        warnings.warn(f"robust accuracy exceeds natural accuracy for {robust_row.key} (drop {drop:+.4f})")
    return drop


def lookup(table: Sequence[ResultRow], model_tag: str, attack_tag: str) -> dict[float, float]:
    """``{snr_db: accuracy}`` for one curve."""
    return {r.snr_db: r.accuracy for r in table if r.model_tag == model_tag and r.attack_tag == attack_tag}


def spearman_trend(curve: Mapping[float, float]) -> float:
    """Spearman correlation of accuracy against SNR; a flat curve counts as 0."""
    snrs = sorted(curve)
    accs = [curve[s] for s in snrs]
    if len(set(accs)) < 2:
        return 0.0
    return float(spearmanr(snrs, accs).statistic)


# --------------------------------------------------------------------------- persistence


def write_results(table: Sequence[ResultRow], path, provenance: Mapping[str, object] | None = None) -> Path:
    """Write a sorted CSV; provenance goes into leading ``#`` comment lines."""
    keys = [r.key for r in table]
    if len(set(keys)) != len(keys):
        raise ContractError("result table holds duplicate (model, attack, snr, epsilon, seed) rows")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for k, v in sorted((provenance or {}).items()):
            fh.write(f"# {k}={v}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in sorted(table, key=lambda r: (r.model_tag, r.attack_tag, r.snr_db, r.epsilon, r.seed)):
            writer.writerow([r.model_tag, r.attack_tag, repr(r.snr_db), repr(r.epsilon), repr(r.accuracy),
                             r.n_samples, r.seed])
    return path


def read_results(path) -> list[ResultRow]:
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(lines)
    if tuple(reader.fieldnames or ()) != CSV_HEADER:
        raise ContractError(f"{path} does not carry the result-table header")
    return [ResultRow(r["model_tag"], r["attack_tag"], float(r["snr_db"]), float(r["epsilon"]),
                      float(r["accuracy"]), int(r["n_samples"]), int(r["seed"])) for r in reader]


def read_provenance(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            k, _, v = line[1:].strip().partition("=")
            out[k] = v
    return out


# --------------------------------------------------------------------------- plots


@dataclass
class _Style:
    markers: dict = field(default_factory=lambda: {"natural": "o", "sdm": "s", "random_defense": "^"})
    lines: dict = field(default_factory=lambda: {"none": "-", "sna": "-", "pgd": "--", "random": ":"})


def plot_curves(table: Sequence[ResultRow], selector: str, path, provenance: Mapping[str, object] | None = None,
                title: str | None = None) -> Path:
    """Accuracy-vs-SNR curves, one per (attack, model) pair, legend ``"<attack> vs <model>"``.

    ``selector`` is ``"benign"`` (attack ``none``) or ``"adversarial"``
    (every other attack).  Output bytes depend only on the table and style.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if selector == "benign":
        rows = [r for r in table if r.attack_tag == "none"]
    elif selector == "adversarial":
        rows = [r for r in table if r.attack_tag != "none"]
    else:
        raise ContractError(f"selector must be 'benign' or 'adversarial', got {selector!r}")
    if not rows:
        raise ContractError(f"no rows selected for the {selector} plot")

    style = _Style()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    curves = sorted({(r.attack_tag, r.model_tag) for r in rows})
    with matplotlib.rc_context({"svg.hashsalt": "semcom-sna", "path.simplify": False}):
        fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
        for attack, model in curves:
            pts = sorted((r.snr_db, r.accuracy) for r in rows if r.attack_tag == attack and r.model_tag == model)
            xs, ys = zip(*pts)
            label = model if selector == "benign" else f"{attack} vs {model}"
            ax.plot(xs, ys, linestyle=style.lines.get(attack, "-"), marker=style.markers.get(model, "x"),
                    label=label)
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel("Accuracy")
        ax.set_ylim(-0.02, 1.02)
        ax.set_title(title or ("Benign test set" if selector == "benign" else "Adversarial test set"))
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        meta_desc = ";".join(f"{k}={v}" for k, v in sorted((provenance or {}).items()))
        if path.suffix.lower() == ".svg":
            fig.savefig(path, format="svg", metadata={"Date": None, "Description": meta_desc})
        else:
            fig.savefig(path, format="png", metadata={"Software": None, "Description": meta_desc})
        plt.close(fig)
    return path


def curve_inventory(table: Sequence[ResultRow], selector: str) -> list[str]:
    if selector == "benign":
        return sorted({r.model_tag for r in table if r.attack_tag == "none"})
    return sorted({f"{r.attack_tag} vs {r.model_tag}" for r in table if r.attack_tag != "none"})
