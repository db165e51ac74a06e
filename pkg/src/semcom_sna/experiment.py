"""Experiment configuration and the end-to-end attack/defense chain used by the CLI."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import yaml

from ._validation import ContractError
from .attack import AttackBudget
from .datasets import DatasetSplit, SyntheticSpec, load_ccpd, load_gtsrb, make_synthetic
from .defense import SDMConfig, train_random_defense, train_sdm
from .evaluation import (
    ResultRow,
    SweepConfig,
    channel_seed,
    generate_adversarial,
    lookup,
    plot_curves,
    run_snr_sweep,
    spearman_trend,
    write_results,
)
from .semcom import ChannelConfig, ModelCheckpoint, PipelineConfig, task_accuracy, train_natural

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "SEMCOM_SNA_OUTPUT_ROOT"
REFERENCE_SNR_DB = 10.0
TOLERANCE = 0.02


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


# --------------------------------------------------------------------------- config schema


@dataclass
class DataSection:
    name: str = "synthetic"
    root: str | None = None
    num_classes: int = 10
    samples_per_class: int = 200
    image_size: int = 16
    seed: int = 7


@dataclass
class PipelineSection:
    encoder_arch: str = "small_cnn"
    d_s: int = 256
    d_c: int = 128
    encoder_width: int = 16
    semantic_norm: str = "layernorm"
    plate_positions: int = 18


@dataclass
class TrainSection:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3


@dataclass
class ChannelSection:
    snr_db_min: float = 5.0
    snr_db_max: float = 10.0
    eval_snr_grid: list = field(default_factory=lambda: [float(v) for v in range(0, 21, 2)])


@dataclass
class AttackSection:
    epsilon: float | None = None
    epsilon_fraction: float = 0.05
    max_iterations: int = 50
    step_size: float | None = None
    queries_per_iteration: int = 100
    smoothing_sigma: float = 1e-2
    freq_cutoff: int | None = None
    metric: str = "kl_softmax"
    init_fraction: float = 0.1
    seed: int = 0


@dataclass
class SDMSection:
    lambda_: float = 1.0
    inner_iterations: int = 10
    inner_step_size: float | None = None
    inner_epsilon: float | None = None
    epochs: int | None = None


@dataclass
class SweepSection:
    attacks: list = field(default_factory=lambda: ["none", "sna", "pgd", "random"])
    n_samples: int | None = 1000
    epsilon_grid: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 1.0])


@dataclass
class ExperimentConfig:
    scale: str = "desk"
    seed: int = 0
    output_dir: str | None = None
    data: DataSection = field(default_factory=DataSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    train: TrainSection = field(default_factory=TrainSection)
    channel: ChannelSection = field(default_factory=ChannelSection)
    attack: AttackSection = field(default_factory=AttackSection)
    sdm: SDMSection = field(default_factory=SDMSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def to_dict(self) -> dict:
        return _to_plain(self)

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("output_dir", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def validate(self) -> "ExperimentConfig":
        try:
            ChannelConfig(self.channel.snr_db_min, self.channel.snr_db_max, tuple(self.channel.eval_snr_grid))
            AttackBudget(epsilon=self.attack.epsilon or 1.0, max_iterations=self.attack.max_iterations,
                         queries_per_iteration=self.attack.queries_per_iteration,
                         smoothing_sigma=self.attack.smoothing_sigma, freq_cutoff=self.attack.freq_cutoff,
                         metric=self.attack.metric, init_fraction=self.attack.init_fraction)
            SDMConfig(lambda_=self.sdm.lambda_, inner_iterations=self.sdm.inner_iterations)
            if self.data.name == "synthetic":
                SyntheticSpec(self.data.num_classes, self.data.samples_per_class, self.data.image_size,
                              self.data.seed)
        except ContractError as exc:
            raise ConfigError(str(exc)) from None
        if self.scale not in ("desk", "full"):
            raise ConfigError(f"scale must be 'desk' or 'full', got {self.scale!r}")
        if self.data.name not in ("synthetic", "gtsrb", "ccpd"):
            raise ConfigError(f"unknown dataset {self.data.name!r}")
        return self


_ALIASES = {"lambda": "lambda_"}


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        out = {}
        for f in dataclasses.fields(obj):
            key = "lambda" if f.name == "lambda_" else f.name
            out[key] = _to_plain(getattr(obj, f.name))
        return out
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _from_plain(cls, data: dict, where: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = _ALIASES.get(key, key)
        if name not in fields:
            raise ConfigError(f"unknown config key {where + key!r}")
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _from_plain(type(default), value, f"{where}{key}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _set_dotted(d: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
        if not isinstance(d, dict):
            raise ConfigError(f"cannot set {dotted!r}: {p!r} is not a section")
    d[parts[-1]] = value


def full_scale_defaults() -> dict:
    return {
        "scale": "full",
        "data": {"name": "gtsrb", "image_size": 32},
        "pipeline": {"encoder_arch": "resnet", "d_s": 256, "d_c": 128, "encoder_width": 16},
        "train": {"epochs": 30, "batch_size": 128},
        "attack": {"epsilon": 3.6},
        "sdm": {"lambda": 1.0},
        "sweep": {"n_samples": None},
    }


def load_config(path=None, overrides=(), scale: str | None = None) -> ExperimentConfig:
    """Build a config from defaults, an optional YAML/JSON file and ``key.sub=value`` overrides."""
    raw: dict = {}
    if scale == "full":
        raw = full_scale_defaults()
    if path is not None:
        try:
            with open(path) as fh:
                loaded = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML/JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a mapping")
        _merge(raw, loaded)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} must look like key.sub=value")
        _set_dotted(raw, key.strip(), yaml.safe_load(value))
    if scale is not None:
        raw["scale"] = scale
    return _from_plain(ExperimentConfig, raw).validate()


def _merge(base: dict, extra: dict) -> None:
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v


def resolve_output_dir(config: ExperimentConfig, cli_value=None) -> Path:
    if cli_value:
        return Path(cli_value)
    if config.output_dir:
        return Path(config.output_dir)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / f"{config.scale}-{config.digest()}"


# --------------------------------------------------------------------------- building blocks


def provenance(config: ExperimentConfig) -> dict:
    return {"config_digest": config.digest(), "seed": config.seed}


def prepare_data(config: ExperimentConfig) -> DatasetSplit:
    d = config.data
    if d.name == "synthetic":
        return make_synthetic(SyntheticSpec(d.num_classes, d.samples_per_class, d.image_size, d.seed))
    if d.root is None:
        raise ConfigError(f"dataset {d.name!r} needs data.root")
    if d.name == "gtsrb":
        return load_gtsrb(d.root, d.seed, image_size=d.image_size)
    return load_ccpd(d.root, d.seed)


def build_pipeline_config(config: ExperimentConfig, split: DatasetSplit) -> PipelineConfig:
    p = config.pipeline
    if split.task == "plate_recognition":
        return PipelineConfig.for_plates(d_c=p.d_c, seed=config.seed, encoder_width=p.encoder_width,
                                         plate_positions=p.plate_positions, semantic_norm=p.semantic_norm)
    return PipelineConfig(task="classification", d_s=p.d_s, d_c=p.d_c, encoder_arch=p.encoder_arch,
                          seed=config.seed, num_classes=split.num_classes, image_shape=split.image_shape,
                          encoder_width=p.encoder_width, semantic_norm=p.semantic_norm)


def build_channel_config(config: ExperimentConfig) -> ChannelConfig:
    c = config.channel
    return ChannelConfig(c.snr_db_min, c.snr_db_max, tuple(c.eval_snr_grid))


def resolve_epsilon(config: ExperimentConfig, split: DatasetSplit) -> float:
    if config.attack.epsilon is not None:
        return float(config.attack.epsilon)
    norms = np.linalg.norm(split.X_test.reshape(len(split.X_test), -1).astype(np.float64), axis=1)
    return float(config.attack.epsilon_fraction * norms.mean())


def build_budget(config: ExperimentConfig, epsilon: float) -> AttackBudget:
    a = config.attack
    return AttackBudget(epsilon=epsilon, max_iterations=a.max_iterations, step_size=a.step_size,
                        queries_per_iteration=a.queries_per_iteration, smoothing_sigma=a.smoothing_sigma,
                        freq_cutoff=a.freq_cutoff, seed=a.seed, metric=a.metric, init_fraction=a.init_fraction)


def build_sdm_config(config: ExperimentConfig, epsilon: float) -> SDMConfig:
    s = config.sdm
    return SDMConfig(lambda_=s.lambda_, inner_iterations=s.inner_iterations, inner_step_size=s.inner_step_size,
                     inner_epsilon=epsilon if s.inner_epsilon is None else s.inner_epsilon,
                     epochs=config.train.epochs if s.epochs is None else s.epochs, seed=config.seed,
                     batch_size=config.train.batch_size, lr=config.train.lr)


def train_mode(config: ExperimentConfig, split: DatasetSplit, mode: str, log_path=None) -> ModelCheckpoint:
    pipeline = build_pipeline_config(config, split)
    channel = build_channel_config(config)
    if mode == "natural":
        ckpt = train_natural(split, pipeline, channel, config.train.epochs, seed=config.seed,
                             batch_size=config.train.batch_size, lr=config.train.lr, log_path=log_path)
    elif mode in ("sdm", "random_defense"):
        sdm = build_sdm_config(config, resolve_epsilon(config, split))
        trainer = train_sdm if mode == "sdm" else train_random_defense
        ckpt = trainer(split, pipeline, channel, sdm, log_path=log_path)
    else:
        raise ConfigError(f"unknown training mode {mode!r}")
    ckpt.extra.update(provenance(config))
    return ckpt


def sweep_config(config: ExperimentConfig, split: DatasetSplit, attacks=None) -> SweepConfig:
    return SweepConfig(snr_grid=tuple(config.channel.eval_snr_grid),
                       budget=build_budget(config, resolve_epsilon(config, split)),
                       attacks=tuple(attacks if attacks is not None else config.sweep.attacks),
                       metric=split.task, n_samples=config.sweep.n_samples, seed=config.seed)


def write_json(path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


# --------------------------------------------------------------------------- criteria


@dataclass(frozen=True)
class Criterion:
    cid: str
    description: str
    value: float
    target: str
    passed: bool
    required: bool = True

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        kind = "" if self.required else " (invariant)"
        return f"{status}  {self.cid:<6} {self.description}{kind}: {self.value:.4f} [{self.target}]"


def _at(curve: dict, snr: float) -> float:
    if snr in curve:
        return curve[snr]
    nearest = min(curve, key=lambda s: abs(s - snr))
    return curve[nearest]


def _worst_fall(curve: dict) -> float:
    """Most negative ``acc(t) - acc(s)`` over grid pairs ``s < t``; 0 for a non-decreasing curve."""
    accs = [curve[s] for s in sorted(curve)]
    return min((b - a for i, a in enumerate(accs) for b in accs[i + 1:]), default=0.0)


def desk_criteria(table: list[ResultRow], eps_rows: list[ResultRow], grid) -> list[Criterion]:
    ref = REFERENCE_SNR_DB
    nat_none, nat_sna = lookup(table, "natural", "none"), lookup(table, "natural", "sna")
    nat_rand = lookup(table, "natural", "random")
    sdm_none, sdm_sna = lookup(table, "sdm", "none"), lookup(table, "sdm", "sna")
    rd_none, rd_sna = lookup(table, "random_defense", "none"), lookup(table, "random_defense", "sna")
    out = []

    acc = _at(nat_none, ref)
    out.append(Criterion("C3.1", "natural accuracy at 10 dB", acc, ">= 0.95", acc >= 0.95))
    drop = _at(nat_none, ref) - _at(nat_sna, ref)
    out.append(Criterion("C3.2", "SNA accuracy drop at 10 dB", drop, ">= 0.20", drop >= 0.20))

    eps_curve = sorted((r.epsilon, r.accuracy) for r in eps_rows)
    worst_rise = max((b[1] - a[1] for a, b in zip(eps_curve, eps_curve[1:])), default=0.0)
    out.append(Criterion("C3.3", "max robust-accuracy rise over epsilon grid", worst_rise,
                         f"<= {TOLERANCE}", worst_rise <= TOLERANCE))

    gain = _at(sdm_sna, ref) - _at(nat_sna, ref)
    out.append(Criterion("C3.4", "SDM robust-accuracy gain under SNA at 10 dB", gain, ">= 0.10", gain >= 0.10))
    loss = _at(nat_none, ref) - _at(sdm_none, ref)
    out.append(Criterion("C3.5", "SDM natural-accuracy loss at 10 dB", loss, "<= 0.10", loss <= 0.10))

    def ordering(cid, desc, hi, lo):
        margin = min(hi[s] - lo[s] for s in grid)
        return Criterion(cid, desc, margin, f"min over grid >= -{TOLERANCE}", margin >= -TOLERANCE)

    out.append(ordering("C3.6a", "acc(natural, random) - acc(natural, sna)", nat_rand, nat_sna))
    out.append(ordering("C3.6b", "acc(sdm, sna) - acc(natural, sna)", sdm_sna, nat_sna))
    out.append(ordering("C3.6c", "acc(sdm, none) - acc(random_defense, none)", sdm_none, rd_none))

    inv = [
        ordering("I.1", "acc(sdm, sna) - acc(random_defense, sna)", sdm_sna, rd_sna),
        ordering("I.2", "acc(random_defense, sna) - acc(natural, sna)", rd_sna, nat_sna),
    ]
    excess = max(sdm_none[s] - nat_none[s] for s in grid)
    inv.append(Criterion("I.3", "max acc(sdm, none) - acc(natural, none)", excess, "<= 0.01", excess <= 0.01))
    models = ("natural", "sdm", "random_defense")
    rho = min(spearman_trend(lookup(table, m, "none")) for m in models)
    inv.append(Criterion("I.4", "min Spearman(SNR, benign accuracy)", rho, ">= 0", rho >= 0))
    fall = min(_worst_fall(lookup(table, m, "none")) for m in models)
    inv.append(Criterion("I.5", "benign accuracy change from lower to higher SNR", fall,
                         f"min over SNR pairs >= -{TOLERANCE}", fall >= -TOLERANCE))
    return out + [dataclasses.replace(c, required=False) for c in inv]


def full_criteria(table: list[ResultRow]) -> list[Criterion]:
    ref = REFERENCE_SNR_DB
    nat = _at(lookup(table, "natural", "none"), ref)
    sna = _at(lookup(table, "natural", "sna"), ref)
    rnd = _at(lookup(table, "natural", "random"), ref)
    sdm = _at(lookup(table, "sdm", "none"), ref)
    rd = _at(lookup(table, "random_defense", "none"), ref)
    return [
        Criterion("C4.1", "natural accuracy at 10 dB", nat, ">= 0.95", nat >= 0.95),
        Criterion("C4.2", "SNA accuracy drop at 10 dB", nat - sna, "0.40 +/- 0.15", abs(nat - sna - 0.40) <= 0.15),
        Criterion("C4.3", "random-attack accuracy drop", nat - rnd, "<= 0.10", nat - rnd <= 0.10),
        Criterion("C4.4", "SDM natural-accuracy loss", nat - sdm, "0.05 +/- 0.03", abs(nat - sdm - 0.05) <= 0.03),
        Criterion("C4.5", "random-defense natural-accuracy loss", nat - rd, "0.13 +/- 0.05",
                  abs(nat - rd - 0.13) <= 0.05),
    ]


def format_criteria(criteria: list[Criterion]) -> str:
    return "\n".join(c.line() for c in criteria) + "\n"


# --------------------------------------------------------------------------- chain


@dataclass
class ExperimentResult:
    split: DatasetSplit
    checkpoints: dict
    table: list
    epsilon_rows: list
    criteria: list
    paths: dict

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.criteria if c.required)


def run_experiment(config: ExperimentConfig, out_dir, echo: Callable[[str], None] = logger.info) -> ExperimentResult:
    """data -> natural -> SNA -> SDM -> random defense -> sweep -> plots -> criteria."""
    out = Path(out_dir)
    prov = provenance(config)
    write_json(out / "config.json", {**config.to_dict(), **prov})

    echo("preparing data")
    split = prepare_data(config)
    split.save(out / "data" / "split.npz")
    write_json(out / "data" / "manifest.json", {**split.manifest(), **prov})

    checkpoints = {}
    for mode in ("natural", "sdm", "random_defense"):
        echo(f"training {mode} model")
        ckpt = train_mode(config, split, mode, log_path=out / "models" / f"{mode}.log.jsonl")
        ckpt.save(out / "models" / f"{mode}.pt")
        checkpoints[mode] = ckpt

    sweep = sweep_config(config, split)
    n = len(split.X_test) if sweep.n_samples is None else min(sweep.n_samples, len(split.X_test))
    X, y = split.X_test[:n], split.y_test[:n]
    batches: dict = {}
    for tag, ckpt in checkpoints.items():
        for attack in sweep.attacks:
            if attack == "none":
                continue
            echo(f"attacking {tag} model with {attack}")
            batch = generate_adversarial(ckpt, X, attack, sweep.budget, labels=y)
            batch.save(out / "attacks" / f"{tag}_{attack}.npz")
            write_json(out / "attacks" / f"{tag}_{attack}.json", {**batch.manifest(), **prov})
            batches[(tag, attack)] = batch

    echo("running SNR sweep")
    table = run_snr_sweep(sweep, checkpoints, X, y, batches)
    csv_path = write_results(table, out / "results" / "results.csv", prov)

    eps_rows = []
    if "sna" in sweep.attacks and config.scale == "desk":
        echo("sweeping epsilon grid")
        for frac in config.sweep.epsilon_grid:
            eps = frac * sweep.budget.epsilon
            if frac == 1.0:
                batch = batches[("natural", "sna")]
            else:
                budget = dataclasses.replace(sweep.budget, epsilon=eps)
                batch = generate_adversarial(checkpoints["natural"], X, "sna", budget, labels=y)
            acc = task_accuracy(checkpoints["natural"], batch.perturbed, y, REFERENCE_SNR_DB,
                                channel_seed(config.seed, REFERENCE_SNR_DB))
            eps_rows.append(ResultRow("natural", "sna", REFERENCE_SNR_DB, eps, acc, n, config.seed))
        write_results(eps_rows, out / "results" / "epsilon_grid.csv", prov)

    paths = {"results": csv_path}
    paths["benign_plot"] = plot_curves(table, "benign", out / "plots" / "benign.png", prov)
    if any(r.attack_tag != "none" for r in table):
        paths["adversarial_plot"] = plot_curves(table, "adversarial", out / "plots" / "adversarial.png", prov)

    if config.scale == "desk":
        criteria = desk_criteria(table, eps_rows, sweep.snr_grid)
    else:
        criteria = full_criteria(table)
    report = format_criteria(criteria)
    (out / "criteria.txt").write_text(report)
    write_json(out / "criteria.json", {"criteria": [dataclasses.asdict(c) for c in criteria], **prov})
    write_json(out / "sweep_manifest.json", {
        **prov,
        "checkpoints": {k: str(out / "models" / f"{k}.pt") for k in checkpoints},
        "budget": dataclasses.asdict(sweep.budget),
        "snr_grid": list(sweep.snr_grid),
        "n_samples": n,
        "code_version": _code_version(),
    })
    return ExperimentResult(split, checkpoints, table, eps_rows, criteria, paths)


def _code_version() -> str:
    from . import __version__

    return __version__

