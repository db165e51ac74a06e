"""Semantic distance minimisation (SDM) training and the random-noise defense baseline.

Each training batch is paired with online adversarial images that push the
encoder's semantics away from the benign semantics; the loss adds
``lambda * KL(softmax(enc(x_adv)) || softmax(enc(x)))`` to the task loss.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from ._validation import ContractError
from .attack import _project_batch, semantic_distance
from .semcom import (
    ChannelConfig,
    ModelCheckpoint,
    PipelineConfig,
    TrainingError,
    _as_module,
    init_model,
    task_loss,
    train_loop,
)


@dataclass(frozen=True)
class SDMConfig:
    lambda_: float = 1.0
    inner_iterations: int = 10
    inner_step_size: float | None = None
    inner_epsilon: float = 3.6
    epochs: int = 20
    seed: int = 0
    init_jitter: float = 1e-3
    batch_size: int = 64
    lr: float = 1e-3

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ContractError("lambda must be >= 0")
        if self.inner_iterations < 1:
            raise ContractError("inner_iterations must be >= 1")
        if self.inner_epsilon < 0:
            raise ContractError("inner_epsilon must be >= 0")
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")

    @property
    def step(self) -> float:
        return self.inner_epsilon / 4 if self.inner_step_size is None else self.inner_step_size


@dataclass(frozen=True)
class SDMBatchReport:
    natural_loss: float
    robust_loss: float
    total_loss: float
    inner_distance: float


def _jitter_start(x: torch.Tensor, config: SDMConfig, gen: torch.Generator) -> torch.Tensor:
    delta = config.init_jitter * torch.randn(x.shape, generator=gen, dtype=x.dtype)
    delta = _project_batch(delta, config.inner_epsilon)
    return (x + delta).clamp(0.0, 1.0)


def sdm_inner_maximize(model, batch, config: SDMConfig, generator: torch.Generator | None = None,
                       callback=None) -> torch.Tensor:
    """White-box ascent on the semantic KL, L2-projected to ``inner_epsilon`` and clipped to [0, 1]."""
    net = _as_module(model)
    x = torch.as_tensor(batch)
    gen = generator or torch.Generator().manual_seed(config.seed)
    was_training = net.training
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    try:
        with torch.no_grad():
            ref = net.encode(x)
        x_adv = _jitter_start(x, config, gen)
        if config.inner_epsilon == 0:
            return x.detach().clone()
        for it in range(config.inner_iterations):
            if config.step == 0:
                break
            x_adv.requires_grad_(True)
            d = semantic_distance(net.encode(x_adv), ref, "kl_softmax")
            (g,) = torch.autograd.grad(d.sum(), x_adv)
            if not torch.isfinite(g).all() or not torch.isfinite(d).all():
                raise TrainingError(f"non-finite inner loss at inner iteration {it}")
            gnorm = g.flatten(1).norm(dim=1).clamp_min(1e-30).view(-1, *([1] * (g.dim() - 1)))
            delta = x_adv.detach() + config.step * g / gnorm - x
            x_adv = (x + _project_batch(delta, config.inner_epsilon)).clamp(0.0, 1.0)
            if callback is not None:
                callback(it, x_adv)
    finally:
        for p in net.parameters():
            p.requires_grad_(True)
        net.train(was_training)
    return x_adv.detach()


def random_perturbation(batch, config: SDMConfig, generator: torch.Generator | None = None) -> torch.Tensor:
    """Benign batch plus Gaussian noise rescaled to L2 norm ``inner_epsilon``, clipped."""
    x = torch.as_tensor(batch)
    if config.inner_epsilon == 0:
        return x.clone()
    gen = generator or torch.Generator().manual_seed(config.seed)
    u = torch.randn(x.shape, generator=gen, dtype=x.dtype)
    u = u * (config.inner_epsilon / u.flatten(1).norm(dim=1).clamp_min(1e-12)).view(-1, *([1] * (x.dim() - 1)))
    return (x + u).clamp(0.0, 1.0)


def sdm_loss(model, batch, labels, x_adv, lambda_: float, snr_db: float | None = None,
             generator: torch.Generator | None = None):
    """Return ``(total_loss_tensor, SDMBatchReport, benign_outputs)``.

    The natural term is the task loss of the benign batch through the channel;
    the robust term is the mean semantic KL between ``x_adv`` and the batch.
    """
    net = _as_module(model)
    x = torch.as_tensor(batch)
    x_adv = torch.as_tensor(x_adv)
    if x.shape != x_adv.shape:
        raise ContractError(f"x_adv shape {tuple(x_adv.shape)} differs from batch {tuple(x.shape)}")
    s_nat = net.encode(x)
    outputs = net.head(net.transmit(s_nat, snr_db, generator))
    natural = task_loss(net, outputs, labels)
    if torch.equal(x, x_adv):  # KL(s || s) = 0 exactly; skip the noisy evaluation
        robust = torch.zeros((), dtype=natural.dtype)
    else:
        robust = semantic_distance(net.encode(x_adv), s_nat, "kl_softmax").mean()
    total = natural + lambda_ * robust
    report = SDMBatchReport(float(natural.detach()), float(robust.detach()), float(total.detach()),
                            float(robust.detach()))
    return total, report, outputs


def _objective(config: SDMConfig, maximize: bool, reports: list):
    adv_gen = torch.Generator().manual_seed(config.seed + 1)

    def objective(model, x, targets, snr_db, generator):
        if maximize:
            x_adv = sdm_inner_maximize(model, x, config, adv_gen)
        else:
            x_adv = random_perturbation(x, config, adv_gen)
        total, report, outputs = sdm_loss(model, x, targets, x_adv, config.lambda_, snr_db, generator)
        reports.append(report)
        return total, {"natural_loss": report.natural_loss, "robust_loss": report.robust_loss,
                       "total_loss": report.total_loss, "_outputs": outputs}

    return objective


def _train_defended(split, pipeline_config: PipelineConfig, channel_config: ChannelConfig,
                    sdm_config: SDMConfig, tag: str, maximize: bool, log_path=None) -> ModelCheckpoint:
    ckpt = ModelCheckpoint(init_model(pipeline_config), pipeline_config, tag=tag,
                           extra={"channel_config": asdict(channel_config), "sdm_config": asdict(sdm_config)})
    reports: list[SDMBatchReport] = []
    if sdm_config.epochs:
        train_loop(ckpt, split.X_train, split.y_train, channel_config, sdm_config.epochs, seed=sdm_config.seed,
                   batch_size=sdm_config.batch_size, lr=sdm_config.lr,
                   objective=_objective(sdm_config, maximize, reports), log_path=log_path)
    ckpt.model.eval()
    ckpt.batch_reports = reports
    return ckpt


def train_sdm(split, pipeline_config: PipelineConfig, channel_config: ChannelConfig, sdm_config: SDMConfig,
              log_path=None) -> ModelCheckpoint:
    """Adversarial training with online semantic-distance maximisation; checkpoint tagged ``sdm``."""
    return _train_defended(split, pipeline_config, channel_config, sdm_config, "sdm", True, log_path)


def train_random_defense(split, pipeline_config: PipelineConfig, channel_config: ChannelConfig,
                         sdm_config: SDMConfig, log_path=None) -> ModelCheckpoint:
    """As :func:`train_sdm` but the paired images are random noise of norm ``inner_epsilon``."""
    return _train_defended(split, pipeline_config, channel_config, sdm_config, "random_defense", False, log_path)
