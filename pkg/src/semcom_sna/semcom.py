"""Task-oriented SemCom pipeline.

semantic encoder -> channel encoder -> power normalisation -> AWGN -> channel
decoder -> task head.  The head is a linear classifier for traffic signs or a
per-position symbol scorer decoded greedily for licence plates.
"""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ._validation import ContractError, check_images
from .datasets import BLANK, PLATE_ALPHABET, PLATE_HEIGHT, PLATE_WIDTH

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "semcom-sna-checkpoint/1"
TASKS = ("classification", "plate_recognition")
PROVENANCE_TAGS = ("natural", "sdm", "random_defense")


class NormalizationError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


# --------------------------------------------------------------------------- channel


def power_normalize(x):
    """Scale each row of ``x`` (last axis, length d_c) to unit average power.

    Accepts a numpy array or a torch tensor and returns the same kind.
    """
    if isinstance(x, torch.Tensor):
        sq = x.pow(2).sum(dim=-1, keepdim=True)
        if bool((sq == 0).any()):
            raise NormalizationError("cannot power-normalise an all-zero vector")
        return x * torch.sqrt(x.shape[-1] / sq)
    x = np.asarray(x, dtype=np.float64)
    sq = np.sum(x * x, axis=-1, keepdims=True)
    if np.any(sq == 0):
        raise NormalizationError("cannot power-normalise an all-zero vector")
    return x * np.sqrt(x.shape[-1] / sq)


def noise_std(snr_db: float) -> float:
    """Per-entry noise standard deviation for unit signal power."""
    return math.sqrt(10.0 ** (-snr_db / 10.0))


def awgn_channel(x, snr_db: float, rng_seed: int | torch.Generator | np.random.Generator | None = None):
    """Add white Gaussian noise with variance ``10**(-snr_db/10)`` per entry.

    ``x`` is assumed power-normalised.  Torch tensors take a ``torch.Generator``
    (or integer seed); numpy arrays take a ``numpy.random.Generator`` (or seed).
    """
    sigma = noise_std(snr_db)
    if isinstance(x, torch.Tensor):
        gen = rng_seed
        if gen is None or isinstance(gen, int):
            gen = torch.Generator(device=x.device)
            gen.manual_seed(0 if rng_seed is None else int(rng_seed))
        return x + sigma * torch.randn(x.shape, generator=gen, dtype=x.dtype, device=x.device)
    rng = np.random.default_rng(rng_seed)
    x = np.asarray(x, dtype=np.float64)
    return x + sigma * rng.standard_normal(x.shape)


@dataclass(frozen=True)
class ChannelConfig:
    snr_db_min: float = 5.0
    snr_db_max: float = 10.0
    eval_snr_grid: tuple[float, ...] = tuple(float(v) for v in range(0, 21, 2))

    def __post_init__(self):
        if self.snr_db_min > self.snr_db_max:
            raise ContractError("snr_db_min must not exceed snr_db_max")
        grid = tuple(float(v) for v in self.eval_snr_grid)
        object.__setattr__(self, "eval_snr_grid", grid)
        if not grid:
            raise ContractError("eval_snr_grid must be non-empty")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ContractError("eval_snr_grid must be strictly increasing")


def sample_training_snr(config: ChannelConfig, rng: np.random.Generator) -> float:
    if config.snr_db_min == config.snr_db_max:
        return float(config.snr_db_min)
    return float(rng.uniform(config.snr_db_min, config.snr_db_max))


# --------------------------------------------------------------------------- networks


class BasicBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.shortcut = nn.Sequential()
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), nn.BatchNorm2d(c_out))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNetEncoder(nn.Module):
    """Three-stage residual encoder (ResNet-20 layout with the defaults)."""

    def __init__(self, d_s: int, width: int = 16, blocks_per_stage: int = 3):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(3, width, 3, 1, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU())
        layers, c = [], width
        for stage, mult in enumerate((1, 2, 4)):
            for b in range(blocks_per_stage):
                stride = 2 if (stage > 0 and b == 0) else 1
                layers.append(BasicBlock(c, width * mult, stride))
                c = width * mult
        self.stages = nn.Sequential(*layers)
        self.proj = nn.Linear(c, d_s)

    def forward(self, x):
        h = self.stages(self.stem(x))
        return self.proj(F.adaptive_avg_pool2d(h, 1).flatten(1))


class SmallCNNEncoder(nn.Module):
    def __init__(self, d_s: int, image_size: int, width: int = 32):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, width, 3, 1, 1), nn.ReLU(),
            nn.Conv2d(width, 2 * width, 3, 2, 1), nn.ReLU(),
            nn.Conv2d(2 * width, 2 * width, 3, 2, 1), nn.ReLU(),
        )
        side = math.ceil(math.ceil(image_size / 2) / 2)
        self.proj = nn.Linear(2 * width * side * side, d_s)

    def forward(self, x):
        return self.proj(self.features(x).flatten(1))


class MLPEncoder(nn.Module):
    """Two dense layers; used for gradient-check and oracle experiments."""

    def __init__(self, d_s: int, n_inputs: int, hidden: int = 32):
        super().__init__()
        self.net = nn.Sequential(nn.Flatten(), nn.Linear(n_inputs, hidden), nn.Tanh(), nn.Linear(hidden, d_s))

    def forward(self, x):
        return self.net(x)


class LPRNetEncoder(nn.Module):
    """Compact LPRNet-style encoder producing a (channels x positions) feature map, flattened.

    Features are max-pooled over height, so vertical plate jitter does not
    move symbols between positions.
    """

    def __init__(self, sem_channels: int = 16, positions: int = 18, width: int = 32):
        super().__init__()
        self.positions = positions
        self.sem_channels = sem_channels

        def block(cin, cout):
            return [nn.Conv2d(cin, cout, 3, 1, 1), nn.BatchNorm2d(cout), nn.ReLU()]

        self.features = nn.Sequential(
            *block(3, width), *block(width, width), nn.MaxPool2d(2),
            *block(width, 2 * width), nn.MaxPool2d(2),
            *block(2 * width, 2 * width),
        )
        self.out = nn.Conv2d(2 * width, sem_channels, 1)

    def forward(self, x):
        h = self.features(x).amax(dim=2, keepdim=True)
        h = F.adaptive_avg_pool2d(self.out(h), (1, self.positions))
        return h.flatten(1)


class PositionwiseLinear(nn.Module):
    """One linear map shared across positions of a channel-major ``(C * P)`` vector."""

    def __init__(self, in_features: int, out_features: int, positions: int):
        super().__init__()
        self.positions = positions
        self.linear = nn.Linear(in_features, out_features)

    def forward(self, v):
        h = v.view(v.shape[0], -1, self.positions).transpose(1, 2)  # (n, P, C_in)
        return self.linear(h).transpose(1, 2).flatten(1)


class SequenceHead(nn.Module):
    def __init__(self, sem_channels: int, positions: int, n_symbols: int, hidden: int = 64):
        super().__init__()
        self.sem_channels, self.positions = sem_channels, positions
        self.net = nn.Sequential(
            nn.Conv1d(sem_channels, hidden, 3, 1, 1), nn.ReLU(), nn.Conv1d(hidden, n_symbols, 1)
        )

    def forward(self, r):
        h = r.view(r.shape[0], self.sem_channels, self.positions)
        return self.net(h).transpose(1, 2)  # (n, positions, symbols)


@dataclass(frozen=True)
class PipelineConfig:
    task: str = "classification"
    d_s: int = 256
    d_c: int = 128
    encoder_arch: str = "resnet"
    head_arch: str = "linear"
    seed: int = 0
    num_classes: int = 43
    image_shape: tuple[int, int, int] = (3, 32, 32)
    alphabet: tuple[str, ...] = PLATE_ALPHABET
    encoder_width: int = 16
    plate_positions: int = 18
    semantic_norm: str = "layernorm"

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        object.__setattr__(self, "alphabet", tuple(self.alphabet))
        if self.task not in TASKS:
            raise ContractError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.d_s <= 0 or self.d_c <= 0:
            raise ContractError("d_s and d_c must be positive")
        if self.task == "plate_recognition":
            if self.alphabet[0] != BLANK:
                raise ContractError("plate alphabet must start with the blank symbol")
            if self.d_s % self.plate_positions:
                raise ContractError("plate d_s must be a multiple of plate_positions")

    @classmethod
    def for_plates(cls, **kw) -> "PipelineConfig":
        kw.setdefault("plate_positions", 18)
        kw.setdefault("d_s", 16 * kw["plate_positions"])
        return cls(task="plate_recognition", encoder_arch=kw.pop("encoder_arch", "lprnet"),
                   head_arch=kw.pop("head_arch", "sequence"), image_shape=(3, PLATE_HEIGHT, PLATE_WIDTH), **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        d["alphabet"] = list(self.alphabet)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return cls(**d)


def build_encoder(config: PipelineConfig) -> nn.Module:
    c, h, w = config.image_shape
    arch = config.encoder_arch
    if arch == "resnet":
        return ResNetEncoder(config.d_s, width=config.encoder_width)
    if arch == "small_cnn":
        if h != w:
            raise ContractError("small_cnn expects square images")
        return SmallCNNEncoder(config.d_s, h, width=config.encoder_width)
    if arch == "mlp":
        return MLPEncoder(config.d_s, c * h * w, hidden=config.encoder_width)
    if arch == "lprnet":
        return LPRNetEncoder(config.d_s // config.plate_positions, config.plate_positions, config.encoder_width)
    raise ContractError(f"unknown encoder_arch {arch!r}")


class SemComNet(nn.Module):
    """End-to-end SemCom system; ``encode`` is the attack surface."""

    def __init__(self, config: PipelineConfig):
        super().__init__()
        self.config = config
        self.encoder = build_encoder(config)
        if config.semantic_norm == "layernorm":
            self.semantic_norm = nn.LayerNorm(config.d_s, elementwise_affine=False)
        elif config.semantic_norm == "none":
            self.semantic_norm = nn.Identity()
        else:
            raise ContractError(f"unknown semantic_norm {config.semantic_norm!r}")
        if config.task == "classification":
            self.channel_encoder = nn.Sequential(nn.Linear(config.d_s, config.d_c), nn.Tanh())
            self.channel_decoder = nn.Sequential(nn.Linear(config.d_c, config.d_s), nn.ReLU())
        else:
            # plates: code each position separately so the sequence layout survives the channel
            P, C = config.plate_positions, config.d_s // config.plate_positions
            k = max(1, config.d_c // P)
            self.channel_encoder = nn.Sequential(PositionwiseLinear(C, k, P), nn.Tanh())
            self.channel_decoder = nn.Sequential(PositionwiseLinear(k, C, P), nn.ReLU())
        if config.task == "classification":
            self.head = nn.Linear(config.d_s, config.num_classes)
        else:
            self.head = SequenceHead(config.d_s // config.plate_positions, config.plate_positions,
                                     len(config.alphabet))

    def encode(self, x):
        return self.semantic_norm(self.encoder(x))

    def transmit(self, s, snr_db: float | None = None, generator: torch.Generator | None = None):
        z = power_normalize(self.channel_encoder(s))
        if snr_db is not None:
            z = awgn_channel(z, snr_db, generator)
        return self.channel_decoder(z)

    def forward(self, x, snr_db: float | None = None, generator: torch.Generator | None = None):
        return self.head(self.transmit(self.encode(x), snr_db, generator))


def init_model(config: PipelineConfig) -> SemComNet:
    torch.manual_seed(config.seed)
    return SemComNet(config)


# --------------------------------------------------------------------------- checkpoint


@dataclass
class ModelCheckpoint:
    model: SemComNet
    config: PipelineConfig
    history: list[dict] = field(default_factory=list)
    tag: str = "natural"
    extra: dict = field(default_factory=dict)
    batch_reports: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.tag not in PROVENANCE_TAGS:
            raise ContractError(f"checkpoint tag must be one of {PROVENANCE_TAGS}")

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({
            "format": CHECKPOINT_FORMAT,
            "config": self.config.to_dict(),
            "state_dict": self.model.state_dict(),
            "history": self.history,
            "tag": self.tag,
            "extra": json.dumps(self.extra, sort_keys=True),
        }, path)
        return path

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        blob = torch.load(path, map_location="cpu", weights_only=True)
        if blob.get("format") != CHECKPOINT_FORMAT:
            raise ContractError(f"{path} is not a {CHECKPOINT_FORMAT} file")
        config = PipelineConfig.from_dict(blob["config"])
        model = SemComNet(config)
        model.load_state_dict(blob["state_dict"])
        model.eval()
        return cls(model, config, list(blob["history"]), blob["tag"], json.loads(blob["extra"]))

    def state_digest(self) -> str:
        buf = io.BytesIO()
        for k, v in sorted(self.model.state_dict().items()):
            buf.write(k.encode())
            buf.write(v.detach().cpu().contiguous().numpy().tobytes())
        import hashlib

        return hashlib.sha256(buf.getvalue()).hexdigest()


# --------------------------------------------------------------------------- decoding


def plate_greedy_decode(scores, alphabet: Sequence[str] = PLATE_ALPHABET, blank: int = 0) -> str:
    """Per-position argmax, collapse repeats, drop blanks.  ``scores`` is (positions, symbols)."""
    best = np.asarray(scores).argmax(axis=-1)
    out, prev = [], None
    for idx in best.tolist():
        if idx != prev and idx != blank:
            out.append(alphabet[idx])
        prev = idx
    return "".join(out)


def encode_plate_targets(plates: Sequence[str], alphabet: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
    lookup = {c: i for i, c in enumerate(alphabet)}
    try:
        flat = [lookup[c] for p in plates for c in p]
    except KeyError as exc:
        raise ContractError(f"symbol {exc.args[0]!r} is not in the plate alphabet") from None
    return torch.tensor(flat, dtype=torch.long), torch.tensor([len(p) for p in plates], dtype=torch.long)


# --------------------------------------------------------------------------- losses / training


def task_loss(model: SemComNet, outputs: torch.Tensor, targets) -> torch.Tensor:
    if model.config.task == "classification":
        return F.cross_entropy(outputs, targets)
    flat, lengths = targets
    log_probs = outputs.log_softmax(-1).transpose(0, 1)  # (T, n, A)
    in_lengths = torch.full((outputs.shape[0],), outputs.shape[1], dtype=torch.long)
    return F.ctc_loss(log_probs, flat, in_lengths, lengths, blank=0, zero_infinity=True)


def _batch_targets(config: PipelineConfig, y, idx):
    if config.task == "classification":
        return torch.as_tensor(np.asarray(y)[idx], dtype=torch.long)
    return encode_plate_targets([y[i] for i in idx], config.alphabet)


def _count_correct(config: PipelineConfig, outputs: torch.Tensor, y, idx) -> int:
    if config.task == "classification":
        return int((outputs.argmax(1).numpy() == np.asarray(y)[idx]).sum())
    scores = outputs.detach().numpy()
    return sum(plate_greedy_decode(s, config.alphabet) == y[i] for s, i in zip(scores, idx))


# (model, x, targets, snr_db, generator) -> (total loss, report dict)
BatchObjective = Callable[..., tuple[torch.Tensor, dict]]


def natural_objective(model, x, targets, snr_db, generator):
    outputs = model(x, snr_db, generator)
    loss = task_loss(model, outputs, targets)
    return loss, {"natural_loss": float(loss.detach()), "_outputs": outputs}


def train_loop(checkpoint: ModelCheckpoint, X, y, channel_config: ChannelConfig, epochs: int, *,
               seed: int = 0, batch_size: int = 64, lr: float = 1e-3,
               objective: BatchObjective = natural_objective, log_path=None) -> ModelCheckpoint:
    """Mini-batch Adam training with one uniformly drawn training SNR per batch."""
    model, config = checkpoint.model, checkpoint.config
    X = check_images(X, shape=config.image_shape)
    if len(X) == 0:
        raise ContractError("training set is empty")
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    if log_path:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_path, "w") if log_path else None
    start_epoch = len(checkpoint.history)
    try:
        for epoch in range(start_epoch + 1, start_epoch + epochs + 1):
            model.train()
            order = rng.permutation(len(X))
            loss_sum, correct, seen = 0.0, 0, 0
            reports: dict[str, float] = {}
            for b in range(0, len(X), batch_size):
                idx = order[b:b + batch_size]
                xb = torch.from_numpy(np.ascontiguousarray(X[idx]))
                targets = _batch_targets(config, y, idx)
                snr = sample_training_snr(channel_config, rng)
                loss, report = objective(model, xb, targets, snr, gen)
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}", epoch=epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                outputs = report.pop("_outputs")
                loss_sum += float(loss.detach()) * len(idx)
                correct += _count_correct(config, outputs.detach(), y, idx)
                seen += len(idx)
                for k, v in report.items():
                    reports[k] = reports.get(k, 0.0) + v * len(idx)
            record = {"epoch": epoch, "loss": loss_sum / seen, "accuracy": correct / seen}
            record.update({k: v / seen for k, v in reports.items()})
            checkpoint.history.append(record)
            logger.info("epoch %d loss %.4f acc %.4f", epoch, record["loss"], record["accuracy"])
            if log_fh:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    return checkpoint


def train_natural(split, pipeline_config: PipelineConfig, channel_config: ChannelConfig, epochs: int,
                  seed: int = 0, **kw) -> ModelCheckpoint:
    ckpt = ModelCheckpoint(init_model(pipeline_config), pipeline_config, tag="natural",
                           extra={"channel_config": asdict(channel_config)})
    if epochs == 0:
        ckpt.model.eval()
        return ckpt
    return train_loop(ckpt, split.X_train, split.y_train, channel_config, epochs, seed=seed, **kw)


# --------------------------------------------------------------------------- inference / metrics


def _as_module(model) -> SemComNet:
    if isinstance(model, SemComNet):
        return model
    if isinstance(model, ModelCheckpoint):
        return model.model
    inner = getattr(model, "checkpoint_", None)
    if inner is not None:
        return inner.model
    raise ContractError(f"cannot obtain a SemCom model from {type(model).__name__}")


@torch.no_grad()
def semcom_forward(pixels, model, snr_db: float | None, seed: int = 0, batch_size: int = 256) -> np.ndarray:
    """Task scores for ``pixels``; deterministic given weights, inputs, ``snr_db`` and ``seed``.

    ``snr_db=None`` bypasses the noise (channel-bypass forward).
    """
    net = _as_module(model)
    X = check_images(pixels)
    if tuple(X.shape[1:]) != net.config.image_shape:
        raise ContractError(f"input shape {X.shape[1:]} does not match pipeline {net.config.image_shape}")
    was_training = net.training
    net.eval()
    gen = torch.Generator().manual_seed(int(seed))
    outs = [net(torch.as_tensor(X[b:b + batch_size].copy()), snr_db, gen) for b in range(0, len(X), batch_size)]
    net.train(was_training)
    return torch.cat(outs).numpy()


@torch.no_grad()
def encode_semantics(model, pixels, batch_size: int = 512) -> np.ndarray:
    net = _as_module(model)
    X = check_images(pixels, shape=net.config.image_shape)
    net.eval()
    return torch.cat([net.encode(torch.as_tensor(X[b:b + batch_size].copy())) for b in range(0, len(X), batch_size)]).numpy()


def classify_accuracy(model, X, y, snr_db: float | None, seed: int = 0) -> float:
    if len(X) == 0:
        raise ContractError("accuracy of an empty sample set is undefined")
    if _as_module(model).config.task != "classification":
        raise ContractError("classify_accuracy requires a classification pipeline")
    scores = semcom_forward(X, model, snr_db, seed)
    return float(np.mean(scores.argmax(1) == np.asarray(y)))


def plate_predict(model, X, snr_db: float | None, seed: int = 0) -> list[str]:
    net = _as_module(model)
    scores = semcom_forward(X, model, snr_db, seed)
    return [plate_greedy_decode(s, net.config.alphabet) for s in scores]


def plate_accuracy(model, X, plates: Sequence[str], snr_db: float | None, seed: int = 0) -> float:
    if len(X) == 0:
        raise ContractError("accuracy of an empty sample set is undefined")
    if _as_module(model).config.task != "plate_recognition":
        raise ContractError("plate_accuracy requires a plate-recognition pipeline")
    preds = plate_predict(model, X, snr_db, seed)
    return float(np.mean([p == t for p, t in zip(preds, plates)]))


def task_accuracy(model, X, y, snr_db: float | None, seed: int = 0) -> float:
    if _as_module(model).config.task == "classification":
        return classify_accuracy(model, X, y, snr_db, seed)
    return plate_accuracy(model, X, y, snr_db, seed)
