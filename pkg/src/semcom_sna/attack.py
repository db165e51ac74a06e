"""Semantic noise attack (query-only) plus white-box PGD and random-noise baselines.

Every attack perturbs pixels inside a per-sample L2 ball of radius
``epsilon`` and keeps pixels in [0, 1].  The objective is the distance
between the encoder's semantics of the perturbed image and of the benign
image.
"""

from __future__ import annotations

import json
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.fft
import scipy.special
import torch

from ._validation import ContractError, check_images
from .semcom import _as_module

METRICS = ("kl_softmax", "l2")


class AttackError(RuntimeError):
    def __init__(self, message: str, queries_used: int = 0):
        super().__init__(f"{message} (queries used: {queries_used})")
        self.queries_used = queries_used


class QueryBudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackBudget:
    """L2 attack budget.

    ``step_size`` defaults to ``epsilon / 4`` and ``init_fraction`` sets the
    radius of the random start relative to ``epsilon`` (the semantic distance
    is flat at the benign point, so ascent needs a non-zero start).
    """

    epsilon: float = 3.6
    max_iterations: int = 50
    step_size: float | None = None
    queries_per_iteration: int = 100
    smoothing_sigma: float = 1e-2
    freq_cutoff: int | None = None
    seed: int = 0
    metric: str = "kl_softmax"
    init_fraction: float = 0.1

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ContractError("epsilon must be >= 0")
        if self.max_iterations < 0:
            raise ContractError("max_iterations must be >= 0")
        if self.queries_per_iteration < 2 or self.queries_per_iteration % 2:
            raise ContractError("queries_per_iteration must be even and >= 2")
        if not self.smoothing_sigma > 0:
            raise ContractError("smoothing_sigma must be > 0")
        if self.freq_cutoff is not None and self.freq_cutoff < 1:
            raise ContractError("freq_cutoff must be >= 1")
        if self.metric not in METRICS:
            raise ContractError(f"metric must be one of {METRICS}")
        if not 0 <= self.init_fraction <= 1:
            raise ContractError("init_fraction must lie in [0, 1]")

    @property
    def step(self) -> float:
        return self.epsilon / 4 if self.step_size is None else self.step_size

    def total_queries(self, batch_size: int) -> int:
        return batch_size * (1 + self.max_iterations * self.queries_per_iteration)


# --------------------------------------------------------------------------- primitives


def semantic_distance(a, b, metric: str = "kl_softmax"):
    """Distance between semantic vectors along the last axis.

    ``kl_softmax`` is KL(softmax(a) || softmax(b)); ``l2`` is the Euclidean
    norm of ``a - b``.  Works on numpy arrays and torch tensors (with grad).
    """
    if a.shape[-1] != b.shape[-1]:
        raise ContractError(f"semantic vectors differ in length: {a.shape[-1]} vs {b.shape[-1]}")
    if metric not in METRICS:
        raise ContractError(f"unknown metric {metric!r}")
    if isinstance(a, torch.Tensor):
        if metric == "l2":
            return (a - b).norm(dim=-1)
        la, lb = a.log_softmax(-1), b.log_softmax(-1)
        return (la.exp() * (la - lb)).sum(-1).clamp_min(0.0)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if metric == "l2":
        return np.linalg.norm(a - b, axis=-1)
    la = a - scipy.special.logsumexp(a, axis=-1, keepdims=True)
    lb = b - scipy.special.logsumexp(b, axis=-1, keepdims=True)
    return np.maximum(np.sum(np.exp(la) * (la - lb), axis=-1), 0.0)


def project_l2_ball(delta, epsilon: float):
    """Closest point to ``delta`` in the L2 ball of radius ``epsilon`` (norm over all entries)."""
    if isinstance(delta, torch.Tensor):
        norm = float(delta.norm())
    else:
        delta = np.asarray(delta, dtype=np.float64)
        norm = float(np.linalg.norm(delta))
    if norm <= epsilon:
        return delta
    return delta * (epsilon / norm)


def _project_batch(delta: torch.Tensor, epsilon: float) -> torch.Tensor:
    norms = delta.flatten(1).norm(dim=1).clamp_min(1e-12)
    factor = torch.clamp(epsilon / norms, max=1.0)
    return delta * factor.view(-1, *([1] * (delta.dim() - 1)))


def lowfreq_filter(delta, freq_cutoff: int | None):
    """Keep only the top-left ``freq_cutoff`` x ``freq_cutoff`` block of each channel's 2-D DCT."""
    if freq_cutoff is None:
        return delta
    is_torch = isinstance(delta, torch.Tensor)
    arr = delta.detach().cpu().numpy() if is_torch else np.asarray(delta)
    h, w = arr.shape[-2:]
    if freq_cutoff >= h and freq_cutoff >= w:
        return delta
    coeffs = scipy.fft.dctn(arr, axes=(-2, -1), norm="ortho")
    coeffs[..., freq_cutoff:, :] = 0.0
    coeffs[..., :, freq_cutoff:] = 0.0
    out = scipy.fft.idctn(coeffs, axes=(-2, -1), norm="ortho").astype(arr.dtype, copy=False)
    return torch.from_numpy(out).to(delta.dtype) if is_torch else out


# --------------------------------------------------------------------------- oracle


class SemanticOracle:
    """Query endpoint returning semantic vectors for a batch of images.

    This is the only view of the model the query-based attack gets.  The
    counter is incremented by the number of images in each query, under a
    lock so concurrent attackers account correctly.
    """

    def __init__(self, endpoint: Callable[[np.ndarray], np.ndarray], max_queries: int | None = None):
        self._endpoint = endpoint
        self._lock = threading.Lock()
        self.query_counter = 0
        self.max_queries = max_queries

    @classmethod
    def from_model(cls, model, batch_size: int = 1024, max_queries: int | None = None) -> "SemanticOracle":
        net = _as_module(model)

        @torch.no_grad()
        def endpoint(images):
            net.eval()
            x = torch.from_numpy(np.array(images, dtype=np.float32))
            return torch.cat([net.encode(x[b:b + batch_size]) for b in range(0, len(x), batch_size)]).numpy()

        return cls(endpoint, max_queries)

    def query(self, images) -> np.ndarray:
        n = len(images)
        with self._lock:
            if self.max_queries is not None and self.query_counter + n > self.max_queries:
                raise QueryBudgetExceeded(f"query budget of {self.max_queries} images exhausted")
            self.query_counter += n
        return np.asarray(self._endpoint(images))


# --------------------------------------------------------------------------- results


@dataclass
class AdversarialBatch:
    originals: np.ndarray
    perturbed: np.ndarray
    norms: np.ndarray
    queries_used: int
    distances: np.ndarray
    attack: str = "sna"
    epsilon: float = 0.0
    truncated: bool = False
    labels: object = None
    budget: dict = field(default_factory=dict)
    pre_clip_norms: np.ndarray | None = None
    model_tag: str | None = None

    def check_invariants(self, atol: float = 1e-5) -> None:
        if self.perturbed.min() < 0 or self.perturbed.max() > 1:
            raise ContractError("perturbed pixels left [0, 1]")
        if np.any(self.norms > self.epsilon + atol):
            raise ContractError("perturbation exceeds the L2 budget")

    def manifest(self) -> dict:
        return {
            "attack": self.attack,
            "model_tag": self.model_tag,
            "epsilon": self.epsilon,
            "budget": self.budget,
            "queries_used": int(self.queries_used),
            "truncated": bool(self.truncated),
            "n_samples": int(len(self.perturbed)),
            "mean_l2": float(np.mean(self.norms)) if len(self.norms) else 0.0,
            "norms": [float(v) for v in self.norms],
            "distances": [float(v) for v in self.distances],
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        labels = np.asarray([] if self.labels is None else self.labels)
        with open(path, "wb") as fh:
            np.savez(fh, originals=self.originals, perturbed=self.perturbed, norms=self.norms,
                     distances=self.distances, labels=labels,
                     meta=np.asarray(json.dumps({k: v for k, v in self.manifest().items()
                                                 if k not in ("norms", "distances")})))
        return path

    @classmethod
    def load(cls, path) -> "AdversarialBatch":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            labels = data["labels"]
            labels = None if labels.size == 0 else (
                labels.copy() if labels.dtype.kind in "iu" else [str(s) for s in labels])
            return cls(data["originals"].copy(), data["perturbed"].copy(), data["norms"].copy(),
                       meta["queries_used"], data["distances"].copy(), meta["attack"], meta["epsilon"],
                       meta["truncated"], labels, meta["budget"], model_tag=meta.get("model_tag"))


# --------------------------------------------------------------------------- helpers


def _random_directions(shape, gen: torch.Generator, radius: float) -> torch.Tensor:
    u = torch.randn(shape, generator=gen)
    scale = radius / u.flatten(1).norm(dim=1).clamp_min(1e-12)
    return u * scale.view(-1, *([1] * (len(shape) - 1)))


def _step(x: torch.Tensor, x0: torch.Tensor, g: torch.Tensor, budget: AttackBudget) -> torch.Tensor:
    gnorm = g.flatten(1).norm(dim=1).view(-1, *([1] * (g.dim() - 1)))
    direction = torch.where(gnorm > 0, g / gnorm.clamp_min(1e-30), torch.zeros_like(g))
    delta = x + budget.step * direction - x0
    delta = lowfreq_filter(delta, budget.freq_cutoff)
    delta = _project_batch(delta, budget.epsilon)
    return (x0 + delta).clamp(0.0, 1.0)


def _init_point(x0: torch.Tensor, budget: AttackBudget, gen: torch.Generator) -> torch.Tensor:
    radius = budget.init_fraction * budget.epsilon
    if radius == 0:
        return x0.clone()
    delta = _random_directions(x0.shape, gen, radius)
    delta = _project_batch(lowfreq_filter(delta, budget.freq_cutoff), budget.epsilon)
    return (x0 + delta).clamp(0.0, 1.0)


def _zo_gradient(oracle: SemanticOracle, x: torch.Tensor, ref: torch.Tensor, n_pairs: int, sigma: float,
                 gen: torch.Generator, metric: str) -> tuple[torch.Tensor, torch.Tensor]:
    """Antithetic Gaussian estimate of the distance gradient at each row of ``x``.

    Returns ``(gradient, distance_estimate)``; the estimate is the mean of
    the paired probe distances, accurate to O(sigma**2).
    """
    n = x.shape[0]
    u = torch.randn((n, n_pairs) + tuple(x.shape[1:]), generator=gen)
    probes = torch.cat([x[:, None] + sigma * u, x[:, None] - sigma * u], dim=1)
    sem = torch.as_tensor(oracle.query(probes.flatten(0, 1).numpy())).view(n, 2 * n_pairs, -1)
    d = semantic_distance(sem.double(), ref[:, None].double().expand_as(sem), metric)
    diff = (d[:, :n_pairs] - d[:, n_pairs:]).to(x.dtype)
    g = (diff.view(n, n_pairs, *([1] * (x.dim() - 1))) * u).sum(1) / (2 * sigma * n_pairs)
    return g, d.mean(1)


def estimate_gradient_zo(oracle: SemanticOracle, x_adv, reference_semantics, budget: AttackBudget,
                         generator: torch.Generator | None = None) -> np.ndarray:
    """Zeroth-order gradient of the semantic distance at ``x_adv`` (single image or batch).

    Uses ``budget.queries_per_iteration`` oracle queries per image.
    """
    x = torch.as_tensor(np.asarray(x_adv, dtype=np.float32))
    single = x.dim() == 3
    if single:
        x = x[None]
    ref = torch.as_tensor(np.asarray(reference_semantics, dtype=np.float32)).reshape(len(x), -1)
    gen = generator or torch.Generator().manual_seed(budget.seed)
    g, _ = _zo_gradient(oracle, x, ref, budget.queries_per_iteration // 2, budget.smoothing_sigma, gen,
                        budget.metric)
    g = g.numpy()
    return g[0] if single else g


# --------------------------------------------------------------------------- attacks


def sna_attack(oracle: SemanticOracle, originals, budget: AttackBudget, labels=None,
               callback: Callable[[int, torch.Tensor, torch.Tensor], None] | None = None) -> AdversarialBatch:
    """Query-only semantic noise attack.

    Caches the benign semantics, then for ``max_iterations`` rounds estimates
    the distance gradient from antithetic probes, takes a normalised ascent
    step, optionally low-pass filters the perturbation, projects to the
    epsilon ball and clips to [0, 1].  The best iterate (by the probe-based
    distance estimate) is returned.  If the oracle's query budget runs out,
    the best-so-far batch is returned with ``truncated=True``.
    """
    X0 = check_images(originals)
    if budget.epsilon == 0:
        return _identity_batch(X0, "sna", budget, labels)
    start = oracle.query_counter
    gen = torch.Generator().manual_seed(budget.seed)
    x0 = torch.from_numpy(X0.copy())
    n = len(x0)
    best_x = x0.clone()
    best_d = torch.zeros(n, dtype=torch.float64)
    truncated = False
    try:
        ref = torch.as_tensor(oracle.query(X0))
        x = _init_point(x0, budget, gen)
        for it in range(budget.max_iterations):
            g, d_hat = _zo_gradient(oracle, x, ref, budget.queries_per_iteration // 2,
                                    budget.smoothing_sigma, gen, budget.metric)
            improved = d_hat > best_d
            best_x[improved] = x[improved]
            best_d = torch.where(improved, d_hat, best_d)
            x = _step(x, x0, g, budget)
            if callback is not None:
                callback(it, x, best_d)
    except QueryBudgetExceeded:
        truncated = True
    except Exception as exc:
        raise AttackError(f"oracle failure: {exc}", oracle.query_counter - start) from exc
    perturbed = best_x.numpy()
    norms = np.linalg.norm((perturbed - X0).reshape(n, -1).astype(np.float64), axis=1)
    return AdversarialBatch(X0, perturbed, norms, oracle.query_counter - start, best_d.numpy(), "sna",
                            budget.epsilon, truncated, labels, _budget_dict(budget))


def pgd_whitebox_attack(model, originals, budget: AttackBudget, labels=None,
                        callback: Callable[[int, torch.Tensor, torch.Tensor], None] | None = None) -> AdversarialBatch:
    """Same update rule as :func:`sna_attack` with exact encoder gradients."""
    net = _as_module(model)
    X0 = check_images(originals, shape=net.config.image_shape)
    x0 = torch.from_numpy(X0.copy())
    n = len(x0)
    if budget.max_iterations == 0 or budget.epsilon == 0:
        return _identity_batch(X0, "pgd", budget, labels)
    was_training = net.training
    net.eval()
    gen = torch.Generator().manual_seed(budget.seed)
    with torch.no_grad():
        ref = net.encode(x0)
    best_x, best_d = x0.clone(), torch.zeros(n, dtype=torch.float64)
    x = _init_point(x0, budget, gen)
    for it in range(budget.max_iterations + 1):
        x.requires_grad_(True)
        d = semantic_distance(net.encode(x), ref, budget.metric)
        (g,) = torch.autograd.grad(d.sum(), x)
        x = x.detach()
        if not torch.isfinite(g).all():
            net.train(was_training)
            raise AttackError(f"non-finite gradient at iteration {it}")
        d = d.detach().double()
        improved = d > best_d
        best_x[improved] = x[improved]
        best_d = torch.where(improved, d, best_d)
        if it == budget.max_iterations:
            break
        x = _step(x, x0, g, budget)
        if callback is not None:
            callback(it, x, best_d)
    net.train(was_training)
    perturbed = best_x.numpy()
    norms = np.linalg.norm((perturbed - X0).reshape(n, -1).astype(np.float64), axis=1)
    return AdversarialBatch(X0, perturbed, norms, 0, best_d.numpy(), "pgd", budget.epsilon, False, labels,
                            _budget_dict(budget))


def random_attack(originals, epsilon: float, seed: int = 0, labels=None) -> AdversarialBatch:
    """Gaussian noise rescaled to L2 norm exactly ``epsilon`` per sample, then clipped."""
    X0 = check_images(originals)
    n = len(X0)
    if epsilon < 0:
        raise ContractError("epsilon must be >= 0")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(X0.shape)
    norms = np.linalg.norm(noise.reshape(n, -1), axis=1)
    noise *= (epsilon / np.maximum(norms, 1e-12)).reshape(-1, 1, 1, 1)
    perturbed = np.clip(X0 + noise, 0.0, 1.0).astype(np.float32)
    if epsilon == 0:
        perturbed = X0.copy()
    pre_clip = np.linalg.norm(noise.reshape(n, -1), axis=1)
    out_norms = np.linalg.norm((perturbed - X0).reshape(n, -1).astype(np.float64), axis=1)
    return AdversarialBatch(X0, perturbed, out_norms, 0, np.zeros(n), "random", float(epsilon), False, labels,
                            {"epsilon": float(epsilon), "seed": seed}, pre_clip_norms=pre_clip)


def _identity_batch(X0, attack, budget, labels) -> AdversarialBatch:
    n = len(X0)
    return AdversarialBatch(X0, X0.copy(), np.zeros(n), 0, np.zeros(n), attack, budget.epsilon, False, labels,
                            _budget_dict(budget))


def _budget_dict(budget: AttackBudget) -> dict:
    d = asdict(budget)
    d["step_size"] = budget.step
    return d
