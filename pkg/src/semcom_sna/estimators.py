"""scikit-learn compatible wrappers around the SemCom pipeline and the attacks.

>>> clf = SemComClassifier(encoder_arch="small_cnn", epochs=20).fit(X, y)   # doctest: +SKIP
>>> X_adv = SemanticNoiseAttack(clf, epsilon=0.8).fit(X).transform(X)      # doctest: +SKIP
>>> clf.score(X_adv, y)                                                     # doctest: +SKIP
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ContractError, check_images, check_labels
from .attack import AttackBudget, SemanticOracle, pgd_whitebox_attack, random_attack, sna_attack
from .datasets import DatasetSplit
from .defense import SDMConfig, train_random_defense, train_sdm
from .semcom import (
    ChannelConfig,
    PipelineConfig,
    encode_semantics,
    plate_accuracy,
    plate_predict,
    semcom_forward,
    train_natural,
)

DEFENSES = ("natural", "sdm", "random_defense")


class _SemComBase(BaseEstimator):
    def _channel_config(self) -> ChannelConfig:
        return ChannelConfig(self.snr_db_min, self.snr_db_max)

    def _train(self, split: DatasetSplit, pipeline: PipelineConfig):
        if self.defense not in DEFENSES:
            raise ContractError(f"defense must be one of {DEFENSES}, got {self.defense!r}")
        channel = self._channel_config()
        if self.defense == "natural":
            return train_natural(split, pipeline, channel, self.epochs, seed=self.seed,
                                 batch_size=self.batch_size, lr=self.lr)
        inner_eps = self.inner_epsilon
        if inner_eps is None:
            norms = np.linalg.norm(split.X_train.reshape(len(split.X_train), -1), axis=1)
            inner_eps = float(0.05 * norms.mean())
        sdm = SDMConfig(lambda_=self.sdm_lambda, inner_iterations=self.inner_iterations,
                        inner_step_size=self.inner_step_size, inner_epsilon=inner_eps, epochs=self.epochs,
                        seed=self.seed, batch_size=self.batch_size, lr=self.lr)
        trainer = train_sdm if self.defense == "sdm" else train_random_defense
        return trainer(split, pipeline, channel, sdm)

    def _snr(self, snr_db):
        return self.eval_snr_db if snr_db == "default" else snr_db

    def transform(self, X):
        """Semantic vectors of ``X`` (noiseless encoder output)."""
        check_is_fitted(self, "checkpoint_")
        return encode_semantics(self.checkpoint_, X)

    def semantic_oracle(self, max_queries: int | None = None) -> SemanticOracle:
        check_is_fitted(self, "checkpoint_")
        return SemanticOracle.from_model(self.checkpoint_, max_queries=max_queries)


class SemComClassifier(ClassifierMixin, TransformerMixin, _SemComBase):
    """Traffic-sign style classification carried over a simulated AWGN link.

    ``predict`` and ``score`` transmit at ``eval_snr_db`` with channel noise
    drawn from ``eval_seed``; pass ``snr_db=None`` for a channel-bypass
    forward.  ``defense`` selects natural, SDM or random-noise training.
    """

    def __init__(self, encoder_arch="resnet", d_s=256, d_c=128, encoder_width=16, epochs=20, batch_size=64,
                 lr=1e-3, snr_db_min=5.0, snr_db_max=10.0, eval_snr_db=10.0, eval_seed=0, defense="natural",
                 sdm_lambda=1.0, inner_iterations=10, inner_step_size=None, inner_epsilon=None, seed=0):
        self.encoder_arch = encoder_arch
        self.d_s = d_s
        self.d_c = d_c
        self.encoder_width = encoder_width
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.snr_db_min = snr_db_min
        self.snr_db_max = snr_db_max
        self.eval_snr_db = eval_snr_db
        self.eval_seed = eval_seed
        self.defense = defense
        self.sdm_lambda = sdm_lambda
        self.inner_iterations = inner_iterations
        self.inner_step_size = inner_step_size
        self.inner_epsilon = inner_epsilon
        self.seed = seed

    def fit(self, X, y):
        X = check_images(X)
        self.classes_, y_enc = np.unique(np.asarray(y), return_inverse=True)
        if len(self.classes_) < 2:
            raise ContractError("need at least two classes")
        y_enc = check_labels(y_enc, len(X))
        pipeline = PipelineConfig(task="classification", d_s=self.d_s, d_c=self.d_c,
                                  encoder_arch=self.encoder_arch, seed=self.seed,
                                  num_classes=len(self.classes_), image_shape=X.shape[1:],
                                  encoder_width=self.encoder_width)
        empty = np.empty((0,) + X.shape[1:], np.float32)
        split = DatasetSplit(X, y_enc, empty, np.empty(0, np.int64), seed=self.seed,
                             num_classes=len(self.classes_))
        self.checkpoint_ = self._train(split, pipeline)
        self.history_ = list(self.checkpoint_.history)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X, snr_db="default"):
        check_is_fitted(self, "checkpoint_")
        return semcom_forward(X, self.checkpoint_, self._snr(snr_db), self.eval_seed)

    def predict_proba(self, X, snr_db="default"):
        scores = torch.from_numpy(self.decision_function(X, snr_db))
        return scores.softmax(1).numpy()

    def predict(self, X, snr_db="default"):
        scores = self.decision_function(X, snr_db)
        return self.classes_[scores.argmax(1)]

    def score(self, X, y, sample_weight=None, snr_db="default"):
        return float(np.average(self.predict(X, snr_db) == np.asarray(y), weights=sample_weight))


class SemComPlateRecognizer(_SemComBase):
    """Licence-plate recognition over the SemCom link, decoded greedily.

    ``y`` is a sequence of plate strings; every symbol must be in ``alphabet``
    (blank first).  ``score`` is exact-match accuracy.
    """

    def __init__(self, alphabet=None, plate_positions=18, d_c=128, encoder_width=32, epochs=30, batch_size=32,
                 lr=1e-3, snr_db_min=5.0, snr_db_max=10.0, eval_snr_db=10.0, eval_seed=0, defense="natural",
                 sdm_lambda=0.1, inner_iterations=10, inner_step_size=None, inner_epsilon=None, seed=0):
        self.alphabet = alphabet
        self.plate_positions = plate_positions
        self.d_c = d_c
        self.encoder_width = encoder_width
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.snr_db_min = snr_db_min
        self.snr_db_max = snr_db_max
        self.eval_snr_db = eval_snr_db
        self.eval_seed = eval_seed
        self.defense = defense
        self.sdm_lambda = sdm_lambda
        self.inner_iterations = inner_iterations
        self.inner_step_size = inner_step_size
        self.inner_epsilon = inner_epsilon
        self.seed = seed

    def fit(self, X, y):
        X = check_images(X)
        plates = [str(p) for p in y]
        if len(plates) != len(X):
            raise ContractError("X and y lengths differ")
        kw = {} if self.alphabet is None else {"alphabet": tuple(self.alphabet)}
        pipeline = PipelineConfig.for_plates(d_c=self.d_c, seed=self.seed, encoder_width=self.encoder_width,
                                             plate_positions=self.plate_positions, **kw)
        self.alphabet_ = pipeline.alphabet
        empty = np.empty((0,) + X.shape[1:], np.float32)
        split = DatasetSplit(X, tuple(plates), empty, (), seed=self.seed, task="plate_recognition")
        self.checkpoint_ = self._train(split, pipeline)
        self.history_ = list(self.checkpoint_.history)
        return self

    def decision_function(self, X, snr_db="default"):
        check_is_fitted(self, "checkpoint_")
        return semcom_forward(X, self.checkpoint_, self._snr(snr_db), self.eval_seed)

    def predict(self, X, snr_db="default"):
        check_is_fitted(self, "checkpoint_")
        return plate_predict(self.checkpoint_, X, self._snr(snr_db), self.eval_seed)

    def score(self, X, y, snr_db="default"):
        check_is_fitted(self, "checkpoint_")
        return plate_accuracy(self.checkpoint_, X, list(y), self._snr(snr_db), self.eval_seed)


# --------------------------------------------------------------------------- attacks


class _AttackBase(TransformerMixin, BaseEstimator):
    def fit(self, X=None, y=None):
        self.budget_ = self._budget()
        return self

    def transform(self, X, y=None):
        check_is_fitted(self, "budget_")
        self.attack_ = self._run(X, y)
        return self.attack_.perturbed


class SemanticNoiseAttack(_AttackBase):
    """Query-only semantic noise attack against ``model`` (a fitted estimator or checkpoint).

    ``fit`` wires the semantic oracle; ``transform`` returns perturbed images
    and stores the full :class:`AdversarialBatch` as ``attack_``.
    """

    def __init__(self, model=None, epsilon=3.6, max_iterations=50, step_size=None, queries_per_iteration=100,
                 smoothing_sigma=1e-2, freq_cutoff=None, metric="kl_softmax", seed=0, max_queries=None):
        self.model = model
        self.epsilon = epsilon
        self.max_iterations = max_iterations
        self.step_size = step_size
        self.queries_per_iteration = queries_per_iteration
        self.smoothing_sigma = smoothing_sigma
        self.freq_cutoff = freq_cutoff
        self.metric = metric
        self.seed = seed
        self.max_queries = max_queries

    def _budget(self):
        return AttackBudget(epsilon=self.epsilon, max_iterations=self.max_iterations, step_size=self.step_size,
                            queries_per_iteration=self.queries_per_iteration,
                            smoothing_sigma=self.smoothing_sigma, freq_cutoff=self.freq_cutoff,
                            seed=self.seed, metric=self.metric)

    def fit(self, X=None, y=None):
        if self.model is None:
            raise ContractError("SemanticNoiseAttack needs a target model")
        super().fit(X, y)
        self.oracle_ = SemanticOracle.from_model(self.model, max_queries=self.max_queries)
        return self

    def _run(self, X, y):
        return sna_attack(self.oracle_, X, self.budget_, labels=y)


class PGDAttack(SemanticNoiseAttack):
    """White-box counterpart of :class:`SemanticNoiseAttack` using exact encoder gradients."""

    def fit(self, X=None, y=None):
        if self.model is None:
            raise ContractError("PGDAttack needs a target model")
        self.budget_ = self._budget()
        return self

    def _run(self, X, y):
        return pgd_whitebox_attack(self.model, X, self.budget_, labels=y)


class RandomNoiseAttack(_AttackBase):
    def __init__(self, epsilon=3.6, seed=0):
        self.epsilon = epsilon
        self.seed = seed

    def _budget(self):
        return {"epsilon": self.epsilon, "seed": self.seed}

    def _run(self, X, y):
        return random_attack(X, self.epsilon, self.seed, labels=y)
