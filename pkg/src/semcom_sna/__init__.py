"""Task-oriented semantic communication under semantic noise attacks.

Build a SemCom pipeline over a simulated AWGN channel, attack its semantic
encoder with the query-only semantic noise attack (SNA), harden it with
semantic distance minimisation (SDM) training, and sweep natural/robust
accuracy over SNR.
"""

__version__ = "0.1.0"

from .attack import (
    AdversarialBatch,
    AttackBudget,
    SemanticOracle,
    estimate_gradient_zo,
    lowfreq_filter,
    pgd_whitebox_attack,
    project_l2_ball,
    random_attack,
    semantic_distance,
    sna_attack,
)
from .datasets import DatasetSplit, SyntheticSpec, load_ccpd, load_gtsrb, make_synthetic, split_dataset
from .defense import SDMConfig, sdm_inner_maximize, sdm_loss, train_random_defense, train_sdm
from .estimators import (
    PGDAttack,
    RandomNoiseAttack,
    SemanticNoiseAttack,
    SemComClassifier,
    SemComPlateRecognizer,
)
from .semcom import (
    ChannelConfig,
    ModelCheckpoint,
    PipelineConfig,
    awgn_channel,
    classify_accuracy,
    plate_accuracy,
    plate_greedy_decode,
    power_normalize,
    semcom_forward,
    train_natural,
)

__all__ = [
    "AdversarialBatch", "AttackBudget", "ChannelConfig", "DatasetSplit", "ModelCheckpoint", "PGDAttack",
    "PipelineConfig", "RandomNoiseAttack", "SDMConfig", "SemComClassifier", "SemComPlateRecognizer",
    "SemanticNoiseAttack", "SemanticOracle", "SyntheticSpec", "awgn_channel", "classify_accuracy",
    "estimate_gradient_zo", "load_ccpd", "load_gtsrb", "lowfreq_filter", "make_synthetic", "pgd_whitebox_attack",
    "plate_accuracy", "plate_greedy_decode", "power_normalize", "project_l2_ball", "random_attack",
    "sdm_inner_maximize", "sdm_loss", "semantic_distance", "semcom_forward", "sna_attack", "split_dataset",
    "train_natural", "train_random_defense", "train_sdm",
]
