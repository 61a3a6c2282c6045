"""Online test-time adaptation of batch-normalised classifiers with low-saturation losses."""
from .adaptation import AdaptationEngine, EpisodeResult, TTAConfig, run_episode, sgd_momentum_step
from .benchgen import (
    ACCEPTANCE_SEEDS,
    ACCEPTANCE_TASK,
    LabeledSet,
    SyntheticTaskSpec,
    TargetStream,
    TrainConfig,
    dump_feature_csv,
    gen_task,
    load_feature_csv,
    train_source,
)
from .estimator import LSCDClassifier
from .losses import LossEval, LossWeights, baseline_loss, bcse_loss, lscd_loss, lsd_loss, wcse_loss, weak_density
from .network import Architecture, Network, backward, forward, init_network, load_network, save_network
from .prob import argmax_tiebreak, clamp_simplex, softmax

__version__ = "0.1.0"
