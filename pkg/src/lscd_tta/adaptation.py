"""Online test-time adaptation of BN affine parameters.

For every incoming batch the engine predicts with the current parameters,
then takes SGD-momentum steps on the BN scale/shift so that only later
batches see the update.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import losses
from .losses import LossEval, LossWeights
from .network import BATCH_STATS, RUNNING_STATS, Network, backward, forward, resolve_mask
from .prob import DEFAULT_FLOOR, clamp_simplex, softmax

# which composite terms are active for each ablation-style loss name
COMPOSITE_TERMS = {
    "lscd": (True, True, True),
    "wcse_only": (True, False, False),
    "bcse_only": (False, True, False),
    "lsd_only": (False, False, True),
    "wcse+bcse": (True, True, False),
    "wcse+lsd": (True, False, True),
    "bcse+lsd": (False, True, True),
}
LOSS_KINDS = (*COMPOSITE_TERMS, *losses.BASELINE_KINDS, "none")


@dataclass(frozen=True)
class TTAConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 32
    loss: str = "lscd"
    weights: LossWeights = field(default_factory=LossWeights)
    detach_pseudo_labels: bool = False
    steps_per_batch: int = 1
    prob_floor: float = DEFAULT_FLOOR

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum!r}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be at least 2, got {self.batch_size!r}")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {LOSS_KINDS}")
        if self.steps_per_batch < 1:
            raise ValueError("steps_per_batch must be at least 1")

    def effective_weights(self) -> LossWeights:
        """Composite weights with the terms this loss leaves out set to zero."""
        w = self.weights
        use_wc, use_bc, use_lsd = COMPOSITE_TERMS[self.loss]
        return replace(
            w,
            alpha=w.alpha if use_wc else 0.0,
            beta=w.beta if use_bc else 0.0,
            tau=w.tau if use_lsd else 0.0,
        )


def batch_loss(logits: np.ndarray, config: TTAConfig) -> LossEval:
    """Mean loss over the batch and its gradient w.r.t. every logit."""
    n = len(logits)
    if config.loss in COMPOSITE_TERMS:
        ev = losses.lscd_loss(
            logits,
            config.effective_weights(),
            floor=config.prob_floor,
            detach_pseudo_labels=config.detach_pseudo_labels,
        )
    else:
        y = clamp_simplex(softmax(logits), config.prob_floor)
        ev = losses.baseline_loss(config.loss, y)
    return LossEval(float(np.mean(ev.value)), ev.grad_logits / n)


class OptimizerState:
    """Velocity buffers for SGD with momentum, created lazily per parameter."""

    def __init__(self):
        self.velocity: dict[str, np.ndarray] = {}

    def __repr__(self):
        return f"OptimizerState({sorted(self.velocity)})"


def sgd_momentum_step(state: OptimizerState, grads: dict, params: dict, lr: float, momentum: float):
    """In-place update ``v <- momentum*v + g``; ``theta <- theta - lr*v``."""
    for name, g in grads.items():
        theta = params[name]
        if np.shape(g) != theta.shape:
            raise ValueError(f"gradient for {name} has shape {np.shape(g)}, parameter {theta.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(theta)
        elif v.shape != theta.shape:
            raise ValueError(f"velocity for {name} has shape {v.shape}, parameter {theta.shape}")
        v = momentum * v + g
        state.velocity[name] = v
        theta -= lr * v
    return params


class AdaptationEngine:
    """Holds a private copy of the source network plus optimiser state."""

    def __init__(self, source_net: Network, config: TTAConfig = TTAConfig()):
        self.net = source_net.copy()
        self.config = config
        self.state = OptimizerState()
        self.mask = resolve_mask(self.net, "bn_affine")

    def adapt_batch(self, X) -> tuple[np.ndarray, float]:
        """Predict on ``X`` with the current parameters, then update them.

        Returns the predictions made *before* the update and the loss value
        of that same forward pass. With ``loss="none"`` the source model is
        used as is (stored running statistics, no update).
        """
        cfg = self.config
        if cfg.loss == "none":
            logits, _ = forward(self.net, X, RUNNING_STATS)
            return np.argmax(logits, axis=1), 0.0

        logits, trace = forward(self.net, X, BATCH_STATS)
        preds = np.argmax(logits, axis=1)
        first_value = None
        for step in range(cfg.steps_per_batch):
            if step:
                logits, trace = forward(self.net, X, BATCH_STATS)
            ev = batch_loss(logits, cfg)
            if first_value is None:
                first_value = ev.value
            grads = backward(self.net, trace, ev.grad_logits, self.mask)
            sgd_momentum_step(self.state, grads, self.net.params, cfg.learning_rate, cfg.momentum)
        return preds, first_value


@dataclass
class BatchRecord:
    index: int
    accuracy: float
    loss: float
    class_correct: np.ndarray
    class_total: np.ndarray

    @property
    def correct(self) -> int:
        return int(self.class_correct.sum())


@dataclass
class EpisodeResult:
    records: list[BatchRecord]
    predictions: np.ndarray
    seen: int
    correct: int
    dropped: int
    seconds: float

    @property
    def accuracy(self) -> float:
        return self.correct / self.seen if self.seen else float("nan")

    @property
    def ms_per_item(self) -> float:
        return 1000.0 * self.seconds / self.seen if self.seen else float("nan")

    @property
    def class_accuracy(self) -> np.ndarray:
        correct = sum(r.class_correct for r in self.records)
        total = sum(r.class_total for r in self.records)
        with np.errstate(invalid="ignore", divide="ignore"):
            return correct / total


def run_episode(source_net: Network, stream, config: TTAConfig = TTAConfig()) -> EpisodeResult:
    """Adapt a fresh copy of ``source_net`` over ``stream`` and score online.

    ``stream`` yields feature batches through ``stream.batches(batch_size)``;
    its labels are only joined with predictions after each batch has been
    processed.
    """
    if stream.feature_dim != source_net.arch.input_dim:
        raise ValueError(
            f"stream has {stream.feature_dim} features but the network expects "
            f"{source_net.arch.input_dim}"
        )
    engine = AdaptationEngine(source_net, config)
    C = source_net.arch.num_classes
    records, all_preds = [], []
    dropped = 0
    elapsed = 0.0
    for i, X in enumerate(stream.batches(config.batch_size)):
        if len(X) < 2:
            dropped += len(X)
            continue
        t0 = time.perf_counter()
        preds, value = engine.adapt_batch(X)
        elapsed += time.perf_counter() - t0
        labels = stream.batch_labels(i, config.batch_size)
        hit = preds == labels
        records.append(
            BatchRecord(
                index=i,
                accuracy=float(hit.mean()),
                loss=value,
                class_correct=np.bincount(labels[hit], minlength=C),
                class_total=np.bincount(labels, minlength=C),
            )
        )
        all_preds.append(preds)
    seen = sum(int(r.class_total.sum()) for r in records)
    correct = sum(r.correct for r in records)
    preds = np.concatenate(all_preds) if all_preds else np.zeros(0, dtype=int)
    return EpisodeResult(records, preds, seen, correct, dropped, elapsed)
