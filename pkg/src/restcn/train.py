"""Training loop: SGD with Nesterov momentum, L1 on convolution weights,
plateau-triggered learning-rate decay, per-epoch metrics and checkpoints.

The schedule watches the *test* loss, as stated in the training recipe this
reproduces. That leaks test information into the schedule; it is kept for
fidelity and should not be mistaken for sound methodology on real data.

Epoch indices are 0-based. With constant test loss and patience 10 the lr
drops by 10x at epochs 11, 22, 33, ... ("plateaus for more than 10 epochs").

`metrics.csv` byte-determinism: two runs with identical seed, config and
data must produce identical files, so the wall-time column is written as
0.0 unless `TrainConfig.timing` is set.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import SkeletonSequence, sequence_features
from .errors import ConfigError, DimensionError
from .model import ModelGradients, ResTcnModel, backward, forward, save_checkpoint
from .ops import TemporalMap, softmax_cross_entropy

METRICS_HEADER = "epoch,train_loss,train_acc,test_loss,test_acc,lr,seconds"


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    l1_weight: float = 1e-4
    batch_size: int = 128
    plateau_patience: int = 10
    lr_decay_factor: float = 10.0
    improvement_tol: float = 1e-4
    max_epochs: int = 300
    seed: int = 0
    timing: bool = False

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ConfigError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.plateau_patience < 1:
            raise ConfigError(f"plateau_patience must be >= 1, got {self.plateau_patience}")
        if self.lr_decay_factor <= 1.0:
            raise ConfigError(f"lr_decay_factor must be > 1, got {self.lr_decay_factor}")


@dataclass
class OptimizerState:
    velocities: list[np.ndarray]
    current_lr: float
    epochs_since_improvement: int = 0
    best_test_loss: float = float("inf")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    lr: float
    seconds: float

    def csv_row(self) -> str:
        return (f"{self.epoch},{self.train_loss!r},{self.train_acc!r},"
                f"{self.test_loss!r},{self.test_acc!r},{self.lr!r},{self.seconds!r}")


def l1_subgradient(weights: np.ndarray, weight: float) -> np.ndarray:
    """lambda * sign(w) with sign(0) = 0."""
    return weight * np.sign(weights)


def nesterov_step(params: list[np.ndarray], velocities: list[np.ndarray],
                  grads: list[np.ndarray], lr: float, momentum: float) -> None:
    """In-place lookahead update: v <- mu*v - lr*g; p <- p + mu*v - lr*g."""
    if not (len(params) == len(velocities) == len(grads)):
        raise DimensionError("params, velocities and grads must align")
    for p, v, g in zip(params, velocities, grads):
        if p.shape != v.shape or p.shape != g.shape:
            raise DimensionError(f"shape mismatch in update: {p.shape} vs {v.shape} vs {g.shape}")
        v *= momentum
        v -= lr * g
        p += momentum * v
        p -= lr * g


def plateau_schedule(state: OptimizerState, epoch_test_loss: float,
                     patience: int = 10, tol: float = 1e-4,
                     factor: float = 10.0) -> OptimizerState:
    """Divide the lr by `factor` after more than `patience` consecutive
    epochs without the best test loss improving by > `tol`."""
    if epoch_test_loss < state.best_test_loss - tol:
        state.best_test_loss = epoch_test_loss
        state.epochs_since_improvement = 0
    else:
        state.epochs_since_improvement += 1
        if state.epochs_since_improvement > patience:
            state.current_lr /= factor
            state.epochs_since_improvement = 0
    return state


@dataclass
class EvalResult:
    accuracy: float
    mean_loss: float
    confusion: np.ndarray  # (K, K), rows = true class, cols = predicted


def _sample_loss(model: ResTcnModel, features: TemporalMap, label: int) -> tuple[float, int]:
    cache = forward(model, features, mode="infer")
    loss, _ = softmax_cross_entropy(cache.logits, label)
    return loss, int(np.argmax(cache.logits))


def evaluate(model: ResTcnModel, samples: list, features: list[TemporalMap] | None = None) -> EvalResult:
    """Top-1 accuracy, mean cross-entropy and the confusion matrix; no dropout."""
    if not samples:
        raise ConfigError("cannot evaluate on an empty sample list")
    if features is None:
        features = [sequence_features(s) for s in samples]
    k = model.config.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    total_loss = 0.0
    for seq, feat in zip(samples, features):
        loss, pred = _sample_loss(model, feat, seq.label)
        total_loss += loss
        confusion[seq.label, pred] += 1
    correct = int(np.trace(confusion))
    return EvalResult(correct / len(samples), total_loss / len(samples), confusion)


def _worker_count() -> int:
    try:
        n = int(os.environ.get("RESTCN_THREADS", "1"))
    except ValueError:
        n = 1
    return max(1, n)


def _sample_seed(base_seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, epoch, index]).generate_state(1, np.uint64)[0])


def train(model: ResTcnModel, train_set: list[SkeletonSequence],
          test_set: list[SkeletonSequence], config: TrainConfig,
          run_dir=None) -> tuple[ResTcnModel, list[EpochMetrics]]:
    """Optimize `model` in place; returns it with the per-epoch metrics.

    Per epoch: seeded shuffle, mini-batches of `batch_size` (last partial
    batch kept), mean gradient over the batch plus the L1 subgradient on
    convolution weights, Nesterov step, test evaluation, plateau schedule.
    When `run_dir` is given, appends metrics.csv rows and writes
    best.rtcn (lowest test loss) and last.rtcn checkpoints.
    """
    if not train_set or not test_set:
        raise ConfigError("train and test splits must both be nonempty")

    params = model.parameters()
    arrays = [p.array for p in params]
    conv_weight = [p.kind == "conv_weight" for p in params]
    state = OptimizerState([np.zeros_like(a) for a in arrays], config.lr0)

    train_features = [sequence_features(s) for s in train_set]
    test_features = [sequence_features(s) for s in test_set]
    labels = [s.label for s in train_set]

    metrics_path = checkpoint_best = checkpoint_last = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = run_dir / "metrics.csv"
        metrics_path.write_text(METRICS_HEADER + "\n", "utf-8")
        checkpoint_best = run_dir / "best.rtcn"
        checkpoint_last = run_dir / "last.rtcn"

    workers = _worker_count()
    history: list[EpochMetrics] = []
    best_test_loss = float("inf")

    def sample_grad(args) -> tuple[ModelGradients, int]:
        feat, label, seed = args
        cache = forward(model, feat, mode="train", seed=seed)
        grads = backward(model, cache, label)
        return grads, int(np.argmax(cache.logits))

    for epoch in range(config.max_epochs):
        tic = time.perf_counter()
        order = np.random.default_rng(
            np.random.SeedSequence([config.seed, epoch])).permutation(len(train_set))
        epoch_loss = 0.0
        epoch_correct = 0
        lr_used = state.current_lr

        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            jobs = [
                (train_features[i], labels[i], _sample_seed(config.seed, epoch, int(i)))
                for i in batch
            ]
            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    results = list(pool.map(sample_grad, jobs))
            else:
                results = [sample_grad(j) for j in jobs]

            batch_grads = [np.zeros_like(a) for a in arrays]
            for (grads, pred), i in zip(results, batch):  # fixed reduction order
                for acc, g in zip(batch_grads, grads.arrays):
                    acc += g
                epoch_loss += grads.loss
                if pred == labels[i]:
                    epoch_correct += 1
            n = len(batch)
            for acc in batch_grads:
                acc /= n
            if config.l1_weight > 0.0:
                for acc, arr, is_conv in zip(batch_grads, arrays, conv_weight):
                    if is_conv:
                        acc += l1_subgradient(arr, config.l1_weight)
            nesterov_step(arrays, state.velocities, batch_grads, lr_used, config.momentum)

        test_result = evaluate(model, test_set, test_features)
        seconds = time.perf_counter() - tic if config.timing else 0.0
        row = EpochMetrics(
            epoch=epoch,
            train_loss=epoch_loss / len(train_set),
            train_acc=epoch_correct / len(train_set),
            test_loss=test_result.mean_loss,
            test_acc=test_result.accuracy,
            lr=lr_used,
            seconds=seconds,
        )
        history.append(row)
        if metrics_path is not None:
            with open(metrics_path, "a", encoding="utf-8") as fh:
                fh.write(row.csv_row() + "\n")
        if test_result.mean_loss < best_test_loss:
            best_test_loss = test_result.mean_loss
            if checkpoint_best is not None:
                save_checkpoint(model, checkpoint_best)
        if checkpoint_last is not None:
            save_checkpoint(model, checkpoint_last)
        plateau_schedule(state, test_result.mean_loss, config.plateau_patience,
                         config.improvement_tol, config.lr_decay_factor)

    if config.max_epochs == 0 and checkpoint_last is not None:
        save_checkpoint(model, checkpoint_last)
        save_checkpoint(model, checkpoint_best)
    return model, history
