"""Finite-difference verification of every hand-derived gradient.

The numeric side only ever calls forward passes, so it stays independent
of the backward code it checks. Relative error uses
|a - n| / max(|a|, |n|, 1e-6), the usual guard against near-zero entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    ModelConfig,
    LayerSpec,
    backward,
    build_model,
    forward,
)
from .ops import (
    ConvFilterBank,
    TemporalMap,
    conv1d_backward,
    conv1d_forward,
    global_average_pool,
    global_average_pool_backward,
    softmax_cross_entropy,
)

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float((np.abs(analytic - numeric) / denom).max())


def finite_difference(loss_fn, array: np.ndarray, step: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences of a scalar loss w.r.t. every entry of `array`.

    `loss_fn` takes no arguments and must read `array` afresh on each call;
    entries are perturbed in place and restored.
    """
    grad = np.empty_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = loss_fn()
        flat[i] = orig - step
        minus = loss_fn()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2.0 * step)
    return grad


@dataclass
class CheckResult:
    name: str
    max_rel_error: float

    def ok(self, tol: float = DEFAULT_TOL) -> bool:
        return self.max_rel_error < tol


def check_conv1d(seed: int, frames: int = 6, in_channels: int = 2, num_filters: int = 3,
                 filter_length: int = 3, stride: int = 1, step: float = DEFAULT_STEP) -> CheckResult:
    """Scalarize conv output against a fixed random matrix and compare all
    three gradients (weights, bias, input) with central differences."""
    rng = np.random.default_rng(seed)
    x = TemporalMap(rng.normal(size=(frames, in_channels)))
    bank = ConvFilterBank(
        rng.normal(size=(num_filters, filter_length, in_channels)),
        rng.normal(size=num_filters),
        stride,
    )
    probe_rows = -(-frames // stride)
    probe = rng.normal(size=(probe_rows, num_filters))

    def loss() -> float:
        return float((conv1d_forward(x, bank).data * probe).sum())

    out_mask = x.mask[::stride]
    upstream = TemporalMap(probe.copy(), out_mask.copy())
    grads = conv1d_backward(x, bank, upstream)
    worst = max(
        relative_error(grads.weights, finite_difference(loss, bank.weights, step)),
        relative_error(grads.bias, finite_difference(loss, bank.bias, step)),
        relative_error(grads.input.data, finite_difference(loss, x.data, step)),
    )
    return CheckResult(f"conv1d(stride={stride})", worst)


def check_softmax_cross_entropy(seed: int, num_classes: int = 5,
                                step: float = DEFAULT_STEP) -> CheckResult:
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=num_classes)
    label = int(rng.integers(num_classes))
    _, grad = softmax_cross_entropy(logits, label)

    def loss() -> float:
        return softmax_cross_entropy(logits, label)[0]

    return CheckResult("softmax_cross_entropy", relative_error(grad, finite_difference(loss, logits, step)))


def check_global_average_pool(seed: int, frames: int = 7, channels: int = 4,
                              step: float = DEFAULT_STEP) -> CheckResult:
    rng = np.random.default_rng(seed)
    mask = rng.random(frames) < 0.7
    mask[0] = True
    data = np.where(mask[:, None], rng.normal(size=(frames, channels)), 0.0)
    x = TemporalMap(data, mask)
    probe = rng.normal(size=channels)

    def loss() -> float:
        return float(global_average_pool(x) @ probe)

    analytic = global_average_pool_backward(x, probe).data
    numeric = finite_difference(loss, x.data, step)
    numeric[~mask] = 0.0  # masked frames are not inputs to the op
    return CheckResult("global_average_pool", relative_error(analytic, numeric))


def _tiny_config(capacity: bool) -> ModelConfig:
    if capacity:
        units = (LayerSpec(4, 3, 1), LayerSpec(6, 3, 2))
    else:
        units = (LayerSpec(4, 3, 1), LayerSpec(4, 3, 1))
    return ModelConfig(
        num_classes=3,
        input_dim=6,
        first_conv=LayerSpec(4, 3, 1),
        residual_units=units,
        dropout_rate=0.25,
        l1_weight=0.0,
    )


def check_model_end_to_end(seed: int, capacity: bool = False, frames: int = 9,
                           step: float = DEFAULT_STEP, perturb=None) -> list[CheckResult]:
    """Cross-entropy loss of a train-mode forward (fixed dropout seed) on a
    tiny model: every parameter array plus the input gradient is compared
    against central differences.

    `perturb` is a test hook: it receives the ModelGradients before the
    comparison and may corrupt them (negative control for the harness).
    """
    rng = np.random.default_rng(seed)
    config = _tiny_config(capacity)
    model = build_model(config, seed)
    for param in model.parameters():  # nonzero biases so their gradients are exercised
        if param.kind in ("bias", "head_bias"):
            param.array[...] = rng.normal(scale=0.1, size=param.array.shape)
    mask = np.ones(frames, dtype=bool)
    mask[-2:] = False
    data = np.where(mask[:, None], rng.normal(size=(frames, config.input_dim)), 0.0)
    x = TemporalMap(data, mask)
    label = int(rng.integers(config.num_classes))
    dropout_seed = seed + 1

    def loss() -> float:
        cache = forward(model, x, mode="train", seed=dropout_seed)
        return softmax_cross_entropy(cache.logits, label)[0]

    cache = forward(model, x, mode="train", seed=dropout_seed)
    grads = backward(model, cache, label)
    if perturb is not None:
        perturb(grads)

    tag = "capacity" if capacity else "interpretable"
    results = []
    for param, analytic in zip(model.parameters(), grads.arrays):
        numeric = finite_difference(loss, param.array, step)
        results.append(CheckResult(f"model[{tag}].{param.name}", relative_error(analytic, numeric)))
    numeric_in = finite_difference(loss, x.data, step)
    numeric_in[~mask] = 0.0
    results.append(CheckResult(f"model[{tag}].input", relative_error(grads.d_input.data, numeric_in)))
    return results


def run_all(seed: int = 0, step: float = DEFAULT_STEP, perturb=None) -> list[CheckResult]:
    """The full suite: standalone ops plus both tiny end-to-end models."""
    results = [
        check_conv1d(seed),
        check_conv1d(seed + 1, stride=2, frames=8),
        check_softmax_cross_entropy(seed + 2),
        check_global_average_pool(seed + 3),
    ]
    results.extend(check_model_end_to_end(seed + 4, capacity=False, perturb=perturb))
    results.extend(check_model_end_to_end(seed + 5, capacity=True, perturb=perturb))
    return results
