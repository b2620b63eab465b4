"""Low-level differentiable operations on temporal feature maps.

All math runs in float64. Operations are pure: inputs are never mutated,
randomness enters only as an explicit seed, and masked frames are treated
as zeros everywhere so that batch padding cannot leak into valid frames.
Gradients are hand-derived per op; `conv1d_backward` is checked against
central finite differences in the test suite.

Convolution uses zero-padded "same" output with a centered window
(floor(f/2) taps to the left), which keeps frame t of every layer aligned
with frame t of the input. That alignment is what makes deep activation
timelines readable against the raw sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError

__all__ = [
    "TemporalMap",
    "ConvFilterBank",
    "ConvGradients",
    "conv1d_forward",
    "conv1d_backward",
    "relu",
    "relu_backward",
    "merge_add",
    "global_average_pool",
    "global_average_pool_backward",
    "softmax_cross_entropy",
    "softmax",
    "dropout",
    "dropout_backward",
]


@dataclass
class TemporalMap:
    """A (frames x channels) real-valued map plus a frame-validity mask.

    `mask[t]` is True for frames that carry real data; padding frames are
    False and by convention hold zeros. Ops re-establish that convention
    on their outputs.
    """

    data: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise DimensionError(f"temporal map must be 2-D (T, C), got shape {self.data.shape}")
        t, c = self.data.shape
        if t < 1 or c < 1:
            raise DimensionError(f"temporal map needs T >= 1 and C >= 1, got ({t}, {c})")
        if self.mask is None:
            self.mask = np.ones(t, dtype=bool)
        else:
            self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != (t,):
            raise DimensionError(f"mask shape {self.mask.shape} does not match T={t}")
        if not self.mask.any():
            raise DomainError("temporal map must have at least one valid frame")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def num_channels(self) -> int:
        return self.data.shape[1]

    @property
    def num_valid(self) -> int:
        return int(self.mask.sum())

    def copy(self) -> "TemporalMap":
        return TemporalMap(self.data.copy(), self.mask.copy())


@dataclass
class ConvFilterBank:
    """A bank of 1-D temporal filters: weights (n_filters, filter_len, in_channels)."""

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 3:
            raise DimensionError(f"filter weights must be 3-D, got shape {self.weights.shape}")
        n, f, c = self.weights.shape
        if n < 1 or f < 1 or c < 1:
            raise DimensionError(f"filter bank needs positive dims, got {self.weights.shape}")
        if self.bias.shape != (n,):
            raise DimensionError(f"bias shape {self.bias.shape} does not match {n} filters")
        if self.stride < 1:
            raise DomainError(f"stride must be >= 1, got {self.stride}")

    @property
    def num_filters(self) -> int:
        return self.weights.shape[0]

    @property
    def filter_length(self) -> int:
        return self.weights.shape[1]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[2]


@dataclass
class ConvGradients:
    """Gradients of a convolution: per-parameter arrays plus the input gradient."""

    weights: np.ndarray
    bias: np.ndarray
    input: TemporalMap


def _output_length(t: int, stride: int) -> int:
    return -(-t // stride)


def _padded_input(inp: TemporalMap, filter_len: int, stride: int):
    """Mask-zeroed input embedded in a zero pad so every window index is in range."""
    t, c = inp.data.shape
    t_out = _output_length(t, stride)
    left = filter_len // 2
    pad_right = max(0, (t_out - 1) * stride + (filter_len - 1) - left - (t - 1))
    padded = np.zeros((left + t + pad_right, c))
    padded[left:left + t] = np.where(inp.mask[:, None], inp.data, 0.0)
    return padded, t_out, left


def conv1d_forward(inp: TemporalMap, filters: ConvFilterBank) -> TemporalMap:
    """Same-padded temporal convolution.

    out[t, k] = bias[k] + sum_{tau, c} w[k, tau, c] * x[t*stride + tau - floor(f/2), c]
    with x read as zero outside valid frames. The output mask is the input
    mask downsampled by the stride, and masked output frames are zeroed.
    """
    if filters.in_channels != inp.num_channels:
        raise DimensionError(
            f"filter bank expects {filters.in_channels} channels, input has {inp.num_channels}"
        )
    stride = filters.stride
    padded, t_out, _ = _padded_input(inp, filters.filter_length, stride)
    out = np.tile(filters.bias, (t_out, 1))
    stop = (t_out - 1) * stride + 1
    for tau in range(filters.filter_length):
        seg = padded[tau:tau + stop:stride]
        out += seg @ filters.weights[:, tau, :].T
    out_mask = inp.mask[::stride].copy()
    if not out_mask.any():
        raise DomainError("stride left no valid output frame; pad sequences at the end")
    out[~out_mask] = 0.0
    return TemporalMap(out, out_mask)


def conv1d_backward(inp: TemporalMap, filters: ConvFilterBank, upstream: TemporalMap) -> ConvGradients:
    """Gradients of `conv1d_forward` w.r.t. weights, bias and input.

    `upstream` must have the forward output's shape and mask; its masked
    frames are ignored (the forward output is zero there by contract).
    """
    stride = filters.stride
    padded, t_out, left = _padded_input(inp, filters.filter_length, stride)
    out_mask = inp.mask[::stride]
    if upstream.data.shape != (t_out, filters.num_filters):
        raise DimensionError(
            f"upstream shape {upstream.data.shape} does not match output shape "
            f"({t_out}, {filters.num_filters})"
        )
    if not np.array_equal(upstream.mask, out_mask):
        raise DimensionError("upstream mask does not match the convolution output mask")

    up = np.where(upstream.mask[:, None], upstream.data, 0.0)
    d_weights = np.empty_like(filters.weights)
    d_padded = np.zeros_like(padded)
    stop = (t_out - 1) * stride + 1
    for tau in range(filters.filter_length):
        seg = padded[tau:tau + stop:stride]
        d_weights[:, tau, :] = up.T @ seg
        d_padded[tau:tau + stop:stride] += up @ filters.weights[:, tau, :]
    d_bias = up.sum(axis=0)
    d_input = d_padded[left:left + inp.num_frames]
    d_input[~inp.mask] = 0.0
    return ConvGradients(d_weights, d_bias, TemporalMap(d_input, inp.mask.copy()))


def relu(inp: TemporalMap) -> TemporalMap:
    """Elementwise max(0, x); mask unchanged."""
    return TemporalMap(np.maximum(inp.data, 0.0), inp.mask.copy())


def relu_backward(inp: TemporalMap, upstream: np.ndarray) -> np.ndarray:
    """Gradient through relu evaluated at `inp` (derivative 0 at the kink)."""
    return upstream * (inp.data > 0.0)


def merge_add(a: TemporalMap, b: TemporalMap) -> TemporalMap:
    """Elementwise sum of two maps with identical shapes and masks."""
    if a.data.shape != b.data.shape:
        raise DimensionError(f"cannot merge shapes {a.data.shape} and {b.data.shape}")
    if not np.array_equal(a.mask, b.mask):
        raise DimensionError("cannot merge maps with different frame masks")
    return TemporalMap(a.data + b.data, a.mask.copy())


def global_average_pool(inp: TemporalMap) -> np.ndarray:
    """Per-channel mean over valid frames only."""
    n = inp.num_valid
    if n == 0:
        raise DomainError("cannot pool a map with zero valid frames")
    return inp.data[inp.mask].sum(axis=0) / n


def global_average_pool_backward(inp: TemporalMap, d_pooled: np.ndarray) -> TemporalMap:
    """Spread the pooled gradient uniformly over valid frames."""
    n = inp.num_valid
    grad = np.zeros_like(inp.data)
    grad[inp.mask] = d_pooled / n
    return TemporalMap(grad, inp.mask.copy())


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted stable softmax."""
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def softmax_cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Loss -log softmax(logits)[label] and its gradient softmax - onehot."""
    logits = np.asarray(logits, dtype=np.float64)
    k = logits.shape[0]
    if k < 2:
        raise DomainError(f"need at least 2 classes, got {k}")
    if not 0 <= label < k:
        raise DomainError(f"label {label} out of range [0, {k})")
    z = logits - logits.max()
    log_norm = np.log(np.exp(z).sum())
    loss = float(log_norm - z[label])
    grad = np.exp(z - log_norm)
    grad[label] -= 1.0
    return loss, grad


def dropout(
    inp: TemporalMap, rate: float, rng_seed, training: bool
) -> tuple[TemporalMap, np.ndarray]:
    """Inverted dropout: kept entries scaled by 1/(1-rate) at train time.

    Inference mode (or rate 0) is the identity. Deterministic given the seed.
    Returns the output map and the boolean kept mask.
    """
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return inp.copy(), np.ones_like(inp.data, dtype=bool)
    rng = np.random.default_rng(rng_seed)
    kept = rng.random(inp.data.shape) >= rate
    out = np.where(kept, inp.data / (1.0 - rate), 0.0)
    return TemporalMap(out, inp.mask.copy()), kept


def dropout_backward(upstream: np.ndarray, kept: np.ndarray, rate: float) -> np.ndarray:
    """Gradient through inverted dropout given the recorded kept mask."""
    return np.where(kept, upstream / (1.0 - rate), 0.0)
