"""The Res-TCN model: first interpretable conv layer, a stack of
pre-activation residual units, global average pooling and a softmax head.

Layer numbering used throughout the package: layer 1 is the first conv
(its output X1 is linear, no activation in front of it), layers 2..N are
residual units computing X_l = skip(X_{l-1}) + W_l * relu(X_{l-1}). In the
"interpretable" profile every unit keeps the width and stride of layer 1,
the skip is the identity, and X_N decomposes exactly into X1 plus the
per-unit residual contributions. The "capacity" profile grows channels and
strides; there the skip is a strided linear projection and the additive
decomposition no longer holds, so interpretation ops refuse such models
unless forced.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DimensionError,
)
from .ops import (
    ConvFilterBank,
    TemporalMap,
    conv1d_backward,
    conv1d_forward,
    dropout,
    dropout_backward,
    global_average_pool,
    global_average_pool_backward,
    merge_add,
    relu,
    relu_backward,
    softmax,
    softmax_cross_entropy,
)

CHECKPOINT_MAGIC = b"RTCN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    """Geometry of one convolution layer."""

    num_filters: int
    filter_length: int
    stride: int = 1

    def validate(self, name: str) -> None:
        if self.num_filters < 1:
            raise ConfigError(f"{name}: num_filters must be >= 1, got {self.num_filters}")
        if self.filter_length < 1:
            raise ConfigError(f"{name}: filter_length must be >= 1, got {self.filter_length}")
        if self.stride < 1:
            raise ConfigError(f"{name}: stride must be >= 1, got {self.stride}")


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    input_dim: int = 150
    first_conv: LayerSpec = LayerSpec(64, 8, 1)
    residual_units: tuple[LayerSpec, ...] = tuple(LayerSpec(64, 8, 1) for _ in range(8))
    dropout_rate: float = 0.5
    l1_weight: float = 1e-4

    def __post_init__(self):
        object.__setattr__(self, "residual_units", tuple(self.residual_units))
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be >= 1, got {self.input_dim}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.l1_weight < 0.0:
            raise ConfigError(f"l1_weight must be >= 0, got {self.l1_weight}")
        self.first_conv.validate("first_conv")
        for i, unit in enumerate(self.residual_units):
            unit.validate(f"residual_units[{i}]")

    @property
    def num_layers(self) -> int:
        """Conv layers counting the first conv as layer 1."""
        return 1 + len(self.residual_units)

    @property
    def is_interpretable(self) -> bool:
        """True when every unit keeps layer 1's width and all strides are 1."""
        if self.first_conv.stride != 1:
            return False
        return all(
            u.num_filters == self.first_conv.num_filters and u.stride == 1
            for u in self.residual_units
        )

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "input_dim": self.input_dim,
            "first_conv": list(self.first_conv.__dict__.values()),
            "residual_units": [[u.num_filters, u.filter_length, u.stride] for u in self.residual_units],
            "dropout_rate": self.dropout_rate,
            "l1_weight": self.l1_weight,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            num_classes=int(d["num_classes"]),
            input_dim=int(d["input_dim"]),
            first_conv=LayerSpec(*d["first_conv"]),
            residual_units=tuple(LayerSpec(*u) for u in d["residual_units"]),
            dropout_rate=float(d["dropout_rate"]),
            l1_weight=float(d["l1_weight"]),
        )


def interpretable_config(num_classes: int, input_dim: int = 150, num_filters: int = 64,
                         filter_length: int = 8, num_units: int = 8,
                         dropout_rate: float = 0.5, l1_weight: float = 1e-4) -> ModelConfig:
    """Uniform-width stride-1 profile; the only regime where the additive
    decomposition of the final representation into X1 + residual terms is
    exactly shape-valid."""
    spec = LayerSpec(num_filters, filter_length, 1)
    return ModelConfig(
        num_classes=num_classes,
        input_dim=input_dim,
        first_conv=spec,
        residual_units=tuple(spec for _ in range(num_units)),
        dropout_rate=dropout_rate,
        l1_weight=l1_weight,
    )


def capacity_config(num_classes: int, input_dim: int = 150,
                    dropout_rate: float = 0.5, l1_weight: float = 1e-4) -> ModelConfig:
    """Channel-growing profile (64 -> 128 -> 256) with stride-2 stage entries.

    Skips across shape changes use a strided linear projection, which
    breaks the exact additive decomposition; interpretation ops refuse
    this profile unless forced.
    """
    units = (
        LayerSpec(64, 8, 1), LayerSpec(64, 8, 1),
        LayerSpec(128, 8, 2), LayerSpec(128, 8, 1), LayerSpec(128, 8, 1),
        LayerSpec(256, 8, 2), LayerSpec(256, 8, 1), LayerSpec(256, 8, 1),
    )
    return ModelConfig(
        num_classes=num_classes,
        input_dim=input_dim,
        first_conv=LayerSpec(64, 8, 1),
        residual_units=units,
        dropout_rate=dropout_rate,
        l1_weight=l1_weight,
    )


@dataclass
class Param:
    """One named parameter array with its regularization kind."""

    name: str
    array: np.ndarray
    kind: str  # "conv_weight" | "bias" | "head_weight" | "head_bias"


@dataclass
class ResTcnModel:
    config: ModelConfig
    first_conv: ConvFilterBank
    units: list[ConvFilterBank]
    projections: list[ConvFilterBank | None]
    head_weights: np.ndarray  # (C_last, num_classes)
    head_bias: np.ndarray  # (num_classes,)

    def __post_init__(self):
        cfg = self.config
        if len(self.units) != len(cfg.residual_units):
            raise ConfigError("unit count does not match config")
        if self.first_conv.in_channels != cfg.input_dim:
            raise ConfigError("first conv input channels do not match config input_dim")
        channels = self.first_conv.num_filters
        for i, (unit, proj) in enumerate(zip(self.units, self.projections)):
            if unit.in_channels != channels:
                raise ConfigError(
                    f"unit {i}: expects {unit.in_channels} input channels, chain carries {channels}"
                )
            needs_proj = unit.num_filters != channels or unit.stride != 1
            if needs_proj and proj is None:
                raise ConfigError(f"unit {i}: shape change requires a skip projection")
            if proj is not None and (proj.in_channels != channels or proj.num_filters != unit.num_filters):
                raise ConfigError(f"unit {i}: skip projection shape is inconsistent")
            channels = unit.num_filters
        if self.head_weights.shape != (channels, cfg.num_classes):
            raise ConfigError(
                f"head weights {self.head_weights.shape} do not match ({channels}, {cfg.num_classes})"
            )
        if self.head_bias.shape != (cfg.num_classes,):
            raise ConfigError("head bias shape does not match num_classes")

    @property
    def has_projections(self) -> bool:
        return any(p is not None for p in self.projections)

    def parameters(self) -> list[Param]:
        """All parameter arrays in the canonical (checkpoint) order."""
        params = [
            Param("layer1.weights", self.first_conv.weights, "conv_weight"),
            Param("layer1.bias", self.first_conv.bias, "bias"),
        ]
        for i, (unit, proj) in enumerate(zip(self.units, self.projections)):
            layer = i + 2
            if proj is not None:
                params.append(Param(f"layer{layer}.skip.weights", proj.weights, "conv_weight"))
                params.append(Param(f"layer{layer}.skip.bias", proj.bias, "bias"))
            params.append(Param(f"layer{layer}.weights", unit.weights, "conv_weight"))
            params.append(Param(f"layer{layer}.bias", unit.bias, "bias"))
        params.append(Param("head.weights", self.head_weights, "head_weight"))
        params.append(Param("head.bias", self.head_bias, "head_bias"))
        return params

    def num_parameters(self) -> int:
        return sum(p.array.size for p in self.parameters())


@dataclass
class ActivationCache:
    """Everything a forward pass produced: X0..XN, pooled vector, logits."""

    maps: list[TemporalMap]
    pooled: np.ndarray
    logits: np.ndarray
    mode: str
    config: ModelConfig
    dropout_kept: list[np.ndarray] = field(default_factory=list)
    dropout_rate: float = 0.0


def _fan_in_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    a = np.sqrt(6.0 / fan_in)
    return rng.uniform(-a, a, size=shape)


def build_model(config: ModelConfig, init_seed: int) -> ResTcnModel:
    """Scaled uniform fan-in initialization, biases zero, deterministic in the seed."""
    rng = np.random.default_rng(init_seed)
    fc = config.first_conv
    first = ConvFilterBank(
        _fan_in_uniform(rng, (fc.num_filters, fc.filter_length, config.input_dim),
                        fc.filter_length * config.input_dim),
        np.zeros(fc.num_filters),
        fc.stride,
    )
    units: list[ConvFilterBank] = []
    projections: list[ConvFilterBank | None] = []
    channels = fc.num_filters
    for spec in config.residual_units:
        units.append(ConvFilterBank(
            _fan_in_uniform(rng, (spec.num_filters, spec.filter_length, channels),
                            spec.filter_length * channels),
            np.zeros(spec.num_filters),
            spec.stride,
        ))
        if spec.num_filters != channels or spec.stride != 1:
            projections.append(ConvFilterBank(
                _fan_in_uniform(rng, (spec.num_filters, 1, channels), channels),
                np.zeros(spec.num_filters),
                spec.stride,
            ))
        else:
            projections.append(None)
        channels = spec.num_filters
    head_w = _fan_in_uniform(rng, (channels, config.num_classes), channels)
    head_b = np.zeros(config.num_classes)
    return ResTcnModel(config, first, units, projections, head_w, head_b)


def _unit_dropout_seeds(seed, n_units: int) -> list[int]:
    ss = np.random.SeedSequence(seed)
    return [int(s) for s in ss.generate_state(max(n_units, 1), dtype=np.uint64)]


def forward(model: ResTcnModel, x0: TemporalMap, mode: str = "infer",
            seed: int | None = None) -> ActivationCache:
    """Run the whole stack.

    X1 = conv1(X0) with no preceding nonlinearity; each unit then adds its
    residual branch conv(dropout(relu(X))) on top of the skip path. Dropout
    is active only in "train" mode, sits inside the branch (never on the
    skip), and needs an explicit seed.
    """
    if mode not in ("train", "infer"):
        raise ContractError(f"mode must be 'train' or 'infer', got {mode!r}")
    if x0.num_channels != model.config.input_dim:
        raise DimensionError(
            f"input has {x0.num_channels} channels, model expects {model.config.input_dim}"
        )
    training = mode == "train"
    rate = model.config.dropout_rate
    if training and rate > 0.0 and seed is None:
        raise ContractError("train-mode forward with dropout requires an explicit seed")
    seeds = _unit_dropout_seeds(seed, len(model.units)) if training else []

    maps = [x0, conv1d_forward(x0, model.first_conv)]
    kept_masks: list[np.ndarray] = []
    for i, (unit, proj) in enumerate(zip(model.units, model.projections)):
        prev = maps[-1]
        activated = relu(prev)
        if training:
            activated, kept = dropout(activated, rate, seeds[i], True)
            kept_masks.append(kept)
        branch = conv1d_forward(activated, unit)
        skip = prev if proj is None else conv1d_forward(prev, proj)
        maps.append(merge_add(skip, branch))
    pooled = global_average_pool(maps[-1])
    logits = pooled @ model.head_weights + model.head_bias
    return ActivationCache(maps, pooled, logits, mode, model.config, kept_masks, rate)


def decompose(cache: ActivationCache) -> list[TemporalMap]:
    """Split the final representation into [X1, F2, ..., FN] so that the
    running sum reproduces each intermediate map and, in full, X_N.

    Only valid for infer-mode caches of interpretable-profile models (the
    identity skip is what makes the terms elementwise comparable).
    """
    if cache.mode != "infer":
        raise ContractError("decompose needs an infer-mode cache (dropout breaks the identity)")
    if not cache.config.is_interpretable:
        raise ContractError("decompose is only defined for the interpretable profile")
    terms = [cache.maps[1]]
    for prev, cur in zip(cache.maps[1:-1], cache.maps[2:]):
        terms.append(TemporalMap(cur.data - prev.data, cur.mask.copy()))
    return terms


@dataclass
class ModelGradients:
    """Per-parameter gradient arrays aligned with `ResTcnModel.parameters()`."""

    arrays: list[np.ndarray]
    names: list[str]
    d_input: TemporalMap
    loss: float


def backward_from_logits(model: ResTcnModel, cache: ActivationCache,
                         d_logits: np.ndarray, loss: float = 0.0) -> ModelGradients:
    """Backpropagate an arbitrary logit gradient through the cached pass.

    Split out from `backward` so verification code can inject synthetic
    upstream gradients (e.g. zeros).
    """
    if cache.config is not model.config and cache.config != model.config:
        raise ContractError("cache was produced by a different model configuration")
    expect = len(model.units) + 2
    if len(cache.maps) != expect:
        raise ContractError(f"cache holds {len(cache.maps)} maps, model implies {expect}")
    training = cache.mode == "train"
    if training and cache.dropout_rate > 0.0 and len(cache.dropout_kept) != len(model.units):
        raise ContractError("train-mode cache is missing recorded dropout masks")

    d_head_w = np.outer(cache.pooled, d_logits)
    d_head_b = d_logits.copy()
    x_last = cache.maps[-1]
    d_map = global_average_pool_backward(x_last, model.head_weights @ d_logits)

    unit_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(model.units)
    proj_grads: list[tuple[np.ndarray, np.ndarray] | None] = [None] * len(model.units)
    for i in range(len(model.units) - 1, -1, -1):
        unit, proj = model.units[i], model.projections[i]
        prev = cache.maps[i + 1]
        activated = relu(prev)
        if training and cache.dropout_rate > 0.0:
            kept = cache.dropout_kept[i]
            branch_in = TemporalMap(
                np.where(kept, activated.data / (1.0 - cache.dropout_rate), 0.0),
                activated.mask.copy(),
            )
        else:
            kept = None
            branch_in = activated
        g = conv1d_backward(branch_in, unit, d_map)
        unit_grads[i] = (g.weights, g.bias)
        d_branch_in = g.input.data
        if kept is not None:
            d_branch_in = dropout_backward(d_branch_in, kept, cache.dropout_rate)
        d_prev = relu_backward(prev, d_branch_in)
        if proj is None:
            d_prev = d_prev + d_map.data
        else:
            gp = conv1d_backward(prev, proj, d_map)
            proj_grads[i] = (gp.weights, gp.bias)
            d_prev = d_prev + gp.input.data
        d_map = TemporalMap(d_prev, prev.mask.copy())

    g1 = conv1d_backward(cache.maps[0], model.first_conv, d_map)

    arrays = [g1.weights, g1.bias]
    for i in range(len(model.units)):
        if proj_grads[i] is not None:
            arrays.extend(proj_grads[i])
        arrays.extend(unit_grads[i])
    arrays.extend([d_head_w, d_head_b])
    names = [p.name for p in model.parameters()]
    return ModelGradients(arrays, names, g1.input, loss)


def backward(model: ResTcnModel, cache: ActivationCache, label: int) -> ModelGradients:
    """Cross-entropy gradients for every parameter, including the skip-path flow."""
    if cache.mode != "train":
        raise ContractError("backward needs a train-mode cache with recorded dropout masks")
    loss, d_logits = softmax_cross_entropy(cache.logits, label)
    return backward_from_logits(model, cache, d_logits, loss)


def predict(model: ResTcnModel, x0: TemporalMap) -> tuple[int, np.ndarray]:
    """Class index (ties broken toward the lowest index) and the probability vector."""
    cache = forward(model, x0, mode="infer")
    probs = softmax(cache.logits)
    return int(np.argmax(probs)), probs


# --- checkpoint container -------------------------------------------------
#
# Little-endian binary layout:
#   magic "RTCN" | u32 version | u32 config_len | config JSON (UTF-8) |
#   then for each parameter in ResTcnModel.parameters() order:
#     u32 ndim | ndim * u64 shape | raw float64 data (C order)

def save_checkpoint(model: ResTcnModel, path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg = json.dumps(model.config.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    for param in model.parameters():
        arr = np.ascontiguousarray(param.array, dtype="<f8")
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: expected {n} bytes for {what}, got {len(data)}")
    return data


def load_checkpoint(path) -> ResTcnModel:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}; not a model checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint format version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        try:
            config = ModelConfig.from_dict(json.loads(_read_exact(fh, cfg_len, "config").decode("utf-8")))
        except (ValueError, KeyError, TypeError) as exc:
            raise CheckpointError(f"unreadable checkpoint config: {exc}") from exc

        def read_array(name: str) -> np.ndarray:
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, f"{name} ndim"))
            shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim, f"{name} shape"))
            count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            raw = _read_exact(fh, 8 * count, f"{name} data")
            return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)

        first = ConvFilterBank(read_array("layer1.weights"), read_array("layer1.bias"),
                               config.first_conv.stride)
        units: list[ConvFilterBank] = []
        projections: list[ConvFilterBank | None] = []
        channels = config.first_conv.num_filters
        for i, spec in enumerate(config.residual_units):
            layer = i + 2
            if spec.num_filters != channels or spec.stride != 1:
                projections.append(ConvFilterBank(
                    read_array(f"layer{layer}.skip.weights"),
                    read_array(f"layer{layer}.skip.bias"),
                    spec.stride,
                ))
            else:
                projections.append(None)
            units.append(ConvFilterBank(
                read_array(f"layer{layer}.weights"), read_array(f"layer{layer}.bias"), spec.stride
            ))
            channels = spec.num_filters
        head_w = read_array("head.weights")
        head_b = read_array("head.bias")
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError("checkpoint has trailing bytes after the last parameter")
    try:
        return ResTcnModel(config, first, units, projections, head_w, head_b)
    except ConfigError as exc:
        raise CheckpointError(f"checkpoint parameters do not match its config: {exc}") from exc
