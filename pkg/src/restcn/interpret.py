"""Filter-level interpretability: map first-layer filters to joint motion,
trace influential deep filters recursively down to layer 1, sparsify
activation timelines to the top percentile, and assemble explanation
reports.

All of this reads a frozen model and a forward cache; nothing here mutates
anything. It relies on two structural facts of the interpretable profile:
every input dim of layer 1 names one (actor, joint, axis), and every input
channel of unit l is exactly one filter of layer l-1, so weight magnitude
is a gate on how much of that lower filter's signal gets added to (or
subtracted from) the first-layer map.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import FEATURE_DIM, NUM_JOINTS, SkeletonSequence, dim_layout, joint_names, sequence_features
from .errors import ContractError, DomainError, InterpretabilityError
from .model import ActivationCache, ResTcnModel, forward
from .ops import ConvFilterBank, TemporalMap, softmax

AXIS_NAMES = ("X", "Y", "Z")
ENERGY_FLOOR = 0.05


@dataclass(frozen=True)
class JointAxisIndex:
    """One feature dimension named as (actor, joint, axis)."""

    actor: int
    joint: int
    axis: int

    @property
    def axis_name(self) -> str:
        return AXIS_NAMES[self.axis]

    @property
    def dim(self) -> int:
        return 75 * self.actor + 3 * self.joint + self.axis


def dim_to_joint(d: int) -> JointAxisIndex:
    """Inverse of the feature layout; raises on d outside [0, 150)."""
    actor, joint, axis = dim_layout(d)
    return JointAxisIndex(actor, joint, axis)


@dataclass
class FilterProfile:
    """Where one first-layer filter puts its weight mass.

    `energies[(actor, joint)]` is the squared-weight fraction over that
    joint's three axes and all temporal taps; fractions sum to 1 unless the
    filter is all-zero (`degenerate`). `templates` holds the (filter_len, 3)
    weight curves of joints above the energy floor.
    """

    filter_id: int
    energies: dict[tuple[int, int], float]
    templates: dict[tuple[int, int], np.ndarray]
    degenerate: bool = False

    def energy(self, actor: int, joint: int) -> float:
        return self.energies.get((actor, joint), 0.0)

    def top_joints(self, limit: int | None = None) -> list[tuple[int, int, float]]:
        items = sorted(self.energies.items(), key=lambda kv: (-kv[1], kv[0]))
        if limit is not None:
            items = items[:limit]
        return [(a, j, e) for (a, j), e in items]


def filter_joint_energy(first_conv: ConvFilterBank, filter_id: int,
                        energy_floor: float = ENERGY_FLOOR) -> FilterProfile:
    """Per-(actor, joint) squared-weight energy of one layer-1 filter, normalized to 1."""
    if not 0 <= filter_id < first_conv.num_filters:
        raise DomainError(f"filter {filter_id} out of range [0, {first_conv.num_filters})")
    if first_conv.in_channels != FEATURE_DIM:
        raise ContractError("joint energies need a first layer over the 150-dim skeleton feature")
    w = first_conv.weights[filter_id]  # (f, 150)
    per_joint = (w ** 2).reshape(w.shape[0], 2, NUM_JOINTS, 3).sum(axis=(0, 3))  # (2, 25)
    total = per_joint.sum()
    if total == 0.0:
        return FilterProfile(filter_id, {}, {}, degenerate=True)
    frac = per_joint / total
    energies = {}
    templates = {}
    for actor in range(2):
        for joint in range(NUM_JOINTS):
            e = float(frac[actor, joint])
            energies[(actor, joint)] = e
            if e >= energy_floor:
                base = 75 * actor + 3 * joint
                templates[(actor, joint)] = w[:, base:base + 3].copy()
    return FilterProfile(filter_id, energies, templates)


@dataclass
class TraceNode:
    layer: int
    filter_id: int
    influence: float  # normalized edge weight from the parent; 1.0 at the root
    children: list["TraceNode"] = field(default_factory=list)

    @property
    def is_leaf(self) -> bool:
        return self.layer == 1


@dataclass
class InfluenceTrace:
    """A tree rooted at a deep filter with leaves at layer-1 filters.

    `leaves` accumulates, per first-layer filter, the summed products of
    normalized edge weights over every root-to-leaf path; `leaf_signed`
    carries the same accumulation over raw (signed) tap-sum products, which
    tells whether the path adds to or subtracts from the first-layer map.
    """

    root: TraceNode
    leaves: dict[int, float]
    leaf_signed: dict[int, float]
    top_m: int
    depth: int | None = None

    def ranked_leaves(self) -> list[tuple[int, float]]:
        return sorted(self.leaves.items(), key=lambda kv: (-kv[1], kv[0]))


def _channel_scores(bank: ConvFilterBank, filter_id: int) -> tuple[np.ndarray, np.ndarray]:
    w = bank.weights[filter_id]  # (f, C_in)
    return np.abs(w).sum(axis=0), w.sum(axis=0)


def trace_influence(model: ResTcnModel, layer: int, filter_id: int,
                    top_m: int = 3, depth: int | None = None,
                    force: bool = False) -> InfluenceTrace:
    """Recursively follow the top-m strongest input channels of a deep filter
    down to layer 1.

    Channel strength is the temporal-tap-summed absolute weight. Edge
    influence is that strength normalized by the filter's total over all
    channels, so a path product is a fraction of weight mass. `depth`
    limits how many levels are expanded (None = all the way down); nodes
    cut off early are childless and contribute nothing to `leaves`.
    """
    n_layers = model.config.num_layers
    if not 2 <= layer <= n_layers:
        raise DomainError(f"trace needs a unit layer in [2, {n_layers}], got {layer}")
    if not model.config.is_interpretable and not force:
        raise InterpretabilityError(
            "model uses the capacity profile (projected skips); channel->filter "
            "identity does not hold. Pass force=True to trace anyway."
        )
    bank = model.units[layer - 2]
    if not 0 <= filter_id < bank.num_filters:
        raise DomainError(f"filter {filter_id} out of range [0, {bank.num_filters})")
    if top_m < 1:
        raise DomainError(f"top_m must be >= 1, got {top_m}")

    leaves: dict[int, float] = {}
    leaf_signed: dict[int, float] = {}

    def expand(node: TraceNode, path_influence: float, path_signed: float,
               remaining: int | None) -> None:
        if remaining is not None and remaining <= 0:
            return
        bank_l = model.units[node.layer - 2]
        strength, signed = _channel_scores(bank_l, node.filter_id)
        total = strength.sum()
        if total == 0.0:
            return
        order = np.argsort(-strength, kind="stable")[:top_m]
        for c in order:
            influence = float(strength[c] / total)
            child = TraceNode(node.layer - 1, int(c), influence)
            node.children.append(child)
            child_path = path_influence * influence
            child_signed = path_signed * float(signed[c])
            if child.is_leaf:
                leaves[child.filter_id] = leaves.get(child.filter_id, 0.0) + child_path
                leaf_signed[child.filter_id] = leaf_signed.get(child.filter_id, 0.0) + child_signed
            else:
                expand(child, child_path, child_signed,
                       None if remaining is None else remaining - 1)

    root = TraceNode(layer, filter_id, 1.0)
    expand(root, 1.0, 1.0, depth)
    return InfluenceTrace(root, leaves, leaf_signed, top_m, depth)


def activation_timeline(cache: ActivationCache, layer: int, percentile: float) -> TemporalMap:
    """Keep, per valid time step, only the activations at or above that
    step's `percentile` across filters; everything else becomes zero.

    Retained values are unmodified, so the result is a sparse subset of the
    dense map. Percentile 80 keeps the top 20% of each step.
    """
    if cache.mode != "infer":
        raise ContractError("timelines need an infer-mode cache")
    if not 0.0 < percentile < 100.0:
        raise DomainError(f"percentile must be in (0, 100), got {percentile}")
    if not 1 <= layer < len(cache.maps):
        raise DomainError(f"layer must be in [1, {len(cache.maps) - 1}], got {layer}")
    dense = cache.maps[layer]
    sparse = np.zeros_like(dense.data)
    for t in np.nonzero(dense.mask)[0]:
        row = dense.data[t]
        threshold = np.percentile(row, percentile)
        keep = row >= threshold
        sparse[t, keep] = row[keep]
    return TemporalMap(sparse, dense.mask.copy())


@dataclass
class ReportFilter:
    layer: int
    filter_id: int
    max_magnitude: float
    peak_frame: int
    timeline: np.ndarray  # retained values over exactly the valid frames
    joint_energies: dict[tuple[int, int], float]
    trace: InfluenceTrace | None
    leaf_profiles: dict[int, FilterProfile]


@dataclass
class ExplanationReport:
    sequence_source: str
    sequence_label: int
    sequence_subject: int
    sequence_camera: int
    num_frames: int
    predicted_class: int
    predicted_probability: float
    probabilities: np.ndarray
    layer: int
    percentile: float
    filters: list[ReportFilter]

    def to_dict(self) -> dict:
        names = joint_names()

        def energy_key(actor: int, joint: int) -> str:
            return f"actor{actor}.joint{joint}"

        def filter_dict(rf: ReportFilter) -> dict:
            if rf.trace is not None:
                leaf_items = rf.trace.ranked_leaves()
                signed = rf.trace.leaf_signed
            else:
                leaf_items = [(rf.filter_id, 1.0)]
                signed = {rf.filter_id: 1.0}
            leaves = []
            for leaf_id, influence in leaf_items:
                profile = rf.leaf_profiles[leaf_id]
                leaves.append({
                    "filter": leaf_id,
                    "influence": influence,
                    "signed_weight": signed.get(leaf_id, 0.0),
                    "joint_energies": {
                        energy_key(a, j): e
                        for (a, j), e in sorted(profile.energies.items())
                        if e >= ENERGY_FLOOR
                    },
                    "top_joints": [
                        {
                            "actor": a,
                            "joint": j,
                            "display_index": j + 1,
                            "name": names[j],
                            "energy": e,
                        }
                        for a, j, e in profile.top_joints()
                        if e >= ENERGY_FLOOR
                    ],
                })
            return {
                "layer": rf.layer,
                "id": rf.filter_id,
                "max_magnitude": rf.max_magnitude,
                "peak_frame": rf.peak_frame,
                "timeline": [float(v) for v in rf.timeline],
                "joint_energies": {
                    energy_key(a, j): e for (a, j), e in sorted(rf.joint_energies.items())
                },
                "trace": {
                    "root_layer": rf.layer,
                    "root_filter": rf.filter_id,
                    "top_m": rf.trace.top_m if rf.trace is not None else 1,
                    "leaves": leaves,
                },
            }

        return {
            "prediction": {
                "class": self.predicted_class,
                "probability": self.predicted_probability,
                "probabilities": [float(p) for p in self.probabilities],
            },
            "sequence": {
                "source": self.sequence_source,
                "label": self.sequence_label,
                "subject": self.sequence_subject,
                "camera": self.sequence_camera,
                "num_frames": self.num_frames,
            },
            "layer": self.layer,
            "percentile": self.percentile,
            "filters": [filter_dict(rf) for rf in self.filters],
        }


def _aggregate_joint_energies(trace: InfluenceTrace | None,
                              profiles: dict[int, FilterProfile],
                              own_id: int) -> dict[tuple[int, int], float]:
    """Influence-weighted mix of leaf joint energies, renormalized to sum 1."""
    if trace is None:
        leaf_items = [(own_id, 1.0)]
    else:
        leaf_items = list(trace.leaves.items())
    mix: dict[tuple[int, int], float] = {}
    for leaf_id, influence in leaf_items:
        for key, e in profiles[leaf_id].energies.items():
            mix[key] = mix.get(key, 0.0) + influence * e
    total = sum(mix.values())
    if total > 0.0:
        mix = {k: v / total for k, v in mix.items()}
    return mix


def explain(model: ResTcnModel, sequence: SkeletonSequence,
            layer: int | None = None, percentile: float = 80.0,
            num_filters: int = 3, top_m: int = 3, depth: int | None = None,
            force: bool = False) -> ExplanationReport:
    """Run the model on a sequence and explain what drove its prediction.

    Filters of the inspected layer (default: the one feeding the final
    merge) are ranked by the maximal magnitude of their sparsified
    timeline; each selected filter is traced down to layer-1 filters whose
    joint-energy profiles name the moving joints. All-zero timelines are
    dropped, so a zero model yields an empty filter list.
    """
    if not model.config.is_interpretable and not force:
        raise InterpretabilityError(
            "explanations require the interpretable profile; pass force=True to override"
        )
    if num_filters < 1:
        raise DomainError(f"num_filters must be >= 1, got {num_filters}")
    x0 = sequence_features(sequence)
    cache = forward(model, x0, mode="infer")
    probs = softmax(cache.logits)
    predicted = int(np.argmax(probs))

    n_layers = model.config.num_layers
    if layer is None:
        layer = max(1, n_layers - 1)
    if not 1 <= layer <= n_layers:
        raise DomainError(f"layer must be in [1, {n_layers}], got {layer}")

    sparse = activation_timeline(cache, layer, percentile)
    valid = np.nonzero(sparse.mask)[0]
    magnitudes = np.abs(sparse.data[valid]).max(axis=0)
    order = np.argsort(-magnitudes, kind="stable")[:num_filters]

    report_filters: list[ReportFilter] = []
    for k in order:
        k = int(k)
        if magnitudes[k] <= 0.0:
            continue
        series = sparse.data[valid, k]
        peak = int(valid[int(np.argmax(np.abs(series)))])
        if layer >= 2:
            trace = trace_influence(model, layer, k, top_m=top_m, depth=depth, force=force)
            leaf_ids = list(trace.leaves)
        else:
            trace = None
            leaf_ids = [k]
        profiles = {lid: filter_joint_energy(model.first_conv, lid) for lid in leaf_ids}
        report_filters.append(ReportFilter(
            layer=layer,
            filter_id=k,
            max_magnitude=float(magnitudes[k]),
            peak_frame=peak,
            timeline=series.copy(),
            joint_energies=_aggregate_joint_energies(trace, profiles, k),
            trace=trace,
            leaf_profiles=profiles,
        ))

    return ExplanationReport(
        sequence_source=sequence.source,
        sequence_label=sequence.label,
        sequence_subject=sequence.subject,
        sequence_camera=sequence.camera,
        num_frames=len(sequence),
        predicted_class=predicted,
        predicted_probability=float(probs[predicted]),
        probabilities=probs,
        layer=layer,
        percentile=percentile,
        filters=report_filters,
    )


def report_json(report: ExplanationReport) -> str:
    """Canonical JSON text: sorted keys, 2-space indent, trailing newline.

    json round-trips shortest-repr floats exactly, so parse -> serialize
    reproduces the bytes.
    """
    return json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"


_SVG_PALETTE = ("#2d7dd2", "#97cc04", "#f45d01", "#6f42c1", "#eeb902", "#d7263d")


def timeline_svg(report: ExplanationReport, width: int = 720, height: int = 240) -> str:
    """Line plot of each selected filter's timeline: one polyline per filter,
    frames on x, activation value on y."""
    pad = 30
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" '
        'stroke="#999" stroke-width="1"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" '
        'stroke="#999" stroke-width="1"/>',
    ]
    if report.filters:
        n = max(len(rf.timeline) for rf in report.filters)
        lo = min(0.0, min(float(rf.timeline.min()) for rf in report.filters))
        hi = max(1e-12, max(float(rf.timeline.max()) for rf in report.filters))
        span = hi - lo if hi > lo else 1.0
        for i, rf in enumerate(report.filters):
            color = _SVG_PALETTE[i % len(_SVG_PALETTE)]
            points = []
            for t, v in enumerate(rf.timeline):
                x = pad + (width - 2 * pad) * (t / max(1, n - 1))
                y = height - pad - (height - 2 * pad) * ((float(v) - lo) / span)
                points.append(f"{x:.2f},{y:.2f}")
            lines.append(
                f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                f'points="{" ".join(points)}"><title>layer {rf.layer} filter '
                f'{rf.filter_id}</title></polyline>'
            )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def render_report(report: ExplanationReport, json_path, svg_path=None) -> None:
    """Write the report JSON (always) and optionally the timeline SVG."""
    with open(json_path, "w", encoding="utf-8") as fh:
        fh.write(report_json(report))
    if svg_path is not None:
        with open(svg_path, "w", encoding="utf-8") as fh:
            fh.write(timeline_svg(report))
