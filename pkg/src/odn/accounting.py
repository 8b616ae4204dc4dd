"""Parameter, buffer, size-on-disk, and FLOPs accounting per depth level.

Counts cover the deployment view only: stem, blocks 1..d, and head d,
matching exactly what extraction produces.  Conventions:

* size on disk = 4 bytes per stored float32 value, parameters plus
  batch-norm running buffers, reported in decimal MB (10^6 bytes);
* FLOPs use 2 ops per multiply-accumulate for conv/linear and 2 ops per
  output element for batch norm, ReLU, and pooling.

The analytic walk here is deliberately independent of any instantiated
network; ``verify_against_instantiated`` cross-checks it by enumerating the
actual arrays of an extracted model.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

from .network import (
    ARCH_IDS,
    BlockSpec,
    DepthPartitionedNetwork,
    arch_block_specs,
    extract_odn,
    stem_channels,
)

BYTES_PER_VALUE = 4  # float32
MB = 10**6


@dataclass(frozen=True)
class ModelStats:
    arch_id: str
    depth: int
    depth_max: int
    input_shape: tuple[int, int, int]  # (C, H, W)
    trainable_params: int
    buffer_values: int
    flops: int

    @property
    def size_bytes(self) -> int:
        return BYTES_PER_VALUE * (self.trainable_params + self.buffer_values)

    @property
    def size_mb(self) -> float:
        return self.size_bytes / MB

    @property
    def params_millions(self) -> float:
        return self.trainable_params / 1e6


def _conv_out(h: int, w: int, k: int, stride: int, pad: int) -> tuple[int, int]:
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


class _Counter:
    """Accumulates params/buffers/flops while walking layers."""

    def __init__(self) -> None:
        self.params = 0
        self.buffers = 0
        self.flops = 0

    def conv(self, cin: int, cout: int, k: int, h: int, w: int, stride: int, pad: int):
        ho, wo = _conv_out(h, w, k, stride, pad)
        self.params += k * k * cin * cout
        self.flops += 2 * k * k * cin * cout * ho * wo
        return ho, wo

    def bn(self, c: int, h: int, w: int) -> None:
        self.params += 2 * c
        self.buffers += 2 * c
        self.flops += 2 * c * h * w

    def relu(self, c: int, h: int, w: int) -> None:
        self.flops += 2 * c * h * w

    def pool(self, c: int, h: int, w: int) -> None:
        self.flops += 2 * c * h * w

    def linear(self, f: int, c: int) -> None:
        self.params += f * c + c
        self.flops += 2 * f * c


def _count_block(counter: _Counter, spec: BlockSpec, h: int, w: int) -> tuple[int, int]:
    if spec.kind == "basic":
        ho, wo = counter.conv(spec.in_channels, spec.out_channels, 3, h, w, spec.stride, 1)
        counter.bn(spec.out_channels, ho, wo)
        counter.relu(spec.out_channels, ho, wo)
        counter.conv(spec.out_channels, spec.out_channels, 3, ho, wo, 1, 1)
        counter.bn(spec.out_channels, ho, wo)
    else:
        mid = spec.mid_channels
        counter.conv(spec.in_channels, mid, 1, h, w, 1, 0)
        counter.bn(mid, h, w)
        counter.relu(mid, h, w)
        ho, wo = counter.conv(mid, mid, 3, h, w, spec.stride, 1)
        counter.bn(mid, ho, wo)
        counter.relu(mid, ho, wo)
        counter.conv(mid, spec.out_channels, 1, ho, wo, 1, 0)
        counter.bn(spec.out_channels, ho, wo)
    if spec.has_projection:
        counter.conv(spec.in_channels, spec.out_channels, 1, h, w, spec.stride, 0)
        counter.bn(spec.out_channels, ho, wo)
    counter.relu(spec.out_channels, ho, wo)  # post-residual activation
    return ho, wo


def stats_at_depth(arch_id: str, d: int, num_classes: int = 10,
                   input_shape: tuple[int, int, int] = (3, 32, 32),
                   width_multiplier: float = 1.0) -> ModelStats:
    """Analytic deployment-view stats for stem + blocks 1..d + head d."""
    specs = arch_block_specs(arch_id, stem_channels(arch_id, width_multiplier), width_multiplier)
    if not 1 <= d <= len(specs):
        raise ValueError(f"depth {d} outside 1..{len(specs)} for {arch_id}")
    cin, h, w = input_shape
    counter = _Counter()
    c_stem = stem_channels(arch_id, width_multiplier)
    h, w = counter.conv(cin, c_stem, 3, h, w, 1, 1)
    counter.bn(c_stem, h, w)
    counter.relu(c_stem, h, w)
    for spec in specs[:d]:
        h, w = _count_block(counter, spec, h, w)
    counter.pool(specs[d - 1].out_channels, h, w)
    counter.linear(specs[d - 1].out_channels, num_classes)
    return ModelStats(
        arch_id=arch_id,
        depth=d,
        depth_max=len(specs),
        input_shape=input_shape,
        trainable_params=counter.params,
        buffer_values=counter.buffers,
        flops=counter.flops,
    )


def reduction_percent(full: ModelStats, reduced: ModelStats) -> float:
    """Percentage size reduction of `reduced` relative to `full`."""
    if full.arch_id != reduced.arch_id:
        raise ValueError(f"arch mismatch: {full.arch_id} vs {reduced.arch_id}")
    return 100.0 * (1.0 - reduced.size_bytes / full.size_bytes)


@dataclass
class VerificationReport:
    arch_id: str
    depth: int
    passed: bool
    analytic_params: int
    enumerated_params: int
    analytic_buffers: int
    enumerated_buffers: int
    mismatches: list[str] = field(default_factory=list)


def verify_against_instantiated(net: DepthPartitionedNetwork, d: int,
                                input_shape: tuple[int, int, int] | None = None) -> VerificationReport:
    """Cross-check analytic counts against an actual extracted network."""
    if input_shape is None:
        input_shape = (net.in_channels, 32, 32)
    analytic = stats_at_depth(net.arch_id, d, net.num_classes, input_shape, net.width_multiplier)
    extracted = extract_odn(net, d)
    enum_params = sum(p.value.size for p in extracted.all_parameters())
    enum_buffers = sum(b.size for b in extracted.named_buffers().values())
    mismatches: list[str] = []
    if enum_params != analytic.trainable_params:
        mismatches.extend(sorted(extracted.named_parameters()))
    if enum_buffers != analytic.buffer_values:
        mismatches.extend(sorted(extracted.named_buffers()))
    return VerificationReport(
        arch_id=net.arch_id,
        depth=d,
        passed=not mismatches,
        analytic_params=analytic.trainable_params,
        enumerated_params=enum_params,
        analytic_buffers=analytic.buffer_values,
        enumerated_buffers=enum_buffers,
        mismatches=mismatches,
    )


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

CSV_FIELDS = ["arch", "depth", "depth_max", "params", "params_millions",
              "buffer_values", "size_bytes", "size_mb", "flops", "flops_millions",
              "size_reduction_percent"]


def _row(stats: ModelStats, full: ModelStats) -> dict:
    return {
        "arch": stats.arch_id,
        "depth": stats.depth,
        "depth_max": stats.depth_max,
        "params": stats.trainable_params,
        "params_millions": round(stats.params_millions, 4),
        "buffer_values": stats.buffer_values,
        "size_bytes": stats.size_bytes,
        "size_mb": round(stats.size_mb, 4),
        "flops": stats.flops,
        "flops_millions": round(stats.flops / 1e6, 2),
        "size_reduction_percent": round(reduction_percent(full, stats), 2),
    }


def render_table(stats_list: list[ModelStats], full: ModelStats) -> str:
    """Fixed-width text table mirroring the CSV columns."""
    lines = [f"{'Arch':<10} {'Depth':>7} {'Params':>10} {'Size':>10} {'FLOPs':>12} {'Reduction':>10}"]
    for s in stats_list:
        depth = f"{s.depth}/{s.depth_max}"
        params = f"{s.params_millions:.2f} M"
        size = f"{s.size_mb:.2f} MB"
        flops = f"{s.flops / 1e6:.2f} M"
        red = f"{reduction_percent(full, s):.2f} %"
        lines.append(f"{s.arch_id:<10} {depth:>7} {params:>10} {size:>10} {flops:>12} {red:>10}")
    return "\n".join(lines)


def render_csv(stats_list: list[ModelStats], full: ModelStats) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for s in stats_list:
        writer.writerow(_row(s, full))
    return buf.getvalue()


def render_json_lines(stats_list: list[ModelStats], full: ModelStats) -> str:
    return "\n".join(json.dumps(_row(s, full)) for s in stats_list) + "\n"
