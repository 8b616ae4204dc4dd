"""Depth-partitioned residual networks with one output head per depth level.

A network is a small-image stem (3x3 conv, stride 1, no max-pool), an ordered
list of residual blocks, and one classifier head (global average pool +
linear) per block.  Depth level ``d`` means the forward pass runs the stem,
blocks ``1..d``, and head ``d`` only; nothing deeper is touched.  The three
supported architectures partition into 8 (resnet18) or 16 (resnet34,
resnet50) blocks.

``extract_odn`` deep-copies the prefix up to a chosen depth into a standalone
single-head network whose eval-mode logits are bit-identical to the parent's.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .tensor import Parameter, Tensor, add, batch_norm, conv2d, global_avg_pool, linear, relu

ARCH_IDS = ("resnet18", "resnet34", "resnet50")

BOTTLENECK_EXPANSION = 4


class DepthError(ValueError):
    """Depth level outside 1..D_max."""

    def __init__(self, depth: int, depth_max: int) -> None:
        self.depth = depth
        self.depth_max = depth_max
        super().__init__(f"depth {depth} outside valid range 1..{depth_max}")


@dataclass(frozen=True)
class BlockSpec:
    """Static description of one residual block."""

    kind: str  # "basic" | "bottleneck"
    in_channels: int
    out_channels: int
    stride: int
    mid_channels: int = 0  # bottleneck only

    @property
    def has_projection(self) -> bool:
        return self.stride != 1 or self.in_channels != self.out_channels


def _scaled(channels: int, width_multiplier: float) -> int:
    return max(1, int(round(channels * width_multiplier)))


def arch_block_specs(arch_id: str, in_stem: int, width_multiplier: float = 1.0) -> list[BlockSpec]:
    """Block layout for an architecture, already width-scaled.

    resnet18: 8 basic blocks, channels 64,64,128,128,256,256,512,512 with
    strides 1,1,2,1,2,1,2,1.  resnet34/resnet50 use the 3/4/6/3 stage pattern
    (basic and bottleneck blocks respectively); the first block of every stage
    after the first downsamples.
    """
    if arch_id not in ARCH_IDS:
        raise ValueError(f"unknown arch_id {arch_id!r}; expected one of {ARCH_IDS}")
    wm = width_multiplier
    specs: list[BlockSpec] = []
    if arch_id == "resnet18":
        plan = [(64, 1), (64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2), (512, 1)]
        cin = in_stem
        for ch, stride in plan:
            cout = _scaled(ch, wm)
            specs.append(BlockSpec("basic", cin, cout, stride))
            cin = cout
    elif arch_id == "resnet34":
        cin = in_stem
        for stage_idx, (ch, count) in enumerate([(64, 3), (128, 4), (256, 6), (512, 3)]):
            cout = _scaled(ch, wm)
            for block_idx in range(count):
                stride = 2 if stage_idx > 0 and block_idx == 0 else 1
                specs.append(BlockSpec("basic", cin, cout, stride))
                cin = cout
    else:  # resnet50
        cin = in_stem
        for stage_idx, (ch, count) in enumerate([(64, 3), (128, 4), (256, 6), (512, 3)]):
            mid = _scaled(ch, wm)
            cout = mid * BOTTLENECK_EXPANSION
            for block_idx in range(count):
                stride = 2 if stage_idx > 0 and block_idx == 0 else 1
                specs.append(BlockSpec("bottleneck", cin, cout, stride, mid_channels=mid))
                cin = cout
    return specs


def stem_channels(arch_id: str, width_multiplier: float = 1.0) -> int:
    if arch_id not in ARCH_IDS:
        raise ValueError(f"unknown arch_id {arch_id!r}; expected one of {ARCH_IDS}")
    return _scaled(64, width_multiplier)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _kaiming_conv(rng: np.random.Generator, out_c: int, in_c: int, k: int) -> np.ndarray:
    # fan-out normal init
    std = np.sqrt(2.0 / (k * k * out_c))
    return rng.normal(0.0, std, size=(out_c, in_c, k, k)).astype(np.float32)


class Conv2d:
    def __init__(self, name: str, rng: np.random.Generator, in_c: int, out_c: int,
                 kernel: int, stride: int, padding: int) -> None:
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(f"{name}.weight", _kaiming_conv(rng, out_c, in_c, kernel))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight.value, self.stride, self.padding)

    def parameters(self):
        yield self.weight

    def buffers(self):
        return iter(())


class BatchNorm2d:
    def __init__(self, name: str, channels: int, momentum: float = 0.1, epsilon: float = 1e-5) -> None:
        self.name = name
        self.momentum = momentum
        self.epsilon = epsilon
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels, dtype=np.float32))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels, dtype=np.float32))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm(x, self.gamma.value, self.beta.value,
                          self.running_mean, self.running_var,
                          training, self.momentum, self.epsilon)

    def parameters(self):
        yield self.gamma
        yield self.beta

    def buffers(self):
        yield f"{self.name}.running_mean", self.running_mean
        yield f"{self.name}.running_var", self.running_var


class Linear:
    def __init__(self, name: str, rng: np.random.Generator, in_f: int, out_f: int) -> None:
        std = 1.0 / np.sqrt(in_f)
        self.weight = Parameter(f"{name}.weight", rng.normal(0.0, std, size=(out_f, in_f)).astype(np.float32))
        self.bias = Parameter(f"{name}.bias", np.zeros(out_f, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight.value, self.bias.value)

    def parameters(self):
        yield self.weight
        yield self.bias

    def buffers(self):
        return iter(())


class BasicBlock:
    """Two 3x3 convs, each followed by batch norm; identity or 1x1-projection skip."""

    def __init__(self, name: str, rng: np.random.Generator, spec: BlockSpec) -> None:
        self.spec = spec
        self.conv1 = Conv2d(f"{name}.conv1", rng, spec.in_channels, spec.out_channels, 3, spec.stride, 1)
        self.bn1 = BatchNorm2d(f"{name}.bn1", spec.out_channels)
        self.conv2 = Conv2d(f"{name}.conv2", rng, spec.out_channels, spec.out_channels, 3, 1, 1)
        self.bn2 = BatchNorm2d(f"{name}.bn2", spec.out_channels)
        self.proj_conv: Optional[Conv2d] = None
        self.proj_bn: Optional[BatchNorm2d] = None
        if spec.has_projection:
            self.proj_conv = Conv2d(f"{name}.proj_conv", rng, spec.in_channels, spec.out_channels, 1, spec.stride, 0)
            self.proj_bn = BatchNorm2d(f"{name}.proj_bn", spec.out_channels)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        out = relu(self.bn1(self.conv1(x), training))
        out = self.bn2(self.conv2(out), training)
        skip = x
        if self.proj_conv is not None:
            skip = self.proj_bn(self.proj_conv(x), training)
        return relu(add(out, skip))

    def _layers(self):
        layers = [self.conv1, self.bn1, self.conv2, self.bn2]
        if self.proj_conv is not None:
            layers += [self.proj_conv, self.proj_bn]
        return layers

    def parameters(self):
        for layer in self._layers():
            yield from layer.parameters()

    def buffers(self):
        for layer in self._layers():
            yield from layer.buffers()


class BottleneckBlock:
    """1x1 reduce, 3x3, 1x1 expand (4x), each conv followed by batch norm."""

    def __init__(self, name: str, rng: np.random.Generator, spec: BlockSpec) -> None:
        self.spec = spec
        mid = spec.mid_channels
        self.conv1 = Conv2d(f"{name}.conv1", rng, spec.in_channels, mid, 1, 1, 0)
        self.bn1 = BatchNorm2d(f"{name}.bn1", mid)
        self.conv2 = Conv2d(f"{name}.conv2", rng, mid, mid, 3, spec.stride, 1)
        self.bn2 = BatchNorm2d(f"{name}.bn2", mid)
        self.conv3 = Conv2d(f"{name}.conv3", rng, mid, spec.out_channels, 1, 1, 0)
        self.bn3 = BatchNorm2d(f"{name}.bn3", spec.out_channels)
        self.proj_conv: Optional[Conv2d] = None
        self.proj_bn: Optional[BatchNorm2d] = None
        if spec.has_projection:
            self.proj_conv = Conv2d(f"{name}.proj_conv", rng, spec.in_channels, spec.out_channels, 1, spec.stride, 0)
            self.proj_bn = BatchNorm2d(f"{name}.proj_bn", spec.out_channels)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        out = relu(self.bn1(self.conv1(x), training))
        out = relu(self.bn2(self.conv2(out), training))
        out = self.bn3(self.conv3(out), training)
        skip = x
        if self.proj_conv is not None:
            skip = self.proj_bn(self.proj_conv(x), training)
        return relu(add(out, skip))

    def _layers(self):
        layers = [self.conv1, self.bn1, self.conv2, self.bn2, self.conv3, self.bn3]
        if self.proj_conv is not None:
            layers += [self.proj_conv, self.proj_bn]
        return layers

    def parameters(self):
        for layer in self._layers():
            yield from layer.parameters()

    def buffers(self):
        for layer in self._layers():
            yield from layer.buffers()


class Head:
    """Per-depth classifier: global average pool + linear."""

    def __init__(self, name: str, rng: np.random.Generator, in_channels: int, num_classes: int) -> None:
        self.fc = Linear(f"{name}.fc", rng, in_channels, num_classes)

    def __call__(self, features: Tensor) -> Tensor:
        return self.fc(global_avg_pool(features))

    def parameters(self):
        yield from self.fc.parameters()

    def buffers(self):
        return iter(())


def _make_block(name: str, rng: np.random.Generator, spec: BlockSpec):
    if spec.kind == "basic":
        return BasicBlock(name, rng, spec)
    return BottleneckBlock(name, rng, spec)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

class DepthPartitionedNetwork:
    """Stem + D_max residual blocks + D_max heads, with an active depth."""

    def __init__(self, arch_id: str, in_channels: int, num_classes: int,
                 width_multiplier: float = 1.0, seed: int = 0) -> None:
        if arch_id not in ARCH_IDS:
            raise ValueError(f"unknown arch_id {arch_id!r}; expected one of {ARCH_IDS}")
        if num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {num_classes}")
        if width_multiplier <= 0:
            raise ValueError(f"width_multiplier must be > 0, got {width_multiplier}")
        self.arch_id = arch_id
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.width_multiplier = width_multiplier
        self.seed = seed

        rng = np.random.default_rng(seed)
        c_stem = stem_channels(arch_id, width_multiplier)
        self.stem_conv = Conv2d("stem.conv", rng, in_channels, c_stem, 3, 1, 1)
        self.stem_bn = BatchNorm2d("stem.bn", c_stem)
        self.block_specs = arch_block_specs(arch_id, c_stem, width_multiplier)
        self.blocks = [_make_block(f"block{i + 1:02d}", rng, spec)
                       for i, spec in enumerate(self.block_specs)]
        self.heads = [Head(f"head{i + 1:02d}", rng, spec.out_channels, num_classes)
                      for i, spec in enumerate(self.block_specs)]
        self.active_depth = self.depth_max

    @property
    def depth_max(self) -> int:
        return len(self.block_specs) if hasattr(self, "block_specs") else 0

    def _check_depth(self, d: int) -> None:
        if not isinstance(d, (int, np.integer)) or not 1 <= d <= self.depth_max:
            raise DepthError(d, self.depth_max)

    def activate_depth(self, d: int) -> None:
        self._check_depth(d)
        self.active_depth = int(d)

    # --- forward passes ---------------------------------------------------

    def _stem(self, x, training: bool) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        return relu(self.stem_bn(self.stem_conv(x), training))

    def forward_at_depth(self, x, d: int, training: bool = False) -> Tensor:
        """Stem -> blocks 1..d -> head d.  Deeper blocks/heads are untouched."""
        self._check_depth(d)
        h = self._stem(x, training)
        for block in self.blocks[:d]:
            h = block(h, training)
        return self.heads[d - 1](h)

    def forward_all_heads(self, x, training: bool = False) -> list[Tensor]:
        """One full-depth trunk pass, returning every head's logits."""
        h = self._stem(x, training)
        logits = []
        for block, head in zip(self.blocks, self.heads):
            h = block(h, training)
            logits.append(head(h))
        return logits

    def block_activations(self, x, d: int, training: bool = False) -> list[Tensor]:
        """Per-block trunk activations for blocks 1..d (instrumentation)."""
        self._check_depth(d)
        h = self._stem(x, training)
        acts = []
        for block in self.blocks[:d]:
            h = block(h, training)
            acts.append(h)
        return acts

    # --- parameter / buffer enumeration -----------------------------------

    def _stem_parameters(self) -> Iterator[Parameter]:
        yield from self.stem_conv.parameters()
        yield from self.stem_bn.parameters()

    def trainable_parameters(self, depth: Optional[int] = None) -> list[Parameter]:
        """Stem + blocks 1..d + head d, for d = depth or the active depth."""
        d = self.active_depth if depth is None else depth
        self._check_depth(d)
        params = list(self._stem_parameters())
        for block in self.blocks[:d]:
            params.extend(block.parameters())
        params.extend(self.heads[d - 1].parameters())
        return params

    def all_parameters(self) -> list[Parameter]:
        params = list(self._stem_parameters())
        for block in self.blocks:
            params.extend(block.parameters())
        for head in self.heads:
            params.extend(head.parameters())
        return params

    def named_parameters(self) -> dict[str, Parameter]:
        out = {}
        for p in self.all_parameters():
            if p.name in out:
                raise ValueError(f"duplicate parameter name {p.name!r}")
            out[p.name] = p
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in [self.stem_bn, *self.blocks]:
            for name, buf in layer.buffers():
                out[name] = buf
        return out

    # --- state snapshot ----------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copies of all parameter values and batch-norm buffers."""
        state = {name: p.value.data.copy() for name, p in self.named_parameters().items()}
        for name, buf in self.named_buffers().items():
            state[name] = buf.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        buffers = self.named_buffers()
        for name, value in state.items():
            if name in params:
                target = params[name].value.data
            elif name in buffers:
                target = buffers[name]
            else:
                raise KeyError(f"unknown state entry {name!r}")
            if target.shape != value.shape:
                raise ValueError(f"shape mismatch for {name!r}: {target.shape} vs {value.shape}")
            target[...] = value

    def __repr__(self) -> str:
        return (f"DepthPartitionedNetwork({self.arch_id}, D_max={self.depth_max}, "
                f"active_depth={self.active_depth}, wm={self.width_multiplier})")


class ExtractedNetwork:
    """Standalone deployable prefix: stem, blocks 1..d, and head d only."""

    def __init__(self, arch_id: str, depth: int, in_channels: int, num_classes: int,
                 width_multiplier: float, stem_conv: Conv2d, stem_bn: BatchNorm2d,
                 blocks: list, head: Head) -> None:
        self.arch_id = arch_id
        self.depth = depth
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.width_multiplier = width_multiplier
        self.stem_conv = stem_conv
        self.stem_bn = stem_bn
        self.blocks = blocks
        self.head = head

    def forward(self, x, training: bool = False) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        h = relu(self.stem_bn(self.stem_conv(x), training))
        for block in self.blocks:
            h = block(h, training)
        return self.head(h)

    __call__ = forward

    def all_parameters(self) -> list[Parameter]:
        params = list(self.stem_conv.parameters()) + list(self.stem_bn.parameters())
        for block in self.blocks:
            params.extend(block.parameters())
        params.extend(self.head.parameters())
        return params

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.all_parameters()}

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in [self.stem_bn, *self.blocks]:
            for name, buf in layer.buffers():
                out[name] = buf
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.value.data.copy() for name, p in self.named_parameters().items()}
        for name, buf in self.named_buffers().items():
            state[name] = buf.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        buffers = self.named_buffers()
        for name, value in state.items():
            if name in params:
                params[name].value.data[...] = value
            elif name in buffers:
                buffers[name][...] = value
            else:
                raise KeyError(f"unknown state entry {name!r}")

    def __repr__(self) -> str:
        return f"ExtractedNetwork({self.arch_id}, depth={self.depth})"


def build_network(arch_id: str, in_channels: int, num_classes: int,
                  width_multiplier: float = 1.0, seed: int = 0) -> DepthPartitionedNetwork:
    """Construct a freshly initialized depth-partitioned network."""
    return DepthPartitionedNetwork(arch_id, in_channels, num_classes, width_multiplier, seed)


def extract_odn(net: DepthPartitionedNetwork, d: int) -> ExtractedNetwork:
    """Deep-copy stem, blocks 1..d, head d (and batch-norm buffers)."""
    net._check_depth(d)
    return ExtractedNetwork(
        arch_id=net.arch_id,
        depth=int(d),
        in_channels=net.in_channels,
        num_classes=net.num_classes,
        width_multiplier=net.width_multiplier,
        stem_conv=copy.deepcopy(net.stem_conv),
        stem_bn=copy.deepcopy(net.stem_bn),
        blocks=copy.deepcopy(net.blocks[:d]),
        head=copy.deepcopy(net.heads[d - 1]),
    )
