"""Progressive depth-expansion training: warm-up, search, fine-tuning.

The search trains the network's shallowest prefix to convergence, then
appends one block at a time (each time restarting from the warmed-up
snapshot) until the best validation accuracy reaches the target or the final
depth is exhausted.  Convergence of a depth is declared after 23 consecutive
epochs without a strict validation improvement, with the learning rate cut
to 60% of its value after every 5 such epochs.

All training is seeded and single-threaded, so a full run is reproducible
bit for bit.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .data import Dataset, augment_crop_flip, batches
from .network import DepthPartitionedNetwork, build_network
from .tensor import OptimizerConfig, Tensor, add, cross_entropy, mul, sgd_step, zero_grads


class Action(enum.Enum):
    CONTINUE = "continue"
    DECAY_LR = "decay_lr"
    CONVERGED = "converged"


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, depth: int, epoch: int, batch: int) -> None:
        self.depth, self.epoch, self.batch = depth, epoch, batch
        super().__init__(f"non-finite loss at depth {depth}, epoch {epoch}, batch {batch}")


@dataclass
class SearchConfig:
    """All hyperparameters of the depth search."""

    target_accuracy: float = 0.9
    initial_depth: int = 1
    final_depth: int = 8
    warmup_epochs: int = 3
    warmup_lr: float = 0.01
    base_lr: float = 0.1
    stop_epochs: int = 23
    lr_decay_factor: float = 0.6
    lr_decay_interval: int = 5
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 128
    seed: int = 0
    max_epochs_per_depth: int = 200
    eval_batch_size: int = 256
    augment: bool = False

    def __post_init__(self) -> None:
        if self.initial_depth < 1 or self.initial_depth > self.final_depth:
            raise ValueError(f"need 1 <= initial_depth <= final_depth, got "
                             f"{self.initial_depth}..{self.final_depth}")
        if not 0.0 < self.lr_decay_factor < 1.0:
            raise ValueError(f"lr_decay_factor must be in (0, 1), got {self.lr_decay_factor}")
        if self.lr_decay_interval < 1 or self.lr_decay_interval > self.stop_epochs:
            raise ValueError("need 1 <= lr_decay_interval <= stop_epochs")
        for attr in ("warmup_lr", "base_lr"):
            if getattr(self, attr) <= 0:
                raise ValueError(f"{attr} must be > 0")
        for attr in ("stop_epochs", "batch_size", "max_epochs_per_depth"):
            if getattr(self, attr) < 1:
                raise ValueError(f"{attr} must be >= 1")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")

    def validate_for(self, net: DepthPartitionedNetwork) -> None:
        if self.final_depth > net.depth_max:
            raise ValueError(f"final_depth {self.final_depth} exceeds D_max {net.depth_max}")


@dataclass
class ConvergenceTracker:
    """Best/current validation accuracy and the no-improvement counter."""

    current_lr: float
    best_accuracy: float = 0.0
    current_accuracy: float = 0.0
    no_improve_epochs: int = 0


def observe_epoch(tracker: ConvergenceTracker, val_accuracy: float,
                  config: SearchConfig) -> Action:
    """Feed one epoch's validation accuracy into the stopping criterion.

    A strict improvement resets the counter; otherwise the counter advances,
    the learning rate decays at every full decay interval, and convergence
    fires when the counter reaches ``stop_epochs``.
    """
    tracker.current_accuracy = val_accuracy
    if val_accuracy > tracker.best_accuracy:
        tracker.best_accuracy = val_accuracy
        tracker.no_improve_epochs = 0
        return Action.CONTINUE
    tracker.no_improve_epochs += 1
    if tracker.no_improve_epochs == config.stop_epochs:
        return Action.CONVERGED
    if tracker.no_improve_epochs % config.lr_decay_interval == 0:
        tracker.current_lr *= config.lr_decay_factor
        return Action.DECAY_LR
    return Action.CONTINUE


@dataclass
class EpochRecord:
    """One row of training telemetry, consumed by metrics sinks."""

    phase: str  # warmup | search | finetune
    depth: int
    epoch: int
    train_loss: float
    val_accuracy: float
    val_loss: float
    lr: float
    seconds: float


MetricsSink = Callable[[EpochRecord], None]


@dataclass
class DepthHistory:
    depth: int
    epochs_trained: int
    best_val_accuracy: float
    lr_trace: list[float]


@dataclass
class SearchResult:
    optimal_depth: int
    target_reached: bool
    per_depth_history: list[DepthHistory]
    total_epochs: int


@dataclass
class DepthTrainResult:
    best_accuracy: float
    epochs_used: int
    lr_trace: list[float]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(net, dataset: Dataset, depth: Optional[int] = None,
             batch_size: int = 256) -> tuple[float, float]:
    """Eval-mode accuracy and mean cross-entropy at a depth (deterministic order).

    Works on both depth-partitioned and extracted networks; extracted networks
    ignore ``depth``.
    """
    correct = 0
    loss_sum = 0.0
    for x, y in batches(dataset, batch_size):
        if depth is not None and hasattr(net, "forward_at_depth"):
            logits = net.forward_at_depth(x, depth, training=False)
        else:
            logits = net.forward(x, training=False)
        pred = logits.data.argmax(axis=1)
        correct += int((pred == y).sum())
        loss_sum += cross_entropy(logits, y).item() * len(y)
    n = len(dataset)
    return correct / n, loss_sum / n


# ---------------------------------------------------------------------------
# warm-up
# ---------------------------------------------------------------------------

def warmup(net: DepthPartitionedNetwork, train_data: Dataset, config: SearchConfig,
           sink: Optional[MetricsSink] = None,
           val_data: Optional[Dataset] = None) -> dict[str, np.ndarray]:
    """Train every depth level for a few epochs at a small learning rate.

    The loss is the mean of the cross-entropies of all D_max heads, so every
    block and every head receives gradient.  Returns the warmed-up snapshot
    of all parameters and batch-norm buffers (momentum buffers excluded).
    """
    params = net.all_parameters()
    for p in params:
        p.reset_momentum()
    opt = replace(config.optimizer, learning_rate=config.warmup_lr)
    d_max = net.depth_max
    for epoch in range(1, config.warmup_epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for batch_idx, (x, y) in enumerate(
                batches(train_data, config.batch_size, (config.seed, 0), epoch - 1)):
            if config.augment:
                x = augment_crop_flip(x, np.random.default_rng([config.seed, 0, epoch, batch_idx]))
            zero_grads(params)
            head_losses = [cross_entropy(logits, y) for logits in net.forward_all_heads(x, training=True)]
            total = head_losses[0]
            for hl in head_losses[1:]:
                total = add(total, hl)
            mean_loss = _scale(total, 1.0 / d_max)
            value = mean_loss.item()
            if not np.isfinite(value):
                raise DivergenceError(d_max, epoch, batch_idx)
            losses.append(value)
            mean_loss.backward()
            sgd_step(params, opt)
        if sink is not None:
            val_acc, val_loss = (evaluate(net, val_data, d_max, config.eval_batch_size)
                                 if val_data is not None else (0.0, 0.0))
            sink(EpochRecord("warmup", d_max, epoch, float(np.mean(losses)),
                             val_acc, val_loss, config.warmup_lr,
                             time.perf_counter() - t0))
    return net.state_dict()


def _scale(t, factor: float):
    # scalar multiply without a dedicated op: mul against a constant tensor
    return mul(t, Tensor(np.full(t.shape, factor, dtype=t.data.dtype)))


# ---------------------------------------------------------------------------
# per-depth training
# ---------------------------------------------------------------------------

def train_depth_to_convergence(net: DepthPartitionedNetwork, depth: int,
                               train_data: Dataset, val_data: Dataset,
                               config: SearchConfig,
                               sink: Optional[MetricsSink] = None,
                               phase: str = "search",
                               target: Optional[float] = None,
                               seed_slot: Optional[int] = None,
                               initial_best: Optional[float] = None) -> DepthTrainResult:
    """Mini-batch SGD on the head-``depth`` loss until the stopping criterion
    fires, the target accuracy is reached, or the epoch safety bound is hit.

    The network is left holding the best-validation snapshot.  The optimizer
    starts fresh (momentum buffers cleared, lr = base_lr).
    """
    net.activate_depth(depth)
    params = net.trainable_parameters(depth)
    for p in params:
        p.reset_momentum()
    tracker = ConvergenceTracker(current_lr=config.base_lr)
    lr_trace = [config.base_lr]
    best_state: Optional[dict[str, np.ndarray]] = None
    if initial_best is not None:
        # Baseline from a previous phase: keep it unless strictly beaten.
        tracker.best_accuracy = initial_best
        best_state = net.state_dict()
    slot = depth if seed_slot is None else seed_slot
    epochs_used = 0

    for epoch in range(1, config.max_epochs_per_depth + 1):
        t0 = time.perf_counter()
        opt = replace(config.optimizer, learning_rate=tracker.current_lr)
        losses = []
        for batch_idx, (x, y) in enumerate(
                batches(train_data, config.batch_size, (config.seed, slot), epoch - 1)):
            if config.augment:
                x = augment_crop_flip(x, np.random.default_rng([config.seed, slot, epoch, batch_idx]))
            zero_grads(params)
            loss = cross_entropy(net.forward_at_depth(x, depth, training=True), y)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(depth, epoch, batch_idx)
            losses.append(value)
            loss.backward()
            sgd_step(params, opt)
        epochs_used = epoch
        val_acc, val_loss = evaluate(net, val_data, depth, config.eval_batch_size)
        prev_best = tracker.best_accuracy
        action = observe_epoch(tracker, val_acc, config)
        if val_acc > prev_best:
            best_state = net.state_dict()
        if action is Action.DECAY_LR:
            lr_trace.append(tracker.current_lr)
        if sink is not None:
            sink(EpochRecord(phase, depth, epoch, float(np.mean(losses)),
                             val_acc, val_loss, opt.learning_rate,
                             time.perf_counter() - t0))
        if target is not None and tracker.best_accuracy >= target:
            break
        if action is Action.CONVERGED:
            break

    if best_state is not None:
        net.load_state_dict(best_state)
    return DepthTrainResult(tracker.best_accuracy, epochs_used, lr_trace)


# ---------------------------------------------------------------------------
# the search loop and fine-tuning
# ---------------------------------------------------------------------------

def _reinit_block(net: DepthPartitionedNetwork, depth: int, seed: int) -> None:
    """Ablation path: freshly re-initialize block `depth` and head `depth`."""
    donor = build_network(net.arch_id, net.in_channels, net.num_classes,
                          net.width_multiplier, seed=seed)
    state = net.state_dict()
    prefix_block = f"block{depth:02d}."
    prefix_head = f"head{depth:02d}."
    for name, value in donor.state_dict().items():
        if name.startswith(prefix_block) or name.startswith(prefix_head):
            state[name] = value
    net.load_state_dict(state)


def search(net: DepthPartitionedNetwork, train_data: Dataset, val_data: Dataset,
           config: SearchConfig, warm_snapshot: dict[str, np.ndarray],
           sink: Optional[MetricsSink] = None,
           expand_mode: str = "warm",
           depth_callback: Optional[Callable[[int, DepthPartitionedNetwork, float], None]] = None
           ) -> SearchResult:
    """Progressive depth expansion from ``initial_depth`` to ``final_depth``.

    ``expand_mode`` is "warm" (restore the warmed-up snapshot at every depth
    increment) or "reinit_new" (keep trained shallower blocks, randomly
    re-initialize the newly appended block and head — the warm-up ablation).
    Stops at the first depth whose best validation accuracy reaches the
    target; if none does, returns final_depth with ``target_reached=False``.
    """
    if expand_mode not in ("warm", "reinit_new"):
        raise ValueError(f"unknown expand_mode {expand_mode!r}")
    config.validate_for(net)
    history: list[DepthHistory] = []
    total_epochs = 0
    for d in range(config.initial_depth, config.final_depth + 1):
        if expand_mode == "warm" or d == config.initial_depth:
            net.load_state_dict(warm_snapshot)
        else:
            _reinit_block(net, d, seed=config.seed + 7919 * d)
        result = train_depth_to_convergence(net, d, train_data, val_data, config,
                                            sink=sink, phase="search",
                                            target=config.target_accuracy)
        total_epochs += result.epochs_used
        history.append(DepthHistory(d, result.epochs_used, result.best_accuracy,
                                    result.lr_trace))
        if depth_callback is not None:
            depth_callback(d, net, result.best_accuracy)
        if result.best_accuracy >= config.target_accuracy:
            return SearchResult(d, True, history, total_epochs)
    return SearchResult(config.final_depth, False, history, total_epochs)


def finetune(net: DepthPartitionedNetwork, depth: int, train_data: Dataset,
             val_data: Dataset, config: SearchConfig,
             sink: Optional[MetricsSink] = None) -> float:
    """Continue training at a fixed depth until the stopping criterion fires.

    Starts from whatever the network currently holds (normally the search's
    best snapshot for this depth), with a fresh tracker and lr reset to
    base_lr.  Returns the best validation accuracy observed.
    """
    baseline_acc, _ = evaluate(net, val_data, depth, config.eval_batch_size)
    result = train_depth_to_convergence(net, depth, train_data, val_data, config,
                                        sink=sink, phase="finetune", target=None,
                                        seed_slot=depth + net.depth_max,
                                        initial_best=baseline_acc)
    return result.best_accuracy
