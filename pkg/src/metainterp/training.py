"""Meta-training loop, plain pretraining, and fine-tuning baselines.

The meta step is first-order: each task adapts a copy of the parameters on
its wide-gap support triplets (k inner steps at the inner rate), the query
loss is then backpropagated at the adapted parameters only, and the summed
task gradients are applied directly to the shared initialization. No
second derivatives anywhere.

All loops are deterministic under their seed: batches come from one
generator consumed in order and gradients are reduced in fixed task order.
Any non-finite gradient aborts the run.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping

import numpy as np

from .model import ModelParams, charbonnier, make_leaves, predict_tensor
from .tasks import Sequence, Task, Triplet, all_tasks, sample_batch
from .tensor import Tensor, backward_gradients

_OPTIMIZERS = ("sgd", "adamax")


@dataclass(frozen=True)
class AdaptConfig:
    """Inner-loop settings: step size, step count, optimizer kind."""

    inner_lr: float
    steps: int = 1
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.inner_lr < 0:
            raise ValueError(f"inner_lr must be >= 0, got {self.inner_lr}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.optimizer not in _OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {_OPTIMIZERS}")


@dataclass(frozen=True)
class MetaConfig:
    """Outer-loop settings: meta rate, batch size, plateau-decay schedule."""

    outer_lr: float
    outer_steps: int
    batch: int = 4
    seed: int = 0
    val_interval: int = 50
    patience: int = 20
    decay_factor: float = 5.0

    def __post_init__(self):
        if self.outer_lr <= 0:
            raise ValueError(f"outer_lr must be > 0, got {self.outer_lr}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.decay_factor <= 1:
            raise ValueError(f"decay_factor must be > 1, got {self.decay_factor}")
        if self.outer_steps < 0 or self.val_interval < 1 or self.patience < 1:
            raise ValueError("outer_steps >= 0, val_interval >= 1, patience >= 1 required")


@dataclass
class TrainReport:
    """Per-step outer losses, validation curve, decay events, wall time."""

    outer_losses: list = field(default_factory=list)  # loss at step index i+1
    val_points: list = field(default_factory=list)  # (step, mean val loss)
    lr_events: list = field(default_factory=list)  # (step, new outer lr)
    wall_time_s: float = 0.0

    def to_csv(self, path) -> None:
        vals = dict(self.val_points)
        lrs = dict(self.lr_events)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("step,outer_loss,val_loss,beta\n")
            beta = lrs.get(0)
            for i, loss in enumerate(self.outer_losses, start=1):
                beta = lrs.get(i, beta)
                val = f"{vals[i]:.12g}" if i in vals else ""
                lr = f"{beta:.12g}" if beta is not None else ""
                fh.write(f"{i},{loss:.12g},{val},{lr}\n")


class Adamax:
    """Adamax optimizer (infinity-norm Adam variant). State starts at zero."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._u: dict[str, np.ndarray] = {}

    def step(
        self, tensors: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]
    ) -> dict[str, np.ndarray]:
        self.t += 1
        correction = 1.0 - self.beta1**self.t
        out: dict[str, np.ndarray] = {}
        for name, theta in tensors.items():
            g = grads[name]
            m = self.beta1 * self._m.get(name, 0.0) + (1.0 - self.beta1) * g
            u = np.maximum(self.beta2 * self._u.get(name, 0.0), np.abs(g))
            self._m[name] = m
            self._u[name] = u
            out[name] = theta - (self.lr / correction) * m / (u + self.eps)
        return out


def _sgd_step(
    tensors: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float
) -> dict[str, np.ndarray]:
    return {name: tensors[name] - lr * grads[name] for name in tensors}


def _check_finite(grads: Mapping[str, np.ndarray], context: str) -> None:
    bad = [name for name, g in grads.items() if not np.isfinite(g).all()]
    if bad:
        raise RuntimeError(f"non-finite gradient during {context}: {', '.join(bad)}")


def _sum_grads(acc: dict | None, grads: Mapping[str, np.ndarray]) -> dict:
    if acc is None:
        return dict(grads)
    return {name: acc[name] + grads[name] for name in acc}


def triplet_loss(leaves: Mapping[str, Tensor], arch, triplet: Triplet) -> Tensor:
    pred = predict_tensor(leaves, arch, triplet.input_a, triplet.input_b)
    return charbonnier(pred, triplet.target)


def stacked_loss(
    leaves: Mapping[str, Tensor], arch, triplets: tuple[Triplet, ...]
) -> Tensor:
    """Sum of per-triplet losses; same-shape triplets run as one batch."""
    if len(triplets) == 1:
        return triplet_loss(leaves, arch, triplets[0])
    if len({t.input_a.shape for t in triplets}) == 1:
        ia = np.stack([t.input_a for t in triplets])
        ib = np.stack([t.input_b for t in triplets])
        target = np.stack([t.target for t in triplets])
        # Mean over the stack times B equals the sum of per-frame means.
        return charbonnier(predict_tensor(leaves, arch, ia, ib), target) * float(
            len(triplets)
        )
    total = None
    for t in triplets:
        loss = triplet_loss(leaves, arch, t)
        total = loss if total is None else total + loss
    return total


def _triplets_gradient(
    params: ModelParams, triplets: Iterable[Triplet], context: str
) -> tuple[dict[str, np.ndarray], float]:
    """Gradient of the summed triplet loss at the given parameters."""
    triplets = tuple(triplets)
    if not triplets:
        raise ValueError(f"{context}: no triplets given")
    leaves = make_leaves(params)
    loss = stacked_loss(leaves, params.arch, triplets)
    grads = backward_gradients(loss, leaves)
    _check_finite(grads, context)
    return grads, loss.item()


def adapt_params(
    params: ModelParams, triplets: tuple[Triplet, ...], cfg: AdaptConfig
) -> ModelParams:
    """k optimizer steps on the summed triplet loss; returns a fresh copy."""
    if cfg.steps == 0 or cfg.inner_lr == 0.0:
        return params.clone()
    opt = Adamax(cfg.inner_lr) if cfg.optimizer == "adamax" else None
    tensors = params.tensors
    for _ in range(cfg.steps):
        grads, _ = _triplets_gradient(params.replaced(tensors), triplets, "adaptation")
        if opt is not None:
            tensors = opt.step(tensors, grads)
        else:
            tensors = _sgd_step(tensors, grads, cfg.inner_lr)
    return params.replaced(tensors)


def inner_adapt(params: ModelParams, task: Task, cfg: AdaptConfig) -> ModelParams:
    """Adapt to one task on its wide-gap support triplets."""
    return adapt_params(params, task.support, cfg)


def inner_loss_value(params: ModelParams, task: Task) -> float:
    """Support loss (sum over the two wide-gap triplets) without a tape."""
    leaves = make_leaves(params, requires_grad=False)
    return stacked_loss(leaves, params.arch, task.support).item()


def query_loss_value(params: ModelParams, task: Task) -> float:
    leaves = make_leaves(params, requires_grad=False)
    return triplet_loss(leaves, params.arch, task.query).item()


def outer_step(
    params: ModelParams, batch: list[Task], acfg: AdaptConfig, mcfg: MetaConfig
) -> tuple[ModelParams, float]:
    """One first-order meta-update over a task batch.

    Per task: adapt, evaluate the query loss at the adapted parameters,
    backpropagate there. Task gradients are summed (not averaged) and
    applied to the incoming parameters with the outer rate.
    """
    if not batch:
        raise ValueError("outer_step: empty task batch")
    total: dict | None = None
    loss_sum = 0.0
    for task in batch:
        adapted = inner_adapt(params, task, acfg)
        grads, loss = _triplets_gradient(adapted, (task.query,), "outer step")
        total = _sum_grads(total, grads)
        loss_sum += loss
    return params.replaced(_sgd_step(params.tensors, total, mcfg.outer_lr)), loss_sum


def validation_loss(params: ModelParams, val_tasks: list[Task], acfg: AdaptConfig) -> float:
    """Mean post-adaptation query loss over held-out tasks."""
    if not val_tasks:
        raise ValueError("validation task set is empty")
    total = 0.0
    for task in val_tasks:
        adapted = inner_adapt(params, task, acfg)
        total += query_loss_value(adapted, task)
    return total / len(val_tasks)


def meta_train(
    init: ModelParams,
    train_seqs: list[Sequence],
    val_seqs: list[Sequence],
    acfg: AdaptConfig,
    mcfg: MetaConfig,
    log: Callable[[str], None] | None = None,
) -> tuple[ModelParams, TrainReport]:
    """Meta-train until the step budget runs out.

    Every `val_interval` steps the mean post-adaptation loss on the
    validation tasks is measured; after `patience` consecutive evaluations
    without improvement the outer rate is divided by `decay_factor`.
    """
    if not train_seqs or not val_seqs:
        raise ValueError("training and validation datasets must be non-empty")
    started = time.perf_counter()
    rng = np.random.default_rng(mcfg.seed)
    val_tasks = all_tasks(val_seqs)
    report = TrainReport(lr_events=[(0, mcfg.outer_lr)])
    params = init.clone()
    beta = mcfg.outer_lr
    best_val = float("inf")
    stale = 0
    for step in range(1, mcfg.outer_steps + 1):
        batch = sample_batch(train_seqs, mcfg.batch, rng)
        params, outer_loss = outer_step(params, batch, acfg, replace(mcfg, outer_lr=beta))
        report.outer_losses.append(outer_loss)
        if step % mcfg.val_interval == 0:
            val = validation_loss(params, val_tasks, acfg)
            report.val_points.append((step, val))
            if val < best_val:
                best_val = val
                stale = 0
            else:
                stale += 1
                if stale >= mcfg.patience:
                    beta = beta / mcfg.decay_factor
                    report.lr_events.append((step, beta))
                    stale = 0
            if log:
                log(f"step {step}: outer {outer_loss:.6f}  val {val:.6f}  lr {beta:.3g}")
    report.wall_time_s = time.perf_counter() - started
    return params, report


def pretrain(
    init: ModelParams,
    triplets: list[Triplet],
    lr: float,
    steps: int,
    batch: int = 4,
    seed: int = 0,
    optimizer: str = "adamax",
) -> ModelParams:
    """Conventional supervised training on narrow-gap triplets."""
    if not triplets:
        raise ValueError("pretrain: empty triplet dataset")
    if optimizer not in _OPTIMIZERS:
        raise ValueError(f"optimizer must be one of {_OPTIMIZERS}")
    rng = np.random.default_rng(seed)
    opt = Adamax(lr) if optimizer == "adamax" else None
    params = init.clone()
    take = min(batch, len(triplets))
    for _ in range(steps):
        picks = rng.choice(len(triplets), size=take, replace=False)
        chosen = [triplets[int(p)] for p in picks]
        grads, _ = _triplets_gradient(params, chosen, "pretraining")
        tensors = opt.step(params.tensors, grads) if opt else _sgd_step(
            params.tensors, grads, lr
        )
        params = params.replaced(tensors)
    return params


def retrain(
    params: ModelParams,
    seqs: list[Sequence],
    lr: float,
    steps: int,
    batch: int = 4,
    seed: int = 0,
    optimizer: str = "sgd",
) -> ModelParams:
    """Joint fine-tuning on the meta-training corpus, no inner/outer split.

    Samples task batches exactly like meta_train and steps on the summed
    query loss at the current parameters; with the sgd optimizer this is
    bit-identical to meta-training with a zero inner rate.
    """
    if not seqs:
        raise ValueError("retrain: empty dataset")
    if optimizer not in _OPTIMIZERS:
        raise ValueError(f"optimizer must be one of {_OPTIMIZERS}")
    rng = np.random.default_rng(seed)
    opt = Adamax(lr) if optimizer == "adamax" else None
    current = params.clone()
    for _ in range(steps):
        tasks = sample_batch(seqs, batch, rng)
        total: dict | None = None
        for task in tasks:
            grads, _ = _triplets_gradient(current, (task.query,), "retraining")
            total = _sum_grads(total, grads)
        tensors = opt.step(current.tensors, total) if opt else _sgd_step(
            current.tensors, total, lr
        )
        current = current.replaced(tensors)
    return current


def _wide_triplets(frames: Sequence) -> tuple[Triplet, ...]:
    """Wide-gap triplets from consecutive low-frame-rate frames."""
    if len(frames) < 3:
        raise ValueError(
            "test-time fine-tuning needs at least 3 frames "
            f"(got {len(frames)}); shorter inputs carry no training signal"
        )
    count = 2 if len(frames) >= 4 else 1
    return tuple(
        Triplet(frames[j], frames[j + 1], frames[j + 2], gap=2) for j in range(count)
    )


def naive_finetune(
    params: ModelParams,
    frames: Sequence,
    lr: float,
    steps: int,
    optimizer: str = "adamax",
    on_step: Callable[[int, ModelParams], None] | None = None,
) -> tuple[ModelParams, list[float]]:
    """Plain repeated fine-tuning on a window's own wide-gap triplets.

    Returns the final parameters and the support-loss curve, one entry per
    visited parameter state (steps + 1 values). `on_step(i, params)` is
    invoked at the same states, i = 0 being the unmodified input.
    """
    if optimizer not in _OPTIMIZERS:
        raise ValueError(f"optimizer must be one of {_OPTIMIZERS}")
    triplets = _wide_triplets(frames)
    opt = Adamax(lr) if optimizer == "adamax" else None
    current = params.clone()
    losses: list[float] = []
    for i in range(steps + 1):
        if on_step:
            on_step(i, current)
        if i == steps:
            leaves = make_leaves(current, requires_grad=False)
            losses.append(stacked_loss(leaves, current.arch, triplets).item())
            break
        grads, loss = _triplets_gradient(current, triplets, "naive fine-tuning")
        losses.append(loss)
        tensors = opt.step(current.tensors, grads) if opt else _sgd_step(
            current.tensors, grads, lr
        )
        current = current.replaced(tensors)
    return current, losses


def narrow_triplets(seqs: list[Sequence]) -> list[Triplet]:
    """Every consecutive gap-1 triplet from full-rate sequences."""
    out = []
    for seq in seqs:
        out.extend(
            Triplet(seq[i], seq[i + 1], seq[i + 2], gap=1) for i in range(len(seq) - 2)
        )
    return out
