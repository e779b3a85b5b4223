"""PSNR metric and the comparison/ablation/feasibility harnesses.

PSNR is computed on clamped float frames (never on quantized files) with a
100 dB cap standing in for the infinite value of identical frames;
aggregate means use the capped value. Every harness is a pure function of
its inputs, so CSVs are byte-identical across reruns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ModelParams, forward
from .tasks import Sequence, Task
from .tensor import ShapeError
from .training import AdaptConfig, inner_adapt, naive_finetune

PSNR_CAP_DB = 100.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for frames in [0, 1] (MAX = 1).

    Values are clamped to [0, 1] first; identical frames hit the 100 dB cap.
    """
    if a.shape != b.shape:
        raise ShapeError(f"psnr: frame shapes {a.shape} and {b.shape} differ")
    ac = np.clip(a, 0.0, 1.0)
    bc = np.clip(b, 0.0, 1.0)
    mse = float(np.mean((ac - bc) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


@dataclass(frozen=True)
class MetricRow:
    method: str
    condition: str
    sequence: str
    psnr_db: float


def evaluate_task(params: ModelParams, task: Task, acfg: AdaptConfig | None = None) -> float:
    """Query-frame PSNR, optionally after adapting on the support triplets."""
    current = inner_adapt(params, task, acfg) if acfg is not None else params
    pred = forward(current, task.query.input_a, task.query.input_b)
    return psnr(pred, task.query.target)


def mean_psnr(params: ModelParams, tasks: list[Task], acfg: AdaptConfig | None = None) -> float:
    if not tasks:
        raise ValueError("empty task set")
    return sum(evaluate_task(params, t, acfg) for t in tasks) / len(tasks)


def compare_modes(
    baseline: ModelParams,
    retrained: ModelParams,
    meta: ModelParams,
    tasks: list[Task],
    acfg: AdaptConfig,
    condition: str = "synthetic",
) -> list[MetricRow]:
    """Three-way comparison: plain checkpoints unadapted, meta with adaptation."""
    if not tasks:
        raise ValueError("compare_modes: empty test set")
    if not (baseline.arch == retrained.arch == meta.arch):
        raise ValueError("compare_modes: checkpoints have mismatched architectures")
    rows: list[MetricRow] = []
    for label, params, cfg in (
        ("baseline", baseline, None),
        ("retrained", retrained, None),
        ("meta", meta, acfg),
    ):
        for task in tasks:
            rows.append(
                MetricRow(label, condition, task.source, evaluate_task(params, task, cfg))
            )
    return rows


def write_rows(path, rows: list[MetricRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# psnr_db capped at {PSNR_CAP_DB:g} dB (identical frames)\n")
        fh.write("method,condition,sequence,psnr_db\n")
        for r in rows:
            fh.write(f"{r.method},{r.condition},{r.sequence},{r.psnr_db:.6f}\n")


def ablate_inner_steps(
    meta: ModelParams,
    retrained: ModelParams,
    tasks: list[Task],
    inner_lr: float,
    ks: tuple[int, ...] = (0, 1, 2, 3, 5),
    optimizer: str = "sgd",
) -> dict[str, list[float]]:
    """Mean PSNR per adaptation-step count for both checkpoints.

    The k = 0 column is the unadapted evaluation of each checkpoint, i.e.
    the retrained row starts at the plain retrained score. The gain row is
    meta minus naive per column.
    """
    if not tasks:
        raise ValueError("ablate_inner_steps: empty test set")
    grid: dict[str, list[float]] = {"naive_finetune": [], "meta": []}
    for k in ks:
        cfg = AdaptConfig(inner_lr=inner_lr, steps=k, optimizer=optimizer)
        grid["naive_finetune"].append(mean_psnr(retrained, tasks, cfg))
        grid["meta"].append(mean_psnr(meta, tasks, cfg))
    grid["gain"] = [m - n for m, n in zip(grid["meta"], grid["naive_finetune"])]
    return grid


def write_k_grid(path, ks: tuple[int, ...], grid: dict[str, list[float]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("method," + ",".join(f"k={k}" for k in ks) + "\n")
        for method in ("naive_finetune", "meta", "gain"):
            cells = ",".join(f"{v:.6f}" for v in grid[method])
            fh.write(f"{method},{cells}\n")


def ablate_lr(
    checkpoints: list[tuple[float, ModelParams]],
    tasks: list[Task],
    steps: int = 1,
    optimizer: str = "sgd",
) -> list[tuple[float, float]]:
    """Mean PSNR per inner rate; each checkpoint adapts at its own rate.

    A zero rate evaluates unadapted, which is the retrained setting.
    """
    if not tasks:
        raise ValueError("ablate_lr: empty test set")
    out = []
    for rate, params in checkpoints:
        cfg = (
            AdaptConfig(inner_lr=rate, steps=steps, optimizer=optimizer)
            if rate > 0
            else None
        )
        out.append((rate, mean_psnr(params, tasks, cfg)))
    return out


def write_lr_row(path, cells: list[tuple[float, float]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(f"alpha={rate:g}" for rate, _ in cells) + "\n")
        fh.write(",".join(f"{v:.6f}" for _, v in cells) + "\n")


def feasibility_curve(
    params: ModelParams,
    seq: Sequence,
    lr: float,
    steps: int = 200,
    optimizer: str = "adamax",
) -> list[float]:
    """PSNR change on the held-out middle while naively fine-tuning.

    The sequence must be full rate with >= 7 frames; frames 0/2/4/6 act as
    the low-frame-rate input and frame 3 as the hidden middle. Entry i is
    the PSNR delta after i update steps (entry 0 is exactly 0).
    """
    if len(seq) < 7:
        raise ValueError(f"feasibility needs a 7-frame sequence, got {len(seq)}")
    low_fps = [seq[0], seq[2], seq[4], seq[6]]
    held_out = seq[3]
    series: list[float] = []

    def record(_step: int, current: ModelParams) -> None:
        series.append(psnr(forward(current, seq[2], seq[4]), held_out))

    naive_finetune(params, low_fps, lr, steps, optimizer=optimizer, on_step=record)
    return [v - series[0] for v in series]


def write_series(path, series: list[float]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("step,delta_psnr_db\n")
        for i, v in enumerate(series):
            fh.write(f"{i},{v:.6f}\n")
