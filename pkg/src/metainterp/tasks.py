"""Adaptation tasks, synthetic sequences, and frame-file ingestion.

A task is cut from a 7-frame window: the support set holds the two
wide-gap triplets built from frames {1,3,5,7} of the window, the query set
the narrow-gap triplet around the true middle frame. Support gaps are
always twice the query gap, so adaptation happens on harder, larger-motion
examples than the one being scored.

Everything here is a pure function; sequences and frames are shared
read-only.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ppm

Frame = np.ndarray  # (C, H, W) float64 in [0, 1]
Sequence = list  # list[Frame], uniform shape

WINDOW = 7  # frames consumed per task

FRAME_NAME = "%06d.ppm"


@dataclass(frozen=True)
class Triplet:
    """Two input frames and the ground-truth frame between them."""

    input_a: Frame
    target: Frame
    input_b: Frame
    gap: int  # temporal stride between input_a and target

    def __post_init__(self):
        if self.gap < 1:
            raise ValueError(f"triplet gap must be >= 1, got {self.gap}")
        if not (self.input_a.shape == self.target.shape == self.input_b.shape):
            raise ValueError("triplet frames differ in shape")


@dataclass(frozen=True)
class Task:
    """Support: two wide-gap triplets. Query: one narrow-gap triplet."""

    support: tuple[Triplet, Triplet]
    query: Triplet
    source: str = ""


def make_task(seq: Sequence, anchor: int, source: str = "") -> Task:
    """Build the task whose window starts at `anchor` (0-based).

    With window frames w0..w6 the support triplets are (w0, w2, w4) and
    (w2, w4, w6), each gap 2; the query triplet is (w2, w3, w4), gap 1.
    """
    if anchor < 0 or anchor + WINDOW > len(seq):
        raise ValueError(
            f"window needs {WINDOW} frames starting at {anchor}, "
            f"sequence has only {len(seq)}"
        )
    w = seq[anchor : anchor + WINDOW]
    support = (
        Triplet(w[0], w[2], w[4], gap=2),
        Triplet(w[2], w[4], w[6], gap=2),
    )
    query = Triplet(w[2], w[3], w[4], gap=1)
    return Task(support=support, query=query, source=f"{source}@{anchor}")


def task_windows(seqs: list[Sequence]) -> list[tuple[int, int]]:
    """All (sequence index, anchor) pairs admitting a full window."""
    return [
        (i, a) for i, seq in enumerate(seqs) for a in range(len(seq) - WINDOW + 1)
    ]


def all_tasks(seqs: list[Sequence], names: list[str] | None = None) -> list[Task]:
    wins = task_windows(seqs)
    return [
        make_task(seqs[i], a, source=names[i] if names else str(i)) for i, a in wins
    ]


def sample_batch(seqs: list[Sequence], batch: int, rng: np.random.Generator) -> list[Task]:
    """Uniform draw over (sequence, anchor) windows, without replacement.

    Deterministic for a given generator state.
    """
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    if not seqs:
        raise ValueError("dataset is empty")
    wins = task_windows(seqs)
    if batch > len(wins):
        raise ValueError(f"batch {batch} exceeds the {len(wins)} available windows")
    picks = rng.choice(len(wins), size=batch, replace=False)
    return [make_task(seqs[i], a, source=str(i)) for i, a in (wins[p] for p in picks)]


# -- synthetic sequences ------------------------------------------------------


def _lowpass_texture(rng: np.random.Generator, channels: int, h: int, w: int,
                     smoothness: float) -> np.ndarray:
    """Band-limited noise on the torus, normalized per channel to [0, 1]."""
    noise = rng.standard_normal((channels, h, w))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    keep = np.exp(-2.0 * (np.pi * smoothness) ** 2 * (fy * fy + fx * fx))
    tex = np.fft.irfft2(np.fft.rfft2(noise) * keep, s=(h, w))
    lo = tex.min(axis=(1, 2), keepdims=True)
    hi = tex.max(axis=(1, 2), keepdims=True)
    return (tex - lo) / (hi - lo)


def _shift_wrap(tex: np.ndarray, sy: float, sx: float) -> np.ndarray:
    """Move texture content by (sy, sx) pixels with toroidal wrap (bilinear)."""
    y0, x0 = int(np.floor(sy)), int(np.floor(sx))
    fy, fx = sy - y0, sx - x0
    a = np.roll(tex, (y0, x0), axis=(1, 2))
    if fy == 0.0 and fx == 0.0:
        return a
    b = np.roll(tex, (y0 + 1, x0), axis=(1, 2))
    c = np.roll(tex, (y0, x0 + 1), axis=(1, 2))
    d = np.roll(tex, (y0 + 1, x0 + 1), axis=(1, 2))
    return (
        (1 - fy) * (1 - fx) * a + fy * (1 - fx) * b + (1 - fy) * fx * c + fy * fx * d
    )


def synth_sequence(
    texture_seed: int,
    velocity: tuple[float, float],
    length: int = WINDOW,
    size: tuple[int, int] = (32, 32),
    channels: int = 3,
    smoothness: float = 1.5,
) -> Sequence:
    """Frames of a random smooth texture translating at `velocity` (dx, dy).

    Frame t samples the base texture at offset t*(dx, dy) with toroidal
    wrap, so every intermediate frame is exact by construction: the ideal
    interpolation of frames t and t+2 is frame t+1 itself.
    """
    dx, dy = velocity
    h, w = size
    if h % 4 or w % 4:
        raise ValueError(f"frame size {h}x{w} must be divisible by 4")
    limit = h / 8.0
    if abs(dx) > limit or abs(dy) > limit:
        raise ValueError(f"velocity {velocity} exceeds the +/-{limit} px/frame limit")
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    rng = np.random.default_rng(texture_seed)
    tex = _lowpass_texture(rng, channels, h, w, smoothness)
    return [_shift_wrap(tex, t * dy, t * dx) for t in range(length)]


# -- frame files --------------------------------------------------------------


def save_frame(frame: Frame, path) -> None:
    ppm.write_ppm(frame, path)


def save_sequence(seq: Sequence, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq):
        save_frame(frame, d / (FRAME_NAME % i))


def load_sequence(directory) -> Sequence:
    """Read every .ppm in a directory, lexicographically, as one sequence."""
    d = Path(directory)
    if not d.is_dir():
        raise ValueError(f"{directory}: not a directory")
    paths = sorted(p for p in d.iterdir() if p.suffix == ".ppm")
    if not paths:
        raise ValueError(f"{directory}: no .ppm frames found")
    frames = [ppm.read_ppm(p) for p in paths]
    shape = frames[0].shape
    for p, f in zip(paths, frames):
        if f.shape != shape:
            raise ValueError(f"{p}: frame shape {f.shape} differs from {shape}")
    return frames


def load_dataset(directory) -> tuple[list[Sequence], list[str]]:
    """Load every subdirectory of `directory` as a sequence, sorted by name."""
    d = Path(directory)
    if not d.is_dir():
        raise ValueError(f"{directory}: not a directory")
    subdirs = sorted(p for p in d.iterdir() if p.is_dir())
    if not subdirs:
        raise ValueError(f"{directory}: no sequence subdirectories found")
    seqs = [load_sequence(p) for p in subdirs]
    return seqs, [p.name for p in subdirs]
