"""Test-time scene adaptation and sequence interpolation.

At inference the trained initialization stays fixed; a copy is adapted on
the input's own wide-gap triplets and the adapted copy synthesizes the
missing middle frames. Long sequences are processed in 4-frame windows
(stride 2) that never share adapted state, so re-running any window in
isolation reproduces its frames bit for bit.
"""

from __future__ import annotations

import numpy as np

from .model import ModelParams, forward
from .tasks import Sequence
from .training import AdaptConfig, _wide_triplets, adapt_params


def adapt_and_interpolate(
    params: ModelParams, window: Sequence, acfg: AdaptConfig
) -> tuple[ModelParams, list[np.ndarray]]:
    """Adapt on one window, then synthesize the frame between each pair.

    A 4-frame window yields 2 support triplets and 3 middles; a 3-frame
    window runs in 1-shot mode (1 triplet, 2 middles). The incoming
    parameters are never modified.
    """
    if len(window) < 3:
        raise ValueError(f"adaptation needs at least 3 frames, got {len(window)}")
    window = list(window[:4])
    adapted = adapt_params(params, _wide_triplets(window), acfg)
    middles = [
        forward(adapted, window[i], window[i + 1]) for i in range(len(window) - 1)
    ]
    return adapted, middles


def window_starts(n_frames: int, stride: int = 2) -> list[int]:
    """4-frame window start indices: a stride lattice plus a flush-right tail."""
    last = n_frames - 4
    return sorted(set(range(0, last + 1, stride)) | {last})


def assign_gaps(n_frames: int, starts: list[int]) -> dict[int, list[int]]:
    """Give each inter-frame gap to the covering window it sits most centrally in.

    Window s covers gaps s, s+1, s+2 with center gap s+1; ties go to the
    earlier window.
    """
    assignment: dict[int, list[int]] = {s: [] for s in starts}
    for gap in range(n_frames - 1):
        covering = [s for s in starts if s <= gap <= s + 2]
        best = min(covering, key=lambda s: (abs(gap - (s + 1)), s))
        assignment[best].append(gap)
    return assignment


def interpolate_sequence(
    params: ModelParams,
    seq: Sequence,
    acfg: AdaptConfig,
    adapt: bool = True,
    stride: int = 2,
) -> list[np.ndarray]:
    """Double the frame rate of a sequence; output length 2*len - 1.

    Originals appear unmodified at even output indices. Each synthesized
    middle comes from the window assigned to its gap; windows adapt
    independently from the same base parameters.
    """
    middles = interpolate_middles(params, seq, acfg, adapt=adapt, stride=stride)
    out: list[np.ndarray] = []
    for i, frame in enumerate(seq):
        out.append(frame)
        if i < len(middles):
            out.append(middles[i])
    return out


def interpolate_middles(
    params: ModelParams,
    seq: Sequence,
    acfg: AdaptConfig,
    adapt: bool = True,
    stride: int = 2,
) -> list[np.ndarray]:
    """Synthesized middle frame for every gap of the sequence, in order."""
    n = len(seq)
    if n < 3:
        raise ValueError(f"interpolation needs at least 3 frames, got {n}")
    cfg = acfg if adapt else AdaptConfig(inner_lr=0.0, steps=0, optimizer=acfg.optimizer)
    if n == 3:
        _, middles = adapt_and_interpolate(params, seq, cfg)
        return middles
    starts = window_starts(n, stride)
    assignment = assign_gaps(n, starts)
    middles: dict[int, np.ndarray] = {}
    for start in starts:
        gaps = assignment[start]
        if not gaps:
            continue
        adapted = adapt_params(params, _wide_triplets(seq[start : start + 4]), cfg)
        for gap in gaps:
            middles[gap] = forward(adapted, seq[gap], seq[gap + 1])
    return [middles[g] for g in range(n - 1)]
