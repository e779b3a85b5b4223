"""Kernel-prediction frame interpolation network.

Two input frames go through a small U-shaped encoder/decoder that predicts,
per pixel, four 1-D kernels (a vertical/horizontal pair per input frame)
and a blend mask. Each kernel is softmax-normalized and the two synthesized
frames are mixed by a sigmoid mask, so the output is always a convex
combination of local input neighborhoods: feeding the same constant frame
twice returns that constant.

Parameters live in a ModelParams value object keyed by stable names; all
training code works on copies, never in place.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    avgpool2,
    concat_channels,
    conv2d,
    expand_channels,
    local_sep_conv,
    softmax_channels,
    upsample2,
)

CHECKPOINT_MAGIC = b"MFCKPT1"
CHARBONNIER_EPS = 1e-6
_CONV_K = 3  # body convolutions are 3x3 throughout


@dataclass(frozen=True)
class Arch:
    """Architecture descriptor: channel widths per level, tap count, input channels."""

    channels: int = 3
    widths: tuple[int, ...] = (16, 32, 64)
    taps: int = 5

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise ValueError(f"frame channels must be 1 or 3, got {self.channels}")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValueError(f"widths must all be >= 1, got {self.widths}")
        if self.taps < 1 or self.taps % 2 == 0:
            raise ValueError(f"adaptive kernel size must be odd, got {self.taps}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def depth(self) -> int:
        return len(self.widths)

    @property
    def pool_factor(self) -> int:
        """Spatial extents must divide this (one 2x pool between levels)."""
        return 2 ** (self.depth - 1)


_HEADS = ("head_va", "head_ha", "head_vb", "head_hb")


def conv_layer_shapes(arch: Arch) -> list[tuple[str, tuple[int, int, int, int]]]:
    """(layer name, weight shape) for every convolution, in forward order."""
    specs: list[tuple[str, tuple[int, int, int, int]]] = []
    cin = 2 * arch.channels
    for i, width in enumerate(arch.widths, start=1):
        specs.append((f"enc{i}a", (width, cin, _CONV_K, _CONV_K)))
        specs.append((f"enc{i}b", (width, width, _CONV_K, _CONV_K)))
        cin = width
    for i in range(arch.depth - 1, 0, -1):
        skip = arch.widths[i - 1]
        specs.append((f"dec{i}a", (skip, cin + skip, _CONV_K, _CONV_K)))
        specs.append((f"dec{i}b", (skip, skip, _CONV_K, _CONV_K)))
        cin = skip
    for head in _HEADS:
        specs.append((head, (arch.taps, cin, 1, 1)))
    specs.append(("head_mask", (1, cin, 1, 1)))
    return specs


def param_count(arch: Arch) -> int:
    """Total scalar parameters, a pure function of the descriptor."""
    total = 0
    for _, (cout, cin, kh, kw) in conv_layer_shapes(arch):
        total += cout * cin * kh * kw + cout
    return total


class ModelParams:
    """Named, ordered parameter set. Treated as an immutable value."""

    def __init__(self, arch: Arch, tensors: Mapping[str, np.ndarray]):
        self.arch = arch
        store: dict[str, np.ndarray] = {}
        for name, arr in tensors.items():
            a = np.asarray(arr, dtype=np.float64)
            a.flags.writeable = False
            store[name] = a
        self.tensors = store

    def names(self) -> Iterator[str]:
        return iter(self.tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (
            self.arch == other.arch
            and list(self.tensors) == list(other.tensors)
            and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors)
        )

    @property
    def count(self) -> int:
        return sum(a.size for a in self.tensors.values())

    def clone(self) -> "ModelParams":
        """Fresh value sharing the (read-only) arrays."""
        return ModelParams(self.arch, dict(self.tensors))

    def replaced(self, tensors: Mapping[str, np.ndarray]) -> "ModelParams":
        return ModelParams(self.arch, tensors)

    def checksum(self) -> float:
        """Cheap mutation sentinel for tests and invariants."""
        return float(sum(a.sum() for a in self.tensors.values()))


def init_params(arch: Arch, seed: int) -> ModelParams:
    """Fan-in-scaled uniform initialization, deterministic under seed."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in conv_layer_shapes(arch):
        cout, cin, kh, kw = shape
        bound = 1.0 / math.sqrt(cin * kh * kw)
        tensors[name + ".w"] = rng.uniform(-bound, bound, shape)
        tensors[name + ".b"] = rng.uniform(-bound, bound, (cout,))
    return ModelParams(arch, tensors)


def make_leaves(params: ModelParams, requires_grad: bool = True) -> dict[str, Tensor]:
    """Wrap every named parameter as a tape leaf."""
    return {
        name: Tensor(arr, requires_grad=requires_grad, name=name)
        for name, arr in params.tensors.items()
    }


def _check_frames(arch: Arch, ia: np.ndarray, ib: np.ndarray) -> None:
    if ia.shape != ib.shape:
        raise ShapeError(f"input frames differ in shape: {ia.shape} vs {ib.shape}")
    if ia.ndim not in (3, 4) or ia.shape[-3] != arch.channels:
        raise ShapeError(f"expected ({arch.channels}, H, W) frames, got {ia.shape}")
    h, w = ia.shape[-2:]
    f = arch.pool_factor
    if h % f or w % f:
        raise ShapeError(f"frame extents {h}x{w} must divide the pool factor {f}")


def predict_tensor(
    leaves: Mapping[str, Tensor],
    arch: Arch,
    ia: np.ndarray,
    ib: np.ndarray,
    detail: dict | None = None,
) -> Tensor:
    """Synthesize the middle frame on the tape; returns a (B, C, H, W) tensor.

    `ia`/`ib` may be single (C, H, W) frames or (B, C, H, W) stacks. If
    `detail` is given, head outputs and branch syntheses are stashed in it
    as plain arrays (for inspection and compositional tests).
    """
    _check_frames(arch, ia, ib)
    if ia.ndim == 3:
        ia, ib = ia[None], ib[None]
    fa = Tensor(ia)
    fb = Tensor(ib)
    x = concat_channels(fa, fb)

    skips = []
    for i in range(1, arch.depth + 1):
        x = conv2d(x, leaves[f"enc{i}a.w"], leaves[f"enc{i}a.b"], pad=1).relu()
        x = conv2d(x, leaves[f"enc{i}b.w"], leaves[f"enc{i}b.b"], pad=1).relu()
        if i < arch.depth:
            skips.append(x)
            x = avgpool2(x)
    for i in range(arch.depth - 1, 0, -1):
        x = upsample2(x)
        x = concat_channels(x, skips[i - 1])
        x = conv2d(x, leaves[f"dec{i}a.w"], leaves[f"dec{i}a.b"], pad=1).relu()
        x = conv2d(x, leaves[f"dec{i}b.w"], leaves[f"dec{i}b.b"], pad=1).relu()

    taps = {
        name: softmax_channels(conv2d(x, leaves[f"{name}.w"], leaves[f"{name}.b"]))
        for name in _HEADS
    }
    mask = conv2d(x, leaves["head_mask.w"], leaves["head_mask.b"]).sigmoid()
    synth_a = local_sep_conv(fa, taps["head_va"], taps["head_ha"])
    synth_b = local_sep_conv(fb, taps["head_vb"], taps["head_hb"])
    blend = expand_channels(mask, arch.channels)
    out = blend * synth_a + (1.0 - blend) * synth_b

    if detail is not None:
        detail.update({name: t.data[0] for name, t in taps.items()})
        detail["mask"] = mask.data[0]
        detail["synth_a"] = synth_a.data[0]
        detail["synth_b"] = synth_b.data[0]
        detail["prediction"] = out.data[0]
    return out


def forward(params: ModelParams, ia: np.ndarray, ib: np.ndarray) -> np.ndarray:
    """Inference-only middle-frame prediction, (C, H, W). No tape is kept."""
    leaves = make_leaves(params, requires_grad=False)
    return predict_tensor(leaves, params.arch, ia, ib).data[0]


def charbonnier(pred: Tensor, target: np.ndarray, eps: float = CHARBONNIER_EPS) -> Tensor:
    """Smooth-L1 reconstruction loss: mean(sqrt((pred - target)^2 + eps^2))."""
    t = np.asarray(target, dtype=np.float64)
    if t.ndim == 3 and pred.data.ndim == 4:
        t = t[None]
    if pred.data.shape != t.shape:
        raise ShapeError(f"loss: prediction {pred.data.shape} vs target {t.shape}")
    r = pred - Tensor(t)
    return ((r * r) + eps * eps).sqrt().mean()


def charbonnier_value(pred: np.ndarray, target: np.ndarray, eps: float = CHARBONNIER_EPS) -> float:
    """Loss on plain arrays (no tape)."""
    if pred.shape != target.shape:
        raise ShapeError(f"loss: prediction {pred.shape} vs target {target.shape}")
    d = pred - target
    return float(np.mean(np.sqrt(d * d + eps * eps)))


# -- checkpoint io ----------------------------------------------------------


def save_checkpoint(params: ModelParams, path) -> None:
    """Binary checkpoint: magic, arch descriptor, then named raw tensors."""
    arch = params.arch
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<III", arch.channels, arch.depth, arch.taps))
        fh.write(struct.pack(f"<{arch.depth}I", *arch.widths))
        fh.write(struct.pack("<I", len(params.tensors)))
        for name, arr in params.tensors.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8", copy=False).tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)

    def take(fmt: str):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    channels, depth, taps = take("<III")
    widths = take(f"<{depth}I")
    arch = Arch(channels=channels, widths=tuple(widths), taps=taps)
    (n_params,) = take("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        (name_len,) = take("<I")
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = take("<I")
        shape = take(f"<{rank}I") if rank else ()
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape)
        off += size * 8
        tensors[name] = arr.astype(np.float64)
    return ModelParams(arch, tensors)
