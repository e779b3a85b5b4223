"""Dense float64 tensors with reverse-mode automatic differentiation.

A deliberately small engine: enough ops for a kernel-prediction
interpolation network, nothing more. Arrays are 64-bit floats of rank <= 4
(batch, channel, row, col). Every op computes with a fixed accumulation
order, so identical inputs give bit-identical outputs across runs.

Tensors are immutable after construction and safe to share read-only
between threads. Each backward pass walks its tape exactly once in reverse
topological order, then drops all node references so the tape is freed.
No higher-order derivatives are supported.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "set_finite_checks",
    "backward_gradients",
    "conv2d",
    "local_sep_conv",
    "softmax_channels",
    "avgpool2",
    "upsample2",
    "concat_channels",
    "expand_channels",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


_FINITE_CHECKS = False


def set_finite_checks(enabled: bool) -> None:
    """Enable/disable NaN/Inf detection on every tensor built afterwards."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


class Tensor:
    """One node on the autodiff tape wrapping a float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 4:
            raise ShapeError(f"tensors support at most 4 axes, got shape {arr.shape}")
        if _FINITE_CHECKS and not np.isfinite(arr).all():
            raise FloatingPointError("tensor contains NaN or Inf")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # -- elementwise arithmetic ------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            _check_same_shape("add", self, other)

            def backward(g):
                if self.requires_grad:
                    _acc(self, g)
                if other.requires_grad:
                    _acc(other, g)

            out = _node(self.data + other.data, (self, other), backward)
            return out
        return self._affine(1.0, float(other))

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            _check_same_shape("sub", self, other)

            def backward(g):
                if self.requires_grad:
                    _acc(self, g)
                if other.requires_grad:
                    _acc(other, -g)

            out = _node(self.data - other.data, (self, other), backward)
            return out
        return self._affine(1.0, -float(other))

    def __rsub__(self, other):
        return self._affine(-1.0, float(other))

    def __neg__(self):
        return self._affine(-1.0, 0.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            _check_same_shape("mul", self, other)

            def backward(g):
                if self.requires_grad:
                    _acc(self, g * other.data)
                if other.requires_grad:
                    _acc(other, g * self.data)

            out = _node(self.data * other.data, (self, other), backward)
            return out
        return self._affine(float(other), 0.0)

    def __rmul__(self, other):
        return self.__mul__(other)

    def _affine(self, scale: float, shift: float) -> "Tensor":
        """scale * self + shift with scalar constants."""

        def backward(g):
            if self.requires_grad:
                _acc(self, g * scale)

        out = _node(self.data * scale + shift, (self,), backward)
        return out

    # -- pointwise nonlinearities ----------------------------------------

    def relu(self) -> "Tensor":
        mask = self.data > 0.0

        def backward(g):
            if self.requires_grad:
                _acc(self, g * mask)

        out = _node(np.where(mask, self.data, 0.0), (self,), backward)
        return out

    def sigmoid(self) -> "Tensor":
        # Numerically stable split avoids exp overflow for large |x|.
        x = self.data
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)

        def backward(g):
            if self.requires_grad:
                _acc(self, g * y * (1.0 - y))

        out = _node(y, (self,), backward)
        return out

    def sqrt(self) -> "Tensor":
        y = np.sqrt(self.data)

        def backward(g):
            if self.requires_grad:
                _acc(self, g / (2.0 * y))

        out = _node(y, (self,), backward)
        return out

    def abs(self) -> "Tensor":
        sign = np.sign(self.data)

        def backward(g):
            if self.requires_grad:
                _acc(self, g * sign)

        out = _node(np.abs(self.data), (self,), backward)
        return out

    # -- reductions --------------------------------------------------------

    def sum(self) -> "Tensor":
        shape = self.data.shape

        def backward(g):
            if self.requires_grad:
                _acc(self, np.full(shape, float(g)))

        out = _node(self.data.sum(), (self,), backward)
        return out

    def mean(self) -> "Tensor":
        shape = self.data.shape
        inv = 1.0 / self.data.size

        def backward(g):
            if self.requires_grad:
                _acc(self, np.full(shape, float(g) * inv))

        out = _node(self.data.mean(), (self,), backward)
        return out

    # -- backward ----------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from this scalar node, then free the tape."""
        if self.data.shape != ():
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topo_order(self)
        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in order:
            node._parents = ()
            node._backward = None


def _node(
    data: np.ndarray,
    parents: tuple[Tensor, ...],
    backward: Callable[[np.ndarray], None],
) -> Tensor:
    """Build an op output; tape links only exist when a parent needs grad."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    t.grad = g if t.grad is None else t.grad + g


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward_gradients(loss: Tensor, leaves: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for every named leaf.

    Leaves that the tape never reached get an all-zero gradient.
    """
    loss.backward()
    return {
        name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
        for name, leaf in leaves.items()
    }


# -- structured ops --------------------------------------------------------


def _patches(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Sliding-window view (B, C, kh, kw, Ho, Wo) of a padded NCHW array."""
    b, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    return np.lib.stride_tricks.as_strided(
        x,
        (b, c, kh, kw, ho, wo),
        (s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )


def _zero_pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * p, w + 2 * p))
    out[:, :, p : p + h, p : p + w] = x
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding over NCHW input.

    x: (B, Cin, H, W); w: (Cout, Cin, k, k); b: (Cout,).
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or b.data.ndim != 1:
        raise ShapeError(
            f"conv2d: need 4D input/weights and 1D bias, got "
            f"{x.data.shape}/{w.data.shape}/{b.data.shape}"
        )
    bs, cin, h, wd = x.data.shape
    cout, wcin, kh, kw = w.data.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, weights expect {wcin}")
    if b.data.shape[0] != cout:
        raise ShapeError(f"conv2d: bias length {b.data.shape[0]} != {cout} filters")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: bad stride={stride} or pad={pad}")
    hp, wp = h + 2 * pad, wd + 2 * pad
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    # im2col laid out for plain matmuls: one copy here, reused by backward.
    xp = _zero_pad(x.data, pad)
    cols = _patches(xp, kh, kw, stride)
    x2 = cols.transpose(1, 2, 3, 0, 4, 5).reshape(cin * kh * kw, bs * ho * wo)
    w2 = w.data.reshape(cout, cin * kh * kw)
    out = (w2 @ x2).reshape(cout, bs, ho, wo)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    out += b.data[None, :, None, None]

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, bs * ho * wo)
        if w.requires_grad:
            _acc(w, (g2 @ x2.T).reshape(cout, cin, kh, kw))
        if b.requires_grad:
            _acc(b, g2.sum(axis=1))
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(cin, kh, kw, bs, ho, wo)
            scratch = np.zeros((cin, bs, hp, wp))
            for u in range(kh):
                for v in range(kw):
                    scratch[
                        :, :, u : u + ho * stride : stride, v : v + wo * stride : stride
                    ] += gcols[:, u, v]
            gx = scratch.transpose(1, 0, 2, 3)
            if pad:
                gx = gx[:, :, pad : pad + h, pad : pad + wd]
            _acc(x, np.ascontiguousarray(gx))

    node = _node(out, (x, w, b), backward)
    return node


def _edge_pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    b, c, h, w = x.shape
    out = np.empty((b, c, h + 2 * p, w + 2 * p))
    out[:, :, p : p + h, p : p + w] = x
    out[:, :, :p, p : p + w] = x[:, :, :1]
    out[:, :, p + h :, p : p + w] = x[:, :, -1:]
    out[:, :, :, :p] = out[:, :, :, p : p + 1]
    out[:, :, :, p + w :] = out[:, :, :, p + w - 1 : p + w]
    return out


def _fold_edge_pad(gp: np.ndarray, p: int) -> np.ndarray:
    """Collapse gradients of edge-replicated padding back onto border pixels."""
    if p == 0:
        return gp
    hp, wp = gp.shape[2], gp.shape[3]
    gp[:, :, p] += gp[:, :, :p].sum(axis=2)
    gp[:, :, hp - p - 1] += gp[:, :, hp - p :].sum(axis=2)
    core = gp[:, :, p : hp - p]
    core[:, :, :, p] += core[:, :, :, :p].sum(axis=3)
    core[:, :, :, wp - p - 1] += core[:, :, :, wp - p :].sum(axis=3)
    return np.ascontiguousarray(core[:, :, :, p : wp - p])


def local_sep_conv(frame: Tensor, taps_v: Tensor, taps_h: Tensor) -> Tensor:
    """Per-pixel separable convolution with edge-replicated padding.

    out(y, x) = sum_u sum_v taps_v(y, x)[u] * taps_h(y, x)[v]
                * frame(y + u - n//2, x + v - n//2)

    frame: (B, C, H, W); taps_v/taps_h: (B, n, H, W) with n odd.
    """
    if frame.data.ndim != 4 or taps_v.data.ndim != 4 or taps_h.data.ndim != 4:
        raise ShapeError("local_sep_conv: all operands must be 4D")
    bs, c, h, w = frame.data.shape
    n = taps_v.data.shape[1]
    if n % 2 == 0:
        raise ShapeError(f"local_sep_conv: tap count {n} is even, center undefined")
    expect = (bs, n, h, w)
    if taps_v.data.shape != expect or taps_h.data.shape != expect:
        raise ShapeError(
            f"local_sep_conv: taps must be {expect}, got "
            f"{taps_v.data.shape}/{taps_h.data.shape}"
        )
    p = n // 2
    fp = _edge_pad(frame.data, p)
    patches = _patches(fp, n, n, 1)  # (B, C, n, n, H, W)
    tmp = np.einsum("buyx,bcuvyx->bcvyx", taps_v.data, patches)
    out = np.einsum("bvyx,bcvyx->bcyx", taps_h.data, tmp)

    def backward(g):
        if taps_h.requires_grad:
            _acc(taps_h, np.einsum("bcyx,bcvyx->bvyx", g, tmp))
        if taps_v.requires_grad:
            gtmp = taps_h.data[:, None] * g[:, :, None]
            _acc(taps_v, np.einsum("bcvyx,bcuvyx->buyx", gtmp, patches))
        if frame.requires_grad:
            prod = taps_v.data[:, :, None] * taps_h.data[:, None, :]  # (B, u, v, H, W)
            gfp = np.zeros_like(fp)
            for u in range(n):
                for v in range(n):
                    gfp[:, :, u : u + h, v : v + w] += g * prod[:, u, v][:, None]
            _acc(frame, _fold_edge_pad(gfp, p))

    node = _node(out, (frame, taps_v, taps_h), backward)
    return node


def softmax_channels(t: Tensor) -> Tensor:
    """Softmax across the channel axis, independently per spatial position."""
    if t.data.ndim != 4:
        raise ShapeError(f"softmax_channels: need 4D input, got {t.data.shape}")
    z = t.data - t.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        if t.requires_grad:
            _acc(t, y * (g - (g * y).sum(axis=1, keepdims=True)))

    out = _node(y, (t,), backward)
    return out


def avgpool2(t: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; extents must be even."""
    if t.data.ndim != 4:
        raise ShapeError(f"avgpool2: need 4D input, got {t.data.shape}")
    b, c, h, w = t.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2: extents {h}x{w} not divisible by 2")
    y = t.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        if t.requires_grad:
            _acc(t, np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25)

    out = _node(y, (t,), backward)
    return out


def upsample2(t: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling."""
    if t.data.ndim != 4:
        raise ShapeError(f"upsample2: need 4D input, got {t.data.shape}")
    b, c, h, w = t.data.shape
    y = np.repeat(np.repeat(t.data, 2, axis=2), 2, axis=3)

    def backward(g):
        if t.requires_grad:
            _acc(t, g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)))

    out = _node(y, (t,), backward)
    return out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two NCHW tensors along the channel axis."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels: need 4D inputs")
    sa, sb = a.data.shape, b.data.shape
    if sa[0] != sb[0] or sa[2:] != sb[2:]:
        raise ShapeError(f"concat_channels: shapes {sa} and {sb} disagree off-channel")
    ca = sa[1]

    def backward(g):
        if a.requires_grad:
            _acc(a, np.ascontiguousarray(g[:, :ca]))
        if b.requires_grad:
            _acc(b, np.ascontiguousarray(g[:, ca:]))

    out = _node(np.concatenate((a.data, b.data), axis=1), (a, b), backward)
    return out


def expand_channels(t: Tensor, channels: int) -> Tensor:
    """Repeat a single-channel NCHW tensor across `channels` channels."""
    if t.data.ndim != 4 or t.data.shape[1] != 1:
        raise ShapeError(f"expand_channels: need (B,1,H,W), got {t.data.shape}")
    if channels == 1:
        return t

    def backward(g):
        if t.requires_grad:
            _acc(t, g.sum(axis=1, keepdims=True))

    out = _node(np.repeat(t.data, channels, axis=1), (t,), backward)
    return out
