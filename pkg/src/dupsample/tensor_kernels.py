"""Dense (H, W, C) array kernels with explicit backward passes.

Tensors are plain numpy arrays laid out height x width x channels, channel
fastest. Everything is accumulated in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    """Raised when array dimensions do not line up."""


def as_tensor(x, name: str = "x") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"{name}: expected rank-3 (H, W, C) array, got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name}: all dimensions must be >= 1, got shape {x.shape}")
    return x


def _pads(padding) -> tuple[int, int, int, int]:
    if np.isscalar(padding):
        p = int(padding)
        return (p, p, p, p)
    pads = tuple(int(p) for p in padding)
    if len(pads) == 2:
        return (pads[0], pads[0], pads[1], pads[1])
    if len(pads) != 4:
        raise ValueError("padding must be an int, (ph, pw) or (top, bottom, left, right)")
    return pads  # type: ignore[return-value]


@dataclass
class ConvKernel:
    """Weights (kh, kw, Cin, Cout), bias (Cout,), stride and per-side padding.

    ``padding`` is (top, bottom, left, right); an int or a pair is expanded.
    """

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: tuple[int, int, int, int] = field(default=(0, 0, 0, 0))

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 4:
            raise ShapeError(f"weights: expected (kh, kw, Cin, Cout), got shape {self.weights.shape}")
        kh, kw, _, cout = self.weights.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {kh}x{kw}")
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.bias.shape != (cout,):
            raise ShapeError(f"bias: expected length Cout={cout}, got {self.bias.shape[0]}")
        if int(self.stride) < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        self.stride = int(self.stride)
        self.padding = _pads(self.padding)
        if min(self.padding) < 0:
            raise ValueError(f"padding must be non-negative, got {self.padding}")

    @property
    def kh(self) -> int:
        return self.weights.shape[0]

    @property
    def kw(self) -> int:
        return self.weights.shape[1]

    @property
    def cin(self) -> int:
        return self.weights.shape[2]

    @property
    def cout(self) -> int:
        return self.weights.shape[3]

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        pt, pb, pl, pr = self.padding
        oh = (h + pt + pb - self.kh) // self.stride + 1
        ow = (w + pl + pr - self.kw) // self.stride + 1
        if oh < 1 or ow < 1 or h + pt + pb < self.kh or w + pl + pr < self.kw:
            raise ShapeError(f"input {h}x{w} too small for {self.kh}x{self.kw} kernel "
                             f"with padding {self.padding}")
        return oh, ow


def _pad(x: np.ndarray, pads) -> np.ndarray:
    pt, pb, pl, pr = pads
    if not any(pads):
        return np.ascontiguousarray(x)
    xp = np.zeros((x.shape[0] + pt + pb, x.shape[1] + pl + pr, x.shape[2]))
    xp[pt : pt + x.shape[0], pl : pl + x.shape[1]] = x
    return xp


def _windows(x: np.ndarray, k: ConvKernel) -> np.ndarray:
    """Read-only strided view (oh, ow, kh, kw, Cin) over the padded input."""
    oh, ow = k.output_size(x.shape[0], x.shape[1])
    xp = _pad(x, k.padding)
    s0, s1, s2 = xp.strides
    s = k.stride
    return as_strided(xp, (oh, ow, k.kh, k.kw, xp.shape[2]), (s0 * s, s1 * s, s0, s1, s2), writeable=False)


def conv2d_forward(x, k: ConvKernel) -> np.ndarray:
    """Cross-correlation plus bias; no kernel flip."""
    x = as_tensor(x)
    if x.shape[2] != k.cin:
        raise ShapeError(f"channels: input has C={x.shape[2]} but kernel expects Cin={k.cin}")
    win = _windows(x, k)
    oh, ow = win.shape[:2]
    cols = win.reshape(oh * ow, -1)
    out = cols @ k.weights.reshape(-1, k.cout)
    return out.reshape(oh, ow, k.cout) + k.bias


def conv2d_backward(x, k: ConvKernel, grad_out, input_grad: bool = True):
    """Return (grad_x, grad_weights, grad_bias) for ``conv2d_forward(x, k)``.

    With ``input_grad=False`` the first element is None.
    """
    x = as_tensor(x)
    if x.shape[2] != k.cin:
        raise ShapeError(f"channels: input has C={x.shape[2]} but kernel expects Cin={k.cin}")
    oh, ow = k.output_size(x.shape[0], x.shape[1])
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != (oh, ow, k.cout):
        raise ShapeError(f"grad_out: expected shape {(oh, ow, k.cout)}, got {grad_out.shape}")

    win = _windows(x, k)
    g2 = grad_out.reshape(oh * ow, k.cout)
    grad_w = (win.reshape(oh * ow, -1).T @ g2).reshape(k.weights.shape)
    grad_b = g2.sum(axis=0)
    if not input_grad:
        return None, grad_w, grad_b

    pt, pb, pl, pr = k.padding
    s = k.stride
    gp = np.zeros((x.shape[0] + pt + pb, x.shape[1] + pl + pr, k.cin))
    for i in range(k.kh):
        for j in range(k.kw):
            gp[i : i + (oh - 1) * s + 1 : s, j : j + (ow - 1) * s + 1 : s] += grad_out @ k.weights[i, j].T
    grad_x = gp[pt : pt + x.shape[0], pl : pl + x.shape[1]]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


@lru_cache(maxsize=256)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centers, source coordinate clamped to [0, n_in - 1]
    d = np.arange(n_out, dtype=np.float64)
    src = np.clip((d + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    m.setflags(write=False)
    return m


def bilinear_resize(x, out_h: int, out_w: int) -> np.ndarray:
    """Resize every channel with half-pixel-center bilinear interpolation."""
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be >= 1, got {out_h}x{out_w}")
    h, w, c = x.shape
    ah = _interp_matrix(h, out_h)
    aw = _interp_matrix(w, out_w)
    y = (ah @ x.reshape(h, w * c)).reshape(out_h, w, c)
    return aw @ y


def bilinear_resize_backward(grad_out, in_h: int, in_w: int) -> np.ndarray:
    """Adjoint of ``bilinear_resize`` for an input of size in_h x in_w."""
    g = as_tensor(grad_out, "grad_out")
    out_h, out_w, c = g.shape
    ah = _interp_matrix(in_h, out_h)
    aw = _interp_matrix(in_w, out_w)
    y = aw.T @ g  # (out_h, in_w, c)
    return (ah.T @ y.reshape(out_h, in_w * c)).reshape(in_h, in_w, c)


def depth_to_space(x, r: int) -> np.ndarray:
    """(H, W, r*r*C) -> (H*r, W*r, C); channel block a*r+b fills window cell (a, b)."""
    x = as_tensor(x)
    h, w, c = x.shape
    if r < 1 or c % (r * r):
        raise ShapeError(f"channels: C={c} not divisible by r^2={r * r}")
    co = c // (r * r)
    return x.reshape(h, w, r, r, co).transpose(0, 2, 1, 3, 4).reshape(h * r, w * r, co)


def space_to_depth(x, r: int) -> np.ndarray:
    """Inverse of ``depth_to_space``."""
    x = as_tensor(x)
    h, w, c = x.shape
    if r < 1 or h % r or w % r:
        raise ShapeError(f"spatial size {h}x{w} not divisible by r={r}")
    return x.reshape(h // r, r, w // r, r, c).transpose(0, 2, 1, 3, 4).reshape(h // r, w // r, r * r * c)


def linear_map(x, m) -> np.ndarray:
    """Matrix product (n, k) @ (k, m)."""
    x = np.asarray(x, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if x.ndim != 2 or m.ndim != 2:
        raise ShapeError(f"linear_map expects matrices, got {x.shape} and {m.shape}")
    if x.shape[1] != m.shape[0]:
        raise ShapeError(f"inner dimension mismatch: {x.shape[1]} vs {m.shape[0]}")
    return x @ m
