"""DUpsampling layer, temperature softmax and the three training losses.

Every loss returns a ``LossReport`` whose grads are exact; the temperature
gradient is reported both wrt T and wrt its log-parameter theta (T = exp(theta)).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .label_codec import LabelCodec, decompress
from .tensor_kernels import (
    ConvKernel,
    ShapeError,
    as_tensor,
    bilinear_resize,
    bilinear_resize_backward,
    conv2d_forward,
    depth_to_space,
    space_to_depth,
)


@dataclass
class TemperatureParam:
    """Positive temperature stored as T = exp(theta)."""

    theta: float = 0.0

    @property
    def T(self) -> float:
        return float(np.exp(self.theta))

    @classmethod
    def from_T(cls, T: float) -> "TemperatureParam":
        if T <= 0:
            raise ValueError(f"temperature must be positive, got {T}")
        return cls(float(np.log(T)))


@dataclass
class LossReport:
    value: float
    grads: dict = field(default_factory=dict)


def codec_conv_kernel(codec: LabelCodec) -> ConvKernel:
    """1x1 kernel whose output channel (a*r + b)*C + c is row (a, b, c) of W."""
    w = codec.W.T.reshape(1, 1, codec.code_dim, codec.n)
    return ConvKernel(w, codec.mean.copy(), stride=1, padding=0)


def dupsample_forward(F, codec: LabelCodec, path: str = "conv_d2s") -> np.ndarray:
    F = as_tensor(F, "F")
    if F.shape[2] != codec.code_dim:
        raise ShapeError(f"channels: F has {F.shape[2]}, codec code_dim is {codec.code_dim}")
    if path == "per_patch":
        return decompress(codec, F)
    if path == "conv_d2s":
        return depth_to_space(conv2d_forward(F, codec_conv_kernel(codec)), codec.r)
    raise ValueError(f"unknown path {path!r}; use 'per_patch' or 'conv_d2s'")


def dupsample_backward(grad_out, codec: LabelCodec) -> np.ndarray:
    g = as_tensor(grad_out, "grad_out")
    r = codec.r
    if g.shape[2] != codec.classes or g.shape[0] % r or g.shape[1] % r:
        raise ShapeError(f"grad_out shape {g.shape} incompatible with r={r}, C={codec.classes}")
    return space_to_depth(g, r) @ codec.W


def softmax_t(z, T: float = 1.0) -> np.ndarray:
    """Softmax of z / T over the last axis."""
    if T <= 0:
        raise ValueError(f"temperature must be positive, got {T}")
    s = np.asarray(z, dtype=np.float64) / T
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_t_ce_backward(z, T: float, target):
    """Per-position cross-entropy of softmax(z / T) against integer targets.

    Returns (loss, grad_z, grad_T), all with the leading shape of ``target``.
    """
    z = np.asarray(z, dtype=np.float64)
    target = np.asarray(target)
    s = z / T
    smax = s.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(s - smax).sum(axis=-1)) + smax[..., 0]
    z_t = np.take_along_axis(z, target[..., None], axis=-1)[..., 0]
    loss = lse - z_t / T
    p = np.exp(s - lse[..., None])
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, target[..., None], 1.0, axis=-1)
    grad_z = (p - onehot) / T
    grad_T = (z_t - np.sum(p * z, axis=-1)) / (T * T)
    return loss, grad_z, grad_T


def _check_labels(Y, classes: int) -> np.ndarray:
    Y = np.asarray(Y)
    if Y.ndim != 2:
        raise ShapeError(f"labels must be 2-D, got shape {Y.shape}")
    if Y.size and (Y.min() < 0 or Y.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes})")
    return Y


def _ce_report(logits: np.ndarray, Y: np.ndarray, T: float):
    loss, gz, gT = softmax_t_ce_backward(logits, T, Y)
    npix = Y.size
    return float(loss.mean()), gz / npix, float(gT.sum() / npix)


def loss_bilinear(F, Y, T: float = 1.0) -> LossReport:
    """Mean pixel cross-entropy of softmax_T(bilinear(F)) against labels Y."""
    F = as_tensor(F, "F")
    Y = _check_labels(Y, F.shape[2])
    H, W = Y.shape
    if H % F.shape[0] or W % F.shape[1]:
        raise ShapeError(f"F spatial size {F.shape[:2]} does not divide label size {Y.shape}")
    logits = bilinear_resize(F, H, W)
    value, gz, gT = _ce_report(logits, Y, T)
    grad_F = bilinear_resize_backward(gz, F.shape[0], F.shape[1])
    return LossReport(value, {"F": grad_F, "T": gT, "theta": gT * T})


def loss_dupsample(F, Y, codec: LabelCodec, T: float = 1.0, path: str = "conv_d2s") -> LossReport:
    """Mean pixel cross-entropy of softmax_T(DUpsample(F)) against labels Y."""
    F = as_tensor(F, "F")
    Y = _check_labels(Y, codec.classes)
    if Y.shape != (F.shape[0] * codec.r, F.shape[1] * codec.r):
        raise ShapeError(f"label size {Y.shape} is not F size {F.shape[:2]} times r={codec.r}")
    logits = dupsample_forward(F, codec, path)
    value, gz, gT = _ce_report(logits, Y, T)
    grad_F = dupsample_backward(gz, codec)
    return LossReport(value, {"F": grad_F, "T": gT, "theta": gT * T})


def loss_regression(F, Y_code) -> LossReport:
    """Sum of squared differences between F and the compressed labels."""
    F = np.asarray(F, dtype=np.float64)
    Y_code = np.asarray(Y_code, dtype=np.float64)
    if F.shape != Y_code.shape:
        raise ShapeError(f"shape mismatch: F {F.shape} vs target {Y_code.shape}")
    d = F - Y_code
    return LossReport(float(np.sum(d * d)), {"F": 2.0 * d})
