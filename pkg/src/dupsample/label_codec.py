"""Linear label-space codec: x = P (v - mean), v~ = W x + mean.

``v`` is an r x r x C one-hot sub-window flattened pixel-major with the class
index fastest, i.e. the channel layout produced by ``space_to_depth``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data_metrics import ConfusionMatrix, one_hot
from .tensor_kernels import ShapeError, as_tensor, bilinear_resize, space_to_depth

DEFAULT_CODE_DIM = 64
DUPC_MAGIC = b"DUPC"
DUPC_VERSION = 1
_DUPC_HEADER = struct.Struct("<4sIIII")


@dataclass(frozen=True)
class PatchMatrix:
    rows: np.ndarray  # (M, r*r*C), uncentered one-hot windows
    r: int
    classes: int

    @property
    def n(self) -> int:
        return self.r * self.r * self.classes


@dataclass(frozen=True)
class LabelCodec:
    r: int
    classes: int
    code_dim: int
    mean: np.ndarray  # (N,)
    P: np.ndarray  # (code_dim, N)
    W: np.ndarray  # (N, code_dim)

    def __post_init__(self):
        n = self.n
        if not 1 <= self.code_dim <= n:
            raise ValueError(f"code_dim must lie in [1, {n}], got {self.code_dim}")
        if self.mean.shape != (n,) or self.P.shape != (self.code_dim, n) or self.W.shape != (n, self.code_dim):
            raise ShapeError(f"codec arrays inconsistent with r={self.r}, C={self.classes}, "
                             f"code_dim={self.code_dim}: mean {self.mean.shape}, P {self.P.shape}, W {self.W.shape}")

    @property
    def n(self) -> int:
        return self.r * self.r * self.classes

    @classmethod
    def identity(cls, classes: int) -> "LabelCodec":
        eye = np.eye(classes)
        return cls(1, classes, classes, np.zeros(classes), eye, eye.copy())


def pad_labels(labels, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Pad bottom/right with class 0 to multiples of r; returns (padded, pad mask)."""
    labels = np.asarray(labels)
    h, w = labels.shape
    ph, pw = -h % r, -w % r
    padded = np.pad(labels, ((0, ph), (0, pw)), constant_values=0)
    mask = np.ones(padded.shape, dtype=bool)
    mask[:h, :w] = False
    return padded, mask


def extract_patches(labels: Sequence, r: int, classes: int) -> PatchMatrix:
    if r < 1:
        raise ValueError(f"r must be >= 1, got {r}")
    if len(labels) == 0:
        raise ValueError("no label maps given")
    n = r * r * classes
    rows = []
    for m in labels:
        padded, _ = pad_labels(m, r)
        rows.append(space_to_depth(one_hot(padded, classes), r).reshape(-1, n))
    return PatchMatrix(np.concatenate(rows), r, classes)


def _fix_signs(P: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(P), axis=1)
    signs = np.where(P[np.arange(P.shape[0]), idx] < 0, -1.0, 1.0)
    return P * signs[:, None]


def _complete_basis(P: np.ndarray, k: int, n: int) -> np.ndarray:
    # extend orthonormal rows with Gram-Schmidt over e_0, e_1, ...
    rows = list(P)
    for j in range(n):
        if len(rows) == k:
            break
        e = np.zeros(n)
        e[j] = 1.0
        for _ in range(2):
            for q in rows:
                e -= (q @ e) * q
        norm = np.linalg.norm(e)
        if norm > 0.5:
            rows.append(e / norm)
    return np.array(rows).reshape(k, n)


def fit_pca(patches: PatchMatrix, code_dim: int = DEFAULT_CODE_DIM) -> LabelCodec:
    """Closed-form codec: rows of P are the leading covariance eigenvectors, W = P^T."""
    x = np.asarray(patches.rows, dtype=np.float64)
    m, n = x.shape
    if m == 0:
        raise ValueError("cannot fit a codec on zero patches")
    if not 1 <= code_dim <= n:
        raise ValueError(f"code_dim must lie in [1, {n}], got {code_dim}")
    mean = x.mean(axis=0)
    xc = x - mean
    if m >= n:
        evals, evecs = np.linalg.eigh(xc.T @ xc)
        order = np.argsort(-evals, kind="stable")[:code_dim]
        P = evecs[:, order].T
    else:
        # dual problem on the M x M Gram matrix; identical principal directions
        evals, u = np.linalg.eigh(xc @ xc.T)
        order = np.argsort(-evals, kind="stable")
        tol = max(evals.max(initial=0.0), 1.0) * n * np.finfo(np.float64).eps
        keep = [i for i in order[:code_dim] if evals[i] > tol]
        P = (xc.T @ u[:, keep] / np.sqrt(evals[keep])).T
        if len(keep) < code_dim:
            P = _complete_basis(P, code_dim, n)
    P = _fix_signs(np.ascontiguousarray(P))
    return LabelCodec(patches.r, patches.classes, code_dim, mean, P, P.T.copy())


def reconstruction_error(codec: LabelCodec, patches: PatchMatrix) -> float:
    """Sum over patches of ||v - (W P (v - mean) + mean)||^2."""
    xc = np.asarray(patches.rows, dtype=np.float64) - codec.mean
    resid = xc - (xc @ codec.P.T) @ codec.W.T
    return float(np.sum(resid * resid))


def fit_sgd(patches: PatchMatrix, code_dim: int = DEFAULT_CODE_DIM, steps: int = 5000,
            lr: float = 0.05, seed: int = 0, batch_size: int | None = None,
            return_history: bool = False):
    """Gradient-descent codec with untied, unconstrained P and W.

    Minimizes the mean per-patch reconstruction error of the centered patches.
    Full-batch by default; ``batch_size`` switches to seeded mini-batches.
    """
    x = np.asarray(patches.rows, dtype=np.float64)
    m, n = x.shape
    if m == 0:
        raise ValueError("cannot fit a codec on zero patches")
    if not 1 <= code_dim <= n:
        raise ValueError(f"code_dim must lie in [1, {n}], got {code_dim}")
    rng = np.random.default_rng(seed)
    mean = x.mean(axis=0)
    xc = x - mean
    P = rng.normal(0.0, 0.1, size=(code_dim, n))
    W = rng.normal(0.0, 0.1, size=(n, code_dim))
    history = []
    for step in range(steps):
        if batch_size is None or batch_size >= m:
            xb = xc
        else:
            xb = xc[rng.choice(m, size=batch_size, replace=False)]
        with np.errstate(over="ignore", invalid="ignore"):
            z = xb @ P.T
            resid = xb - z @ W.T
            loss = float(np.sum(resid * resid)) / xb.shape[0]
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite codec loss at step {step}; lr={lr} is too large")
        history.append(loss)
        if loss == 0.0:
            break
        scale = -2.0 / xb.shape[0]
        grad_W = scale * resid.T @ z
        grad_P = scale * (resid @ W).T @ xb
        W -= lr * grad_W
        P -= lr * grad_P
    codec = LabelCodec(patches.r, patches.classes, code_dim, mean, P, W)
    return (codec, history) if return_history else codec


def compress(codec: LabelCodec, onehot) -> np.ndarray:
    """(H, W, C) one-hot -> (H/r, W/r, code_dim) codes."""
    onehot = as_tensor(onehot, "onehot")
    if onehot.shape[2] != codec.classes:
        raise ShapeError(f"channels: one-hot has C={onehot.shape[2]}, codec expects {codec.classes}")
    if onehot.shape[0] % codec.r or onehot.shape[1] % codec.r:
        raise ShapeError(f"spatial size {onehot.shape[:2]} not divisible by r={codec.r}; pad first")
    v = space_to_depth(onehot, codec.r)
    return (v - codec.mean) @ codec.P.T


def decompress(codec: LabelCodec, F) -> np.ndarray:
    """(h, w, code_dim) -> (h*r, w*r, C); each pixel expands to W f + mean."""
    F = as_tensor(F, "F")
    if F.shape[2] != codec.code_dim:
        raise ShapeError(f"channels: F has {F.shape[2]}, codec code_dim is {codec.code_dim}")
    h, w, _ = F.shape
    r, c = codec.r, codec.classes
    vecs = F @ codec.W.T + codec.mean  # (h, w, N)
    out = np.empty((h * r, w * r, c))
    for i in range(h):
        for j in range(w):
            out[i * r : (i + 1) * r, j * r : (j + 1) * r] = vecs[i, j].reshape(r, r, c)
    return out


@dataclass(frozen=True)
class UpperBound:
    pixel_accuracy: float
    miou: float


def reconstruct_labels(codec: LabelCodec, labels) -> np.ndarray:
    """One-hot -> compress -> decompress -> argmax, cropped to the input size."""
    labels = np.asarray(labels)
    padded, _ = pad_labels(labels, codec.r)
    rec = decompress(codec, compress(codec, one_hot(padded, codec.classes)))
    return rec.argmax(axis=2)[: labels.shape[0], : labels.shape[1]]


def codec_upper_bound(codec: LabelCodec, labels: Sequence) -> UpperBound:
    cm = ConfusionMatrix(codec.classes)
    for m in labels:
        cm.update(reconstruct_labels(codec, m), m)
    rep = cm.report()
    return UpperBound(rep.pixel_acc, rep.miou)


def bilinear_round_trip(labels, r: int, classes: int) -> np.ndarray:
    """One-hot -> bilinear down by r -> bilinear back up -> argmax."""
    labels = np.asarray(labels)
    padded, _ = pad_labels(labels, r)
    h, w = padded.shape
    low = bilinear_resize(one_hot(padded, classes), h // r, w // r)
    return bilinear_resize(low, h, w).argmax(axis=2)[: labels.shape[0], : labels.shape[1]]


def bilinear_upper_bound(labels: Sequence, r: int, classes: int) -> UpperBound:
    """Best accuracy a bilinear decoder could reach from exactly downsampled labels."""
    cm = ConfusionMatrix(classes)
    for m in labels:
        cm.update(bilinear_round_trip(m, r, classes), m)
    rep = cm.report()
    return UpperBound(rep.pixel_acc, rep.miou)


def codec_to_bytes(codec: LabelCodec) -> bytes:
    head = _DUPC_HEADER.pack(DUPC_MAGIC, DUPC_VERSION, codec.r, codec.classes, codec.code_dim)
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in (codec.mean, codec.P, codec.W))
    return head + body


def codec_from_bytes(data: bytes) -> LabelCodec:
    if len(data) < _DUPC_HEADER.size:
        raise ValueError("truncated DUPC header")
    magic, version, r, c, k = _DUPC_HEADER.unpack_from(data)
    if magic != DUPC_MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != DUPC_VERSION:
        raise ValueError(f"unsupported DUPC version {version}")
    n = r * r * c
    expected = _DUPC_HEADER.size + 4 * (n + 2 * k * n)
    if len(data) != expected:
        raise ValueError(f"DUPC size mismatch: expected {expected} bytes, got {len(data)}")
    body = np.frombuffer(data, dtype="<f4", offset=_DUPC_HEADER.size).astype(np.float64)
    mean, P, W = body[:n], body[n : n + k * n].reshape(k, n), body[n + k * n :].reshape(n, k)
    return LabelCodec(r, c, k, mean, P, W)


def save_codec(codec: LabelCodec, path) -> None:
    Path(path).write_bytes(codec_to_bytes(codec))


def load_codec(path) -> LabelCodec:
    return codec_from_bytes(Path(path).read_bytes())
