"""Synthetic label maps, one-hot encoding, mIOU and label-map files."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DUPL_MAGIC = b"DUPL"
DUPL_VERSION = 1
_DUPL_HEADER = struct.Struct("<4sIIII")


class LabelFormatError(ValueError):
    """Bad magic, truncated payload or out-of-range label in a label file."""


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic label map.

    ``stripes`` and ``checker`` ignore the seed. ``blobs`` paints
    ``n_blobs`` axis-aligned ellipses of random non-background classes with
    semi-axes drawn from ``radius`` over a class-0 background.
    """

    kind: str = "blobs"
    height: int = 32
    width: int = 32
    classes: int = 4
    seed: int = 0
    period: int = 4
    n_blobs: int = 5
    radius: tuple[int, int] = (3, 10)

    def __post_init__(self):
        if self.kind not in ("stripes", "checker", "blobs"):
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.height < 1 or self.width < 1:
            raise ValueError("map size must be positive")
        if self.period < 1 or min(self.radius) < 1 or self.radius[0] > self.radius[1]:
            raise ValueError("period and radii must be positive")
        if self.n_blobs < 0:
            raise ValueError("n_blobs must be non-negative")


def _blobs(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros((spec.height, spec.width), dtype=np.int64)
    ii, jj = np.mgrid[: spec.height, : spec.width]
    lo, hi = spec.radius
    for _ in range(spec.n_blobs):
        cls = rng.integers(1, spec.classes)
        ci = rng.uniform(0, spec.height)
        cj = rng.uniform(0, spec.width)
        ri, rj = rng.uniform(lo, hi, size=2)
        mask = ((ii - ci) / ri) ** 2 + ((jj - cj) / rj) ** 2 <= 1.0
        out[mask] = cls
    return out


def _draw(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.kind == "stripes":
        cols = (np.arange(spec.width) // spec.period) % spec.classes
        return np.tile(cols, (spec.height, 1)).astype(np.int64)
    if spec.kind == "checker":
        ii, jj = np.mgrid[: spec.height, : spec.width]
        return ((ii // spec.period + jj // spec.period) % spec.classes).astype(np.int64)
    return _blobs(spec, rng)


def generate(spec: SynthSpec) -> np.ndarray:
    # PCG64 via default_rng, seeded with the integer seed only
    return _draw(spec, np.random.default_rng(spec.seed))


def generate_dataset(spec: SynthSpec, count: int) -> list[np.ndarray]:
    """``count`` maps drawn in sequence from one generator seeded with ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    return [_draw(spec, rng) for _ in range(count)]


def one_hot(labels, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"label map must be 2-D, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"label values must lie in [0, {classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    return np.eye(classes)[labels]


class ConfusionMatrix:
    """Accumulates gt-by-pred pixel counts; rows are ground truth."""

    def __init__(self, classes: int):
        self.classes = classes
        self.counts = np.zeros((classes, classes), dtype=np.int64)

    def update(self, pred, gt, ignore=None) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
        keep = np.ones(gt.shape, dtype=bool) if ignore is None else ~np.asarray(ignore, dtype=bool)
        g = gt[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        c = self.classes
        if g.size and (min(g.min(), p.min()) < 0 or max(g.max(), p.max()) >= c):
            raise ValueError(f"labels out of range [0, {c})")
        self.counts += np.bincount(g * c + p, minlength=c * c).reshape(c, c)
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def report(self) -> "MiouReport":
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(0) + self.counts.sum(1) - tp
        iou = np.full(self.classes, np.nan)
        present = union > 0
        iou[present] = tp[present] / union[present]
        miou = float(iou[present].mean()) if present.any() else float("nan")
        acc = float(tp.sum() / self.total) if self.total else float("nan")
        return MiouReport(per_class_iou=iou, miou=miou, pixel_acc=acc)


@dataclass
class MiouReport:
    per_class_iou: np.ndarray  # NaN for classes absent from both gt and pred
    miou: float
    pixel_acc: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("class,iou\n")
        for c, v in enumerate(self.per_class_iou):
            buf.write(f"{c},{'' if np.isnan(v) else format(v, '.9g')}\n")
        buf.write(f"miou,{self.miou:.9g}\n")
        buf.write(f"pixel_acc,{self.pixel_acc:.9g}\n")
        return buf.getvalue()


def miou(pred, gt, classes: int, ignore=None) -> MiouReport:
    """IOU averaged over classes present in gt or pred (ignored pixels excluded)."""
    return ConfusionMatrix(classes).update(pred, gt, ignore).report()


def write_labelmap(path, labels, classes: int) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("label map must be 2-D")
    if not 1 <= classes <= 256:
        raise ValueError("DUPL stores one byte per pixel; classes must be in [1, 256]")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"label values must lie in [0, {classes})")
    h, w = labels.shape
    header = _DUPL_HEADER.pack(DUPL_MAGIC, DUPL_VERSION, h, w, classes)
    Path(path).write_bytes(header + labels.astype(np.uint8).tobytes())


def _read_pgm(data: bytes, classes: int | None) -> tuple[np.ndarray, int]:
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise LabelFormatError("truncated PGM header")
        tokens.append(int(data[start:pos]))
    pos += 1  # single whitespace byte ends the header
    w, h, maxval = tokens
    if not 0 < maxval < 256:
        raise LabelFormatError(f"PGM maxval must be < 256, got {maxval}")
    payload = data[pos:]
    if len(payload) < h * w:
        raise LabelFormatError(f"truncated PGM: need {h * w} bytes, have {len(payload)}")
    labels = np.frombuffer(payload[: h * w], dtype=np.uint8).reshape(h, w).astype(np.int64)
    if classes is None:
        classes = int(labels.max()) + 1 if labels.size else 1
    return labels, classes


def read_labelmap(path, classes: int | None = None) -> tuple[np.ndarray, int]:
    """Read a DUPL or P5 PGM label file; returns (labels, class count).

    For PGM the gray value is the class id and ``classes`` bounds it; for DUPL
    the header carries the class count.
    """
    data = Path(path).read_bytes()
    if data[:2] == b"P5":
        labels, c = _read_pgm(data, classes)
    else:
        if len(data) < _DUPL_HEADER.size:
            raise LabelFormatError("truncated DUPL header")
        magic, version, h, w, c = _DUPL_HEADER.unpack_from(data)
        if magic != DUPL_MAGIC:
            raise LabelFormatError(f"bad magic {magic!r}")
        if version != DUPL_VERSION:
            raise LabelFormatError(f"unsupported DUPL version {version}")
        payload = data[_DUPL_HEADER.size :]
        if len(payload) != h * w:
            raise LabelFormatError(f"truncated DUPL payload: need {h * w} bytes, have {len(payload)}")
        labels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w).astype(np.int64)
        if classes is not None and classes != c:
            raise LabelFormatError(f"file declares {c} classes, caller expects {classes}")
    if labels.size and labels.max() >= c:
        raise LabelFormatError(f"label {labels.max()} >= class count {c}")
    return labels, c
