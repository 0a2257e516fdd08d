"""Light strided CNN, one-tap feature fusion and decoder FLOPS accounting.

The model is fed one-hot ground-truth labels. ``encoder`` layers are 3x3,
pad 1, followed by a leaky rectifier. The fusion head ``decoder`` runs on the
fused features; its last layer is linear and emits either C class logits
(bilinear head) or code_dim codes (DUpsampling / regression heads).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_metrics import one_hot
from .dupsampling_ops import (
    LossReport,
    TemperatureParam,
    dupsample_forward,
    loss_bilinear,
    loss_dupsample,
    loss_regression,
)
from .label_codec import LabelCodec, compress
from .tensor_kernels import ConvKernel, ShapeError, bilinear_resize, bilinear_resize_backward, conv2d_backward, conv2d_forward

DEFAULT_WIDTHS = (16, 32, 32, 64, 64)
DUPM_MAGIC = b"DUPM"
DUPM_VERSION = 1


@dataclass(frozen=True)
class FusionSpec:
    """``vanilla`` upsamples F_last to the tap; ``proposed`` downsamples the tap to F_last.

    ``none`` feeds F_last straight into the decoder. ``tap_layer`` is a
    0-based encoder layer index.
    """

    scheme: str = "none"
    tap_layer: int | None = None

    def __post_init__(self):
        if self.scheme not in ("none", "vanilla", "proposed"):
            raise ValueError(f"unknown fusion scheme {self.scheme!r}")
        if self.scheme != "none" and self.tap_layer is None:
            raise ValueError(f"scheme {self.scheme!r} needs a tap layer")


@dataclass(frozen=True)
class Head:
    """Final upsampling and loss: ``bilinear``, ``dupsample`` or ``regression``."""

    kind: str = "bilinear"
    codec: LabelCodec | None = None
    learn_temperature: bool = True

    def __post_init__(self):
        if self.kind not in ("bilinear", "dupsample", "regression"):
            raise ValueError(f"unknown head {self.kind!r}")
        if self.kind != "bilinear" and self.codec is None:
            raise ValueError(f"head {self.kind!r} needs a codec")


@dataclass
class ToyModel:
    encoder: list[ConvKernel]
    decoder: list[ConvKernel]
    temperature: TemperatureParam = field(default_factory=TemperatureParam)
    slope: float = 0.01

    @property
    def ratios(self) -> list[int]:
        """Cumulative stride (input size / feature size) after each encoder layer."""
        out, acc = [], 1
        for k in self.encoder:
            acc *= k.stride
            out.append(acc)
        return out

    @property
    def output_stride(self) -> int:
        return self.ratios[-1]

    def layers(self) -> list[ConvKernel]:
        return list(self.encoder) + list(self.decoder)


def encoder_strides(output_stride: int, n_layers: int = 5) -> list[int]:
    n2 = int(round(np.log2(output_stride)))
    if 2 ** n2 != output_stride or not 0 <= n2 <= n_layers:
        raise ValueError(f"output stride {output_stride} not reachable with {n_layers} stride-2/1 layers")
    return [2] * n2 + [1] * (n_layers - n2)


def fusion_channels(widths, spec: FusionSpec) -> int:
    if spec.scheme == "none":
        return widths[-1]
    return widths[spec.tap_layer] + widths[-1]


def init_model(in_channels: int, out_channels: int, spec: FusionSpec = FusionSpec(), *,
               widths=DEFAULT_WIDTHS, output_stride: int = 32, decoder_hidden=(),
               decoder_kernel: int = 1, init_std: float = 0.1, seed: int = 0,
               slope: float = 0.01) -> ToyModel:
    """Gaussian(0, init_std) weights, zero biases, T = 1."""
    rng = np.random.default_rng(seed)
    widths = tuple(widths)
    strides = encoder_strides(output_stride, len(widths))
    if spec.scheme != "none" and not 0 <= spec.tap_layer < len(widths):
        raise ValueError(f"tap layer {spec.tap_layer} outside encoder of {len(widths)} layers")

    def conv(k, cin, cout, stride):
        w = rng.normal(0.0, init_std, size=(k, k, cin, cout))
        return ConvKernel(w, np.zeros(cout), stride=stride, padding=k // 2)

    encoder = []
    cin = in_channels
    for w, s in zip(widths, strides):
        encoder.append(conv(3, cin, w, s))
        cin = w
    decoder = []
    cin = fusion_channels(widths, spec)
    for w in decoder_hidden:
        decoder.append(conv(decoder_kernel, cin, w, 1))
        cin = w
    decoder.append(conv(decoder_kernel, cin, out_channels, 1))
    return ToyModel(encoder, decoder, TemperatureParam(0.0), slope)


def _leaky(x, slope):
    return np.where(x > 0, x, slope * x)


def _leaky_grad(a, slope):
    # sign of the activation equals sign of the pre-activation for slope > 0
    return np.where(a > 0, 1.0, slope)


def encoder_forward(model: ToyModel, x) -> list[np.ndarray]:
    """Activations after every encoder layer (first to last)."""
    x = np.asarray(x, dtype=np.float64)
    os_ = model.output_stride
    if x.shape[0] < os_ or x.shape[1] < os_:
        raise ShapeError(f"input {x.shape[:2]} smaller than the overall stride {os_}")
    feats = []
    for k in model.encoder:
        x = _leaky(conv2d_forward(x, k), model.slope)
        feats.append(x)
    return feats


def _tap_and_last(features, spec: FusionSpec):
    return features[spec.tap_layer], features[-1]


def fused_input(features, spec: FusionSpec) -> np.ndarray:
    if spec.scheme == "none":
        return features[-1]
    fi, fl = _tap_and_last(features, spec)
    if spec.scheme == "vanilla":
        return np.concatenate([fi, bilinear_resize(fl, fi.shape[0], fi.shape[1])], axis=2)
    return np.concatenate([bilinear_resize(fi, fl.shape[0], fl.shape[1]), fl], axis=2)


def _decoder_forward(layers, x, slope):
    acts = [x]
    for idx, k in enumerate(layers):
        if k.cin != x.shape[2]:
            raise ShapeError(f"decoder layer {idx}: expects Cin={k.cin}, got {x.shape[2]} channels")
        x = conv2d_forward(x, k)
        if idx < len(layers) - 1:
            x = _leaky(x, slope)
        acts.append(x)
    return acts


def fuse(features, spec: FusionSpec, layers, slope: float = 0.01) -> np.ndarray:
    """Apply the fusion head to the fused features of one tap."""
    return _decoder_forward(layers, fused_input(features, spec), slope)[-1]


def forward(model: ToyModel, spec: FusionSpec, x) -> np.ndarray:
    """Decoder output F (before the head's upsampling)."""
    feats = encoder_forward(model, x)
    return fuse(feats, spec, model.decoder, model.slope)


def predict(model: ToyModel, spec: FusionSpec, head: Head, x) -> np.ndarray:
    """Per-pixel argmax at the input resolution."""
    F = forward(model, spec, x)
    H, W = np.shape(x)[:2]
    if head.kind == "bilinear":
        logits = bilinear_resize(F, H, W)
    else:
        logits = dupsample_forward(F, head.codec)
    return logits.argmax(axis=2)


def model_forward_loss(model: ToyModel, spec: FusionSpec, head: Head, x, Y) -> LossReport:
    """End-to-end loss; grads keyed ``encoder``/``decoder`` (lists of (dW, db)) and ``theta``."""
    x = np.asarray(x, dtype=np.float64)
    feats = encoder_forward(model, x)
    acts = _decoder_forward(model.decoder, fused_input(feats, spec), model.slope)
    F = acts[-1]
    T = model.temperature.T
    if head.kind == "bilinear":
        rep = loss_bilinear(F, Y, T)
    elif head.kind == "dupsample":
        if F.shape[0] * head.codec.r != np.shape(Y)[0]:
            raise ShapeError(f"codec r={head.codec.r} does not match decoder output {F.shape[:2]} "
                             f"-> labels {np.shape(Y)}")
        rep = loss_dupsample(F, Y, head.codec, T)
    else:
        target = compress(head.codec, one_hot(Y, head.codec.classes))
        rep = loss_regression(F, target)
    g = rep.grads["F"]

    dec_grads = [None] * len(model.decoder)
    for idx in range(len(model.decoder) - 1, -1, -1):
        k = model.decoder[idx]
        if idx < len(model.decoder) - 1:
            g = g * _leaky_grad(acts[idx + 1], model.slope)
        g, gw, gb = conv2d_backward(acts[idx], k, g)
        dec_grads[idx] = (gw, gb)

    feat_grads = [np.zeros_like(f) for f in feats]
    if spec.scheme == "none":
        feat_grads[-1] += g
    else:
        fi, fl = _tap_and_last(feats, spec)
        ci = fi.shape[2]
        if spec.scheme == "vanilla":
            feat_grads[spec.tap_layer] += g[..., :ci]
            feat_grads[-1] += bilinear_resize_backward(g[..., ci:], fl.shape[0], fl.shape[1])
        else:
            feat_grads[spec.tap_layer] += bilinear_resize_backward(g[..., :ci], fi.shape[0], fi.shape[1])
            feat_grads[-1] += g[..., ci:]

    enc_grads = [None] * len(model.encoder)
    for idx in range(len(model.encoder) - 1, -1, -1):
        k = model.encoder[idx]
        gpre = feat_grads[idx] * _leaky_grad(feats[idx], model.slope)
        inp = feats[idx - 1] if idx > 0 else x
        gin, gw, gb = conv2d_backward(inp, k, gpre, input_grad=idx > 0)
        enc_grads[idx] = (gw, gb)
        if idx > 0:
            feat_grads[idx - 1] += gin

    grads = {"encoder": enc_grads, "decoder": dec_grads, "theta": rep.grads.get("theta", 0.0)}
    return LossReport(rep.value, grads)


@dataclass
class FlopsReport:
    per_layer: list[tuple[str, int]]
    total: int  # decoder only: fusion resize + decoder convs + final upsampling
    encoder_total: int


def conv_madds(k: ConvKernel, out_h: int, out_w: int) -> int:
    return out_h * out_w * k.cout * k.kh * k.kw * k.cin


def resize_madds(out_h: int, out_w: int, channels: int) -> int:
    return 4 * out_h * out_w * channels


def count_flops(model: ToyModel, spec: FusionSpec, head: Head, input_h: int, input_w: int) -> FlopsReport:
    """Multiply-adds per layer, computed from shapes alone."""
    rows: list[tuple[str, int]] = []
    sizes = []
    h, w = input_h, input_w
    for idx, k in enumerate(model.encoder):
        h, w = k.output_size(h, w)
        sizes.append((h, w, k.cout))
        rows.append((f"encoder.{idx}", conv_madds(k, h, w)))
    n_enc = len(rows)

    hl, wl, cl = sizes[-1]
    if spec.scheme == "vanilla":
        hi, wi, _ = sizes[spec.tap_layer]
        rows.append(("fusion.upsample", resize_madds(hi, wi, cl)))
        h, w = hi, wi
    elif spec.scheme == "proposed":
        ci = sizes[spec.tap_layer][2]
        rows.append(("fusion.downsample", resize_madds(hl, wl, ci)))
        h, w = hl, wl
    else:
        h, w = hl, wl
    for idx, k in enumerate(model.decoder):
        h, w = k.output_size(h, w)
        rows.append((f"decoder.{idx}", conv_madds(k, h, w)))
    cout = model.decoder[-1].cout
    if head.kind == "bilinear":
        rows.append(("head.bilinear", resize_madds(input_h, input_w, cout)))
    else:
        c = head.codec
        rows.append(("head.dupsample", h * w * (c.r * c.r * c.classes) * c.code_dim))
    enc_total = sum(v for _, v in rows[:n_enc])
    dec_total = sum(v for _, v in rows[n_enc:])
    return FlopsReport(rows, dec_total, enc_total)


_LAYER = struct.Struct("<9I")


def checkpoint_bytes(model: ToyModel) -> bytes:
    """DUPM layout: magic, version, #encoder, #decoder, slope f64, layers, theta f64."""
    parts = [DUPM_MAGIC, struct.pack("<IIId", DUPM_VERSION, len(model.encoder), len(model.decoder), model.slope)]
    for k in model.layers():
        parts.append(_LAYER.pack(k.kh, k.kw, k.cin, k.cout, k.stride, *k.padding))
        parts.append(np.ascontiguousarray(k.weights, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(k.bias, dtype="<f4").tobytes())
    parts.append(struct.pack("<d", model.temperature.theta))
    return b"".join(parts)


def model_from_bytes(data: bytes) -> ToyModel:
    if data[:4] != DUPM_MAGIC:
        raise ValueError(f"bad magic {data[:4]!r}")
    version, n_enc, n_dec, slope = struct.unpack_from("<IIId", data, 4)
    if version != DUPM_VERSION:
        raise ValueError(f"unsupported DUPM version {version}")
    pos = 24
    layers = []
    for _ in range(n_enc + n_dec):
        kh, kw, cin, cout, stride, *pad = _LAYER.unpack_from(data, pos)
        pos += _LAYER.size
        nw = kh * kw * cin * cout
        w = np.frombuffer(data, "<f4", nw, pos).reshape(kh, kw, cin, cout)
        pos += 4 * nw
        b = np.frombuffer(data, "<f4", cout, pos)
        pos += 4 * cout
        layers.append(ConvKernel(w.astype(np.float64), b.astype(np.float64), stride, tuple(pad)))
    (theta,) = struct.unpack_from("<d", data, pos)
    if pos + 8 != len(data):
        raise ValueError("trailing bytes after DUPM checkpoint")
    return ToyModel(layers[:n_enc], layers[n_enc:], TemperatureParam(theta), float(slope))


def save_checkpoint(model: ToyModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> ToyModel:
    return model_from_bytes(Path(path).read_bytes())
