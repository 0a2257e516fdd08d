"""Poly-schedule SGD with momentum and a central-difference gradient checker."""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data_metrics import ConfusionMatrix, MiouReport, one_hot
from .toy_model import FusionSpec, Head, ToyModel, checkpoint_bytes, model_forward_loss, predict


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    total_iters: int = 2000
    poly_power: float = 0.9
    momentum: float = 0.9
    batch_size: int = 8
    seed: int = 0
    loss_mode: str | None = None  # defaults to the head's kind
    log_every: int = 10
    weight_decay: float = 0.0
    stop_loss: float | None = None  # end early once the batch loss drops below this

    def __post_init__(self):
        if not self.base_lr >= 0:
            raise ValueError("base_lr must be non-negative")
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.poly_power <= 0:
            raise ValueError("poly_power must be positive")
        if self.batch_size < 1 or self.log_every < 1:
            raise ValueError("batch_size and log_every must be >= 1")
        if self.loss_mode not in (None, "bilinear", "dupsample", "regression"):
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")


@dataclass
class LogRecord:
    iter: int
    lr: float
    loss: float
    T: float


@dataclass
class TrainLog:
    records: list[LogRecord] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)  # every iteration
    final: dict = field(default_factory=dict)
    checkpoint: bytes = b""

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("iter,lr,loss,T\n")
        for r in self.records:
            buf.write(f"{r.iter},{r.lr:.9g},{r.loss:.9g},{r.T:.9g}\n")
        return buf.getvalue()

    def first_iter_below(self, threshold: float) -> int | None:
        for i, v in enumerate(self.losses):
            if v < threshold:
                return i
        return None


class DivergenceError(FloatingPointError):
    def __init__(self, iteration: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at iteration {iteration}")
        self.iteration = iteration


def poly_lr(cfg: TrainConfig, it: int) -> float:
    if not 0 <= it <= cfg.total_iters:
        raise ValueError(f"iteration {it} outside [0, {cfg.total_iters}]")
    return cfg.base_lr * (1.0 - it / cfg.total_iters) ** cfg.poly_power


def sgd_step(params, grads, lr: float, momentum: float, velocity):
    """v <- momentum * v + g; p <- p - lr * v. Returns (params, velocity) as new lists."""
    new_p, new_v = [], []
    for i, (p, g, v) in enumerate(zip(params, grads, velocity)):
        if np.shape(p) != np.shape(g) or np.shape(p) != np.shape(v):
            raise ValueError(f"parameter {i}: shape mismatch {np.shape(p)} / {np.shape(g)} / {np.shape(v)}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {i}")
        v = momentum * v + g
        new_v.append(v)
        new_p.append(p - lr * v)
    return new_p, new_v


def gt_fed_dataset(maps: Sequence, classes: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairs (one-hot input, labels): the network sees the ground truth itself."""
    return [(one_hot(m, classes), np.asarray(m)) for m in maps]


def _params(model: ToyModel) -> list:
    out = []
    for k in model.layers():
        out += [k.weights, k.bias]
    out.append(np.float64(model.temperature.theta))
    return out


def _set_params(model: ToyModel, params) -> None:
    for i, k in enumerate(model.layers()):
        k.weights = params[2 * i]
        k.bias = params[2 * i + 1]
    model.temperature.theta = float(params[-1])


def _flat_grads(rep, learn_theta: bool) -> list:
    out = []
    for gw, gb in list(rep.grads["encoder"]) + list(rep.grads["decoder"]):
        out += [gw, gb]
    out.append(np.float64(rep.grads["theta"] if learn_theta else 0.0))
    return out


def batch_loss(model: ToyModel, spec: FusionSpec, head: Head, batch, learn_theta: bool = True):
    """Mean loss and flat gradient list over (x, Y) pairs."""
    total = 0.0
    acc = None
    for x, Y in batch:
        rep = model_forward_loss(model, spec, head, x, Y)
        g = _flat_grads(rep, learn_theta)
        acc = g if acc is None else [a + b for a, b in zip(acc, g)]
        total += rep.value
    n = len(batch)
    return total / n, [a / n for a in acc]


def evaluate(model: ToyModel, spec: FusionSpec, head: Head, dataset, classes: int) -> MiouReport:
    cm = ConfusionMatrix(classes)
    for x, Y in dataset:
        cm.update(predict(model, spec, head, x), Y)
    return cm.report()


def train(model: ToyModel, spec: FusionSpec, head: Head, dataset, cfg: TrainConfig) -> TrainLog:
    """Train ``model`` in place on (x, Y) pairs; deterministic for a given seed."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if cfg.loss_mode is not None and cfg.loss_mode != head.kind:
        raise ValueError(f"loss_mode {cfg.loss_mode!r} does not match head {head.kind!r}")
    learn_theta = head.learn_temperature and head.kind != "regression"
    rng = np.random.default_rng(cfg.seed)
    n = len(dataset)
    bs = min(cfg.batch_size, n)
    order = rng.permutation(n)
    pos = 0
    params = _params(model)
    velocity = [np.zeros_like(p) for p in params]
    log = TrainLog()
    for it in range(cfg.total_iters):
        if pos + bs > n:
            order = rng.permutation(n)
            pos = 0
        batch = [dataset[i] for i in order[pos : pos + bs]]
        pos += bs
        lr = poly_lr(cfg, it)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            loss, grads = batch_loss(model, spec, head, batch, learn_theta)
        if not np.isfinite(loss):
            raise DivergenceError(it)
        if cfg.weight_decay:
            grads = [g + cfg.weight_decay * p for g, p in zip(grads[:-1], params[:-1])] + [grads[-1]]
        log.losses.append(loss)
        if it % cfg.log_every == 0 or it == cfg.total_iters - 1:
            log.records.append(LogRecord(it, lr, loss, model.temperature.T))
        if cfg.stop_loss is not None and loss < cfg.stop_loss:
            if log.records[-1].iter != it:
                log.records.append(LogRecord(it, lr, loss, model.temperature.T))
            break
        try:
            params, velocity = sgd_step(params, grads, lr, cfg.momentum, velocity)
        except FloatingPointError:
            raise DivergenceError(it, "gradient") from None
        _set_params(model, params)
    classes = head.codec.classes if head.codec is not None else model.decoder[-1].cout
    rep = evaluate(model, spec, head, dataset, classes)
    log.final = {"train_miou": rep.miou, "train_pixel_acc": rep.pixel_acc, "final_loss": log.losses[-1],
                 "iterations": len(log.losses), "T": model.temperature.T}
    log.checkpoint = checkpoint_bytes(model)
    return log


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_coordinate: tuple[int, int]  # (parameter index, flat index)
    checked: int


def grad_check(loss_fn: Callable, params: list, eps: float = 1e-5, mode: str = "full",
               samples: int = 200, seed: int = 0, floor: float = 1e-6) -> GradCheckResult:
    """Compare analytic gradients with central differences.

    ``loss_fn(params) -> (loss, grads)`` with grads matching ``params``;
    parameters are float64 arrays perturbed in place and restored. The
    relative error per coordinate is |a - n| / max(|a|, |n|, floor).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = [np.asarray(p, dtype=np.float64) for p in params]
    _, analytic = loss_fn(params)
    analytic = [np.asarray(g, dtype=np.float64).reshape(-1) for g in analytic]
    coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if mode == "sampled" and samples < len(coords):
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(coords), size=samples, replace=False))
        coords = [coords[k] for k in pick]
    elif mode not in ("full", "sampled"):
        raise ValueError(f"unknown mode {mode!r}")
    worst, worst_at = 0.0, (0, 0)
    for i, j in coords:
        flat = params[i].reshape(-1)
        old = flat[j]
        flat[j] = old + eps
        lp, _ = loss_fn(params)
        flat[j] = old - eps
        lm, _ = loss_fn(params)
        flat[j] = old
        num = (lp - lm) / (2 * eps)
        a = analytic[i][j]
        rel = abs(a - num) / max(abs(a), abs(num), floor)
        if rel > worst:
            worst, worst_at = rel, (i, j)
    return GradCheckResult(float(worst), worst_at, len(coords))
