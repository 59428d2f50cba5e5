"""Masked MAE objective, metrics, Adam and the training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import NormStats, Split, WindowedDataset, denormalize, normalize
from .errors import ContractError, DimensionError, DivergenceError, ValidationError
from .model import GraphWaveNet, from_bytes, to_bytes
from .tensor import Tensor, abs_, mul, no_grad, scale, sub, sum_

__all__ = [
    "NormStats", "normalize", "denormalize", "masked_mae_loss", "MetricReport",
    "MetricAccumulator", "metrics", "AdamState", "adam_step", "clip_grad_norm",
    "TrainOptions", "TrainResult", "train_loop", "evaluate",
]

logger = logging.getLogger(__name__)


def masked_mae_loss(pred: Tensor, target, mask) -> Tensor:
    """Mean of ``|pred - target|`` over entries where ``mask`` is true."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} vs target {target.shape}")
    m = np.asarray(mask, dtype=bool)
    if m.shape != pred.shape:
        raise DimensionError(f"mask {m.shape} vs prediction {pred.shape}")
    count = int(m.sum())
    if count == 0:
        warnings.warn("masked_mae_loss: no valid entries; loss defined as 0", stacklevel=2)
        return scale(sum_(pred), 0.0)
    err = abs_(sub(pred, target))
    if count != m.size:
        err = mul(err, Tensor(m.astype(np.float64)))
    return scale(sum_(err), 1.0 / count)


@dataclass
class MetricReport:
    """Per-horizon MAE/RMSE/MAPE (MAPE in percent) and their horizon averages."""

    mae: np.ndarray
    rmse: np.ndarray
    mape: np.ndarray
    counts: np.ndarray

    @property
    def mean_mae(self) -> float:
        return float(np.mean(self.mae))

    @property
    def mean_rmse(self) -> float:
        return float(np.mean(self.rmse))

    @property
    def mean_mape(self) -> float:
        return float(np.mean(self.mape))


class MetricAccumulator:
    """Running sums per horizon step so metrics can be merged across batches."""

    def __init__(self, horizon: int):
        self.abs_sum = np.zeros(horizon)
        self.sq_sum = np.zeros(horizon)
        self.ape_sum = np.zeros(horizon)
        self.count = np.zeros(horizon, dtype=np.int64)
        self.ape_count = np.zeros(horizon, dtype=np.int64)

    def update(self, pred, target, mask) -> None:
        """``pred``/``target``/``mask`` are ``[B, T, ...]`` in data units."""
        pred = np.asarray(pred, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        m = np.asarray(mask, dtype=bool)
        if not pred.shape == target.shape == m.shape:
            raise DimensionError(f"metrics: shapes {pred.shape}, {target.shape}, {m.shape} differ")
        axes = (0,) + tuple(range(2, pred.ndim))
        err = np.where(m, pred - target, 0.0)
        self.abs_sum += np.abs(err).sum(axis=axes)
        self.sq_sum += np.square(err).sum(axis=axes)
        self.count += m.sum(axis=axes)
        pm = m & (target != 0)
        safe = np.where(pm, target, 1.0)
        self.ape_sum += np.where(pm, np.abs(err / safe), 0.0).sum(axis=axes)
        self.ape_count += pm.sum(axis=axes)

    def merge(self, other: "MetricAccumulator") -> "MetricAccumulator":
        for name in ("abs_sum", "sq_sum", "ape_sum", "count", "ape_count"):
            setattr(self, name, getattr(self, name) + getattr(other, name))
        return self

    def report(self) -> MetricReport:
        n = np.maximum(self.count, 1)
        na = np.maximum(self.ape_count, 1)
        return MetricReport(self.abs_sum / n, np.sqrt(self.sq_sum / n),
                            100.0 * self.ape_sum / na, self.count.copy())


def metrics(pred, target, mask) -> MetricReport:
    pred = np.asarray(pred, dtype=np.float64)
    acc = MetricAccumulator(pred.shape[1] if pred.ndim > 1 else 1)
    if pred.ndim == 1:
        acc.update(pred[:, None], np.asarray(target)[:, None], np.asarray(mask)[:, None])
    else:
        acc.update(pred, target, mask)
    return acc.report()


# --- optimiser ---------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, params: Sequence[Tensor],
              grads: Sequence[np.ndarray | None]) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ContractError("optimizer state was built for a different parameter list")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} vs parameter {p.shape}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_grad_norm(grads: Sequence[np.ndarray | None], max_norm: float) -> list[np.ndarray | None]:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads if g is not None))
    if total <= max_norm or total == 0.0:
        return list(grads)
    f = max_norm / total
    return [None if g is None else g * f for g in grads]


# --- training loop -----------------------------------------------------------

@dataclass
class TrainOptions:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 100
    patience: int = 15
    clip: float = 0.0
    seed: int = 0


@dataclass
class EpochRecord:
    epoch: int
    train_mae: float
    val_mae: float
    val_rmse: float
    val_mape: float
    seconds: float


@dataclass
class TrainResult:
    log: list[EpochRecord]
    best_epoch: int
    best_score: float
    best_checkpoint: bytes
    stopped_early: bool


LOG_HEADER = ("epoch", "train_mae", "val_mae", "val_rmse", "val_mape")


def evaluate(model: GraphWaveNet, split: Split, norm: NormStats,
             batch_size: int = 256) -> tuple[float, MetricReport]:
    """Masked MAE in normalised units and de-normalised metrics over a split."""
    acc = MetricAccumulator(model.config.horizon)
    abs_sum = 0.0
    count = 0
    with no_grad():
        for lo in range(0, len(split), batch_size):
            x, y, m = split.batch(np.arange(lo, min(lo + batch_size, len(split))))
            pred = model.forward(Tensor(x), train_mode=False).data
            abs_sum += float(np.abs(np.where(m, pred - y, 0.0)).sum())
            count += int(m.sum())
            acc.update(denormalize(pred, norm), denormalize(y, norm), m)
    return (abs_sum / count if count else 0.0), acc.report()


def train_loop(model: GraphWaveNet, dataset: WindowedDataset, opts: TrainOptions,
               log_path=None, timing_path=None) -> TrainResult:
    """Mini-batch Adam on the training split with best-on-validation selection.

    The model is left holding the best parameters. Early stopping triggers once
    more than ``patience`` consecutive epochs fail to improve the selection score
    (validation MAE, or training MAE when there is no validation split).
    All logged scores are in data units, i.e. after denormalisation.
    """
    train = dataset.train
    if train.empty:
        raise ContractError("training split has no samples")
    params = model.parameters()
    state = AdamState(lr=opts.lr)
    rng = np.random.default_rng(opts.seed)
    model.norm_mean, model.norm_std = dataset.norm.mean, dataset.norm.std

    log: list[EpochRecord] = []
    best_score = math.inf
    best_epoch = 0
    best_ckpt = to_bytes(model)
    bad_epochs = 0
    stopped_early = False
    for epoch in range(1, opts.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train))
        abs_total = 0.0
        count_total = 0
        for lo in range(0, len(order), opts.batch_size):
            x, y, m = train.batch(order[lo:lo + opts.batch_size])
            where = f"epoch {epoch}, batch {lo // opts.batch_size}"
            try:
                pred = model.forward(Tensor(x), train_mode=True)
            except ValidationError as exc:
                # overflowing weights surface first as a non-finite adjacency
                raise DivergenceError(f"{exc} at {where}") from exc
            loss = masked_mae_loss(pred, y, m)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss {value} at {where}")
            for p in params:
                p.grad = None
            loss.backward()
            grads = [p.grad for p in params]
            if opts.clip > 0:
                grads = clip_grad_norm(grads, opts.clip)
            adam_step(state, params, grads)
            n = int(m.sum())
            abs_total += value * n
            count_total += n
        # reported in data units, like the validation metrics
        train_mae = abs_total / max(count_total, 1) * dataset.norm.std

        if dataset.val.empty:
            val_mae, val_rmse, val_mape = math.nan, math.nan, math.nan
            score = train_mae
        else:
            try:
                _, rep = evaluate(model, dataset.val, dataset.norm, opts.batch_size)
            except ValidationError as exc:
                raise DivergenceError(f"{exc} while validating epoch {epoch}") from exc
            val_mae, val_rmse, val_mape = rep.mean_mae, rep.mean_rmse, rep.mean_mape
            if not math.isfinite(val_mae):
                raise DivergenceError(f"non-finite validation MAE at epoch {epoch}")
            score = val_mae
        rec = EpochRecord(epoch, train_mae, val_mae, val_rmse, val_mape, time.perf_counter() - t0)
        log.append(rec)
        logger.info("epoch %d train_mae %.6f val_mae %.6f (%.2fs)",
                    epoch, train_mae, val_mae, rec.seconds)

        if score < best_score:
            best_score, best_epoch, bad_epochs = score, epoch, 0
            best_ckpt = to_bytes(model)
        else:
            bad_epochs += 1
            if bad_epochs > opts.patience:
                stopped_early = True
                break

    _restore(model, best_ckpt)
    if log_path is not None:
        write_log(log, log_path)
    if timing_path is not None:
        write_timing(log, timing_path)
    return TrainResult(log, best_epoch, best_score, best_ckpt, stopped_early)


def _restore(model: GraphWaveNet, ckpt: bytes) -> None:
    best = from_bytes(ckpt)
    for p, q in zip(model.parameters(), best.parameters()):
        p.data = q.data


def write_log(log: Sequence[EpochRecord], path) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in log:
            scores = (r.train_mae, r.val_mae, r.val_rmse, r.val_mape)
            w.writerow([r.epoch, *(repr(v) for v in scores)])


def write_timing(log: Sequence[EpochRecord], path) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "seconds"))
        for r in log:
            w.writerow([r.epoch, f"{r.seconds:.6f}"])
