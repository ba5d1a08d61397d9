"""Training loop (MSE + Adam + plateau scheduler + early stopping) and metrics."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .data import WindowSample, stack_samples
from .hypergraph import build_batch_demand_hypergraphs, stack_incidence
from .model import HyperCast

log = logging.getLogger(__name__)


class TrainingError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr_init: float = 1e-5
    lr_min: float = 1e-6
    lr_factor: float = 0.5
    lr_patience: int = 100
    early_stop_patience: int = 500
    early_stop_min_delta: float = 1.0
    max_epochs: int = 4500
    seed: int = 0
    shuffle_train: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lr_min > self.lr_init:
            raise ValueError(f"lr_min {self.lr_min} exceeds lr_init {self.lr_init}")
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if not 0.0 < self.lr_factor < 1.0:
            raise ValueError(f"lr_factor must lie in (0, 1), got {self.lr_factor}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    lr: float
    wall_time: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = 0
    best_loss: float = float("inf")

    def to_csv(self, path, include_wall_time: bool = False) -> None:
        """Wall time is opt-in so seeded runs produce byte-identical logs."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "lr"] + (["wall_time"] if include_wall_time else []))
            for r in self.records:
                row = [r.epoch, repr(r.train_loss), repr(r.lr)]
                if include_wall_time:
                    row.append(f"{r.wall_time:.3f}")
                w.writerow(row)
            w.writerow([f"# stop_reason={self.stop_reason}", f"best_epoch={self.best_epoch}", repr(self.best_loss)])


class PlateauMonitor:
    """Loss-stream bookkeeping shared by the scheduler and the early stopper.

    An epoch "improves" when its loss beats the best-so-far by more than
    ``min_delta``.  The lr is multiplied by ``factor`` (floored at ``lr_min``)
    after ``lr_patience`` consecutive non-improving epochs; training stops after
    ``stop_patience`` of them.
    """

    def __init__(self, lr: float, lr_min: float, factor: float, lr_patience: int,
                 stop_patience: int, min_delta: float):
        self.lr = lr
        self.lr_min = lr_min
        self.factor = factor
        self.lr_patience = lr_patience
        self.stop_patience = stop_patience
        self.min_delta = min_delta
        self.best = float("inf")
        self.best_epoch = 0
        self.since_best = 0
        self.since_lr_change = 0

    def update(self, epoch: int, loss: float) -> bool:
        """Feed one epoch's loss; returns True when training should stop."""
        if loss < self.best - self.min_delta:
            self.best = loss
            self.best_epoch = epoch
            self.since_best = 0
            self.since_lr_change = 0
            return False
        self.since_best += 1
        self.since_lr_change += 1
        if self.since_lr_change >= self.lr_patience:
            self.lr = max(self.lr * self.factor, self.lr_min)
            self.since_lr_change = 0
        return self.since_best >= self.stop_patience


class HypergraphCache:
    """Per-sample demand hypergraphs, keyed by anchor day (they depend only on the windows)."""

    def __init__(self, K: int):
        self.K = K
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def get(self, samples: Sequence[WindowSample]) -> tuple[np.ndarray, np.ndarray]:
        todo = [s for s in samples if s.anchor_day not in self._cache]
        if todo:
            rec = build_batch_demand_hypergraphs(np.stack([s.recent[:, :, 0] for s in todo]), self.K, "recent")
            wek = build_batch_demand_hypergraphs(np.stack([s.weekly[:, :, 0] for s in todo]), self.K, "weekly")
            for s, hr, hw in zip(todo, rec, wek):
                self._cache[s.anchor_day] = (hr.values, hw.values)
        pairs = [self._cache[s.anchor_day] for s in samples]
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def batch_hypergraphs(samples: Sequence[WindowSample], K: int) -> tuple[np.ndarray, np.ndarray]:
    rec = build_batch_demand_hypergraphs(np.stack([s.recent[:, :, 0] for s in samples]), K, "recent")
    wek = build_batch_demand_hypergraphs(np.stack([s.weekly[:, :, 0] for s in samples]), K, "weekly")
    return stack_incidence(rec), stack_incidence(wek)


def training_days(samples: Sequence[WindowSample]) -> np.ndarray:
    """(N_s, D) demand over the distinct days covered by the recent windows."""
    days: dict[int, np.ndarray] = {}
    for s in samples:
        T_r = s.recent.shape[1]
        for j in range(T_r):
            days.setdefault(s.anchor_day - T_r + 1 + j, s.recent[:, j, 0])
    return np.stack([days[k] for k in sorted(days)], axis=1)


def batch_loss(model: HyperCast, samples, H_rec, H_wek, training: bool, rng) -> ad.Tensor:
    """MSE over every (b, p, t_f) cell, in the model's normalized units."""
    X_rec, X_wek, Y = stack_samples(samples)
    pred = model(X_rec, X_wek, H_rec, H_wek, training=training, rng=rng, denormalize=False)
    return ad.mse_loss(pred, model.normalize_demand(Y))


def train(
    model: HyperCast,
    train_samples: Sequence[WindowSample],
    config: TrainConfig,
    on_epoch: Callable[[EpochRecord], bool | None] | None = None,
    checkpoint_dir: Path | None = None,
) -> tuple[HyperCast, TrainLog]:
    """Fit ``model`` in place and restore the lowest-loss parameters.

    ``on_epoch`` may return True to stop early (recorded as ``callback``).
    """
    if not train_samples:
        raise ValueError("need at least one training sample")
    samples = sorted(train_samples, key=lambda s: s.anchor_day)
    if model.cfg.normalize_inputs:
        model.fit_normalization(training_days(samples))
    rng = np.random.default_rng(config.seed)
    opt = ad.Adam(model.parameters(), lr=config.lr_init)
    monitor = PlateauMonitor(config.lr_init, config.lr_min, config.lr_factor, config.lr_patience,
                             config.early_stop_patience, config.early_stop_min_delta)
    cache = HypergraphCache(model.cfg.K)
    log_ = TrainLog()
    best_state = {k: v.copy() for k, v in model.state_arrays().items()}
    n = len(samples)
    t0 = time.perf_counter()
    stop_reason = "max_epochs"
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n) if config.shuffle_train else np.arange(n)
        lr = monitor.lr
        opt.lr = lr
        total = 0.0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            batch = [samples[i] for i in order[start : start + config.batch_size]]
            H_rec, H_wek = cache.get(batch)
            opt.zero_grad()
            try:
                with ad.Tape() as tape:
                    loss = batch_loss(model, batch, H_rec, H_wek, training=True, rng=rng)
                value = loss.data.item()
                if not np.isfinite(value):
                    raise ad.NonFiniteError("loss is not finite")
                tape.backward(loss)
                del tape, loss
                opt.step()
            except ad.NonFiniteError as exc:
                raise TrainingError(f"non-finite value at epoch {epoch}, batch {bi}: {exc}") from exc
            total += value * len(batch)
        epoch_loss = total / n
        rec = EpochRecord(epoch, epoch_loss, lr, time.perf_counter() - t0)
        log_.records.append(rec)
        if epoch_loss < log_.best_loss:
            log_.best_loss = epoch_loss
            log_.best_epoch = epoch
            best_state = {k: v.copy() for k, v in model.state_arrays().items()}
            if checkpoint_dir is not None:
                model.save(Path(checkpoint_dir) / "best.params")
        if checkpoint_dir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            model.save(Path(checkpoint_dir) / f"epoch{epoch:05d}.params")
        if epoch % 50 == 0 or epoch == 1:
            log.info("epoch %d loss %.6g lr %.3g", epoch, epoch_loss, lr)
        if monitor.update(epoch, epoch_loss):
            stop_reason = "early_stop"
            break
        if on_epoch is not None and on_epoch(rec):
            stop_reason = "callback"
            break
    log_.stop_reason = stop_reason
    model.load_state(best_state)
    return model, log_


def predict(model: HyperCast, samples: Sequence[WindowSample], batch_size: int = 64) -> np.ndarray:
    """Eval-mode forecasts in original units, (S, N_s, T_f)."""
    out = []
    for start in range(0, len(samples), batch_size):
        batch = list(samples[start : start + batch_size])
        H_rec, H_wek = batch_hypergraphs(batch, model.cfg.K)
        X_rec, X_wek, _ = stack_samples(batch)
        out.append(model(X_rec, X_wek, H_rec, H_wek).data)
    return np.concatenate(out, axis=0)


def regression_metrics(y_true, y_pred) -> dict:
    """Pooled MSE, MAE, R^2; R^2 is None when the targets have zero variance."""
    y_true = np.asarray(y_true, dtype=float).ravel()
    y_pred = np.asarray(y_pred, dtype=float).ravel()
    if y_true.shape != y_pred.shape or y_true.size == 0:
        raise ValueError("metrics need equally sized, non-empty arrays")
    resid = y_true - y_pred
    ss_res = float(resid @ resid)
    centered = y_true - y_true.mean()
    ss_tot = float(centered @ centered)
    return {
        "MSE": ss_res / y_true.size,
        "MAE": float(np.abs(resid).mean()),
        "R2": None if ss_tot == 0.0 else 1.0 - ss_res / ss_tot,
    }


def evaluate(model: HyperCast, samples: Sequence[WindowSample]) -> dict:
    if not samples:
        raise ValueError("need at least one sample to evaluate")
    pred = predict(model, samples)
    return regression_metrics(np.stack([s.target for s in samples]), pred)


def persistence_forecast(samples: Sequence[WindowSample]) -> np.ndarray:
    """Repeat the last observed demand across the horizon."""
    return np.stack([np.repeat(s.recent[:, -1:, 0], s.target.shape[1], axis=1) for s in samples])
