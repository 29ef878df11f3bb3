"""MSE objective, Adam, and the early-stopping training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .backbone import ForecastModel
from .data import Dataset, windows
from .errors import ConfigError, DimensionError, NonFiniteError
from .numcore import Matrix

log = logging.getLogger(__name__)

LR_GRID = (1e-4, 5e-4, 1e-3, 5e-3, 1e-2)


def mse(Y, Y_hat) -> Matrix:
    """Mean squared error as a 1x1 matrix; differentiable in either argument."""
    Y = Y if isinstance(Y, Matrix) else Matrix(Y)
    Y_hat = Y_hat if isinstance(Y_hat, Matrix) else Matrix(Y_hat)
    if Y.shape != Y_hat.shape:
        raise DimensionError(f"mse shape mismatch: {Y.shape} vs {Y_hat.shape}")
    return nc.mean(nc.square(nc.sub(Y_hat, Y)))


def mae(Y, Y_hat) -> float:
    Y = np.asarray(Y.data if isinstance(Y, Matrix) else Y)
    Y_hat = np.asarray(Y_hat.data if isinstance(Y_hat, Matrix) else Y_hat)
    if Y.shape != Y_hat.shape:
        raise DimensionError(f"mae shape mismatch: {Y.shape} vs {Y_hat.shape}")
    return float(np.abs(Y - Y_hat).mean())


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, Matrix],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place. Parameters without a grad are skipped."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    lr_grid: list[float] | None = None
    batch_size: int = 32
    max_epochs: int = 10
    patience: int = 3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("max_epochs and batch_size must be >= 1")
        rates = [self.learning_rate] + list(self.lr_grid or [])
        if any(r <= 0 for r in rates):
            raise ConfigError("learning rates must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    selected_lr: float = 0.0
    best_epoch: int = 0
    stop_epoch: int = 0
    diverged: bool = False
    candidates: list[dict] = field(default_factory=list)
    wall_clock_s: float = 0.0

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("wall_clock_s")
        return d


def evaluate(model: ForecastModel, ds: Dataset, split: str, L: int, H: int, batch_size: int = 256) -> dict:
    """Window-averaged MSE and MAE on one split (normalised scale)."""
    sq = ab = 0.0
    count = 0
    with nc.no_record():
        for batch in windows(ds, split, L, H, batch_size):
            pred = model(batch.inputs).data
            diff = pred - batch.targets
            sq += float((diff * diff).sum())
            ab += float(np.abs(diff).sum())
            count += diff.size
    if count == 0:
        return {"mse": float("nan"), "mae": float("nan"), "windows": 0}
    return {"mse": sq / count, "mae": ab / count, "windows": count // (ds.N * H)}


def _fit(model: ForecastModel, ds: Dataset, config: TrainConfig, lr: float, L: int, H: int) -> TrainHistory:
    hist = TrainHistory(selected_lr=lr)
    params = model.parameters()
    state = AdamState()
    best = np.inf
    best_state = model.snapshot()
    bad_epochs = 0
    for epoch in range(1, config.max_epochs + 1):
        shuffle = int(np.random.SeedSequence([config.seed, epoch]).generate_state(1)[0])
        batches = windows(ds, "train", L, H, config.batch_size, shuffle_seed=shuffle)
        total = 0.0
        seen = 0
        try:
            for batch in batches:
                model.zero_grad()
                with nc.Tape() as tape:
                    loss = mse(batch.targets, model(batch.inputs))
                nc.backward(loss, tape)
                adam_step(params, state, lr, config.beta1, config.beta2, config.eps)
                total += loss.item() * len(batch)
                seen += len(batch)
            val = evaluate(model, ds, "val", L, H)["mse"]
        except NonFiniteError:
            hist.diverged = True
            hist.train_loss.append(float("inf"))
            hist.val_loss.append(float("inf"))
            hist.stop_epoch = epoch
            log.info("lr=%g diverged at epoch %d", lr, epoch)
            break
        if not np.isfinite(val):
            val = float("inf")
        hist.train_loss.append(total / seen)
        hist.val_loss.append(val)
        hist.stop_epoch = epoch
        log.debug("lr=%g epoch %d train %.6f val %.6f", lr, epoch, total / seen, val)
        if val < best:
            best = val
            best_state = model.snapshot()
            hist.best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break
    model.restore(best_state)
    model.zero_grad()
    return hist


def train(model: ForecastModel, ds: Dataset, config: TrainConfig, L: int | None = None, H: int | None = None):
    """Train with early stopping; with ``lr_grid`` pick the rate by best validation MSE.

    Each candidate rate restarts from the model's initial parameters. The
    model is left holding the best-validation parameters of the winning rate.
    """
    L = model.L if L is None else L
    H = model.backbone.H if H is None else H
    if not ds.normalized:
        raise ConfigError("dataset must be split and normalized before training")
    for name in ("train", "val"):
        if len(windows(ds, name, L, H, config.batch_size)) == 0:
            raise ConfigError(f"{name} split yields zero windows for L={L}, H={H}")
    start = time.perf_counter()
    rates = list(config.lr_grid) if config.lr_grid else [config.learning_rate]
    init = model.snapshot()
    best_hist, best_val, best_state = None, np.inf, None
    summaries = []
    for lr in rates:
        model.restore(init)
        # divergence surfaces as NonFiniteError, so numpy's warnings are noise
        with np.errstate(over="ignore", invalid="ignore"):
            hist = _fit(model, ds, config, lr, L, H)
        val = min(hist.val_loss) if hist.val_loss else np.inf
        summaries.append({"lr": lr, "best_val": val, "stop_epoch": hist.stop_epoch})
        if best_hist is None or val < best_val:
            best_hist, best_val, best_state = hist, val, model.snapshot()
    model.restore(best_state)
    best_hist.candidates = summaries if len(rates) > 1 else []
    best_hist.wall_clock_s = time.perf_counter() - start
    return model, best_hist
