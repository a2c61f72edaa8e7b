"""Censorship-aware losses, panel scaling/windowing, and the training loop.

Loss conventions follow the contracts exactly: `tilted_loss` and
`gaussian_nll` are means over elements, `tobit_loss` is a negative
log-likelihood summed over elements, and `censored_tilted_loss` sums the
per-quantile mean pinball terms. The censored pinball residual is
y - min(tau, f) with the threshold active only at censored cells, so a
prediction above the clip point of a censored cell is not penalized and
the loss reduces exactly to the uncensored sum when no flags are set.
The pinball sums are minimized directly; the exponential wrapper around
the quantile likelihood is monotone and adds nothing to the optimum.

Training is mini-batch Adam with global-norm gradient clipping and
early stopping on the validation loss; the returned parameters are the
best-validation snapshot.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .errors import NumericalError, ValidationError
from .queue_engine import DemandPanel
from .tensor_core import Tensor
from .tgcn_model import TgcnConfig, init_params, tgcn_forward, zero_grads

MODEL_KINDS = ("gaussian", "tobit", "qr", "censored_qr")
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.0003
    grad_clip_norm: float = 1.0
    batch_size: int = 256
    max_epochs: int = 1000
    early_stop_delta: float = 0.001
    early_stop_patience: int = 10
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    window: int = 168
    quantiles: tuple[float, ...] = (0.05, 0.5, 0.95)
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValidationError(f"split must sum to 1, got {self.split}")
        if any(not (0.0 < q < 1.0) for q in self.quantiles):
            raise ValidationError(f"quantiles must lie in (0,1): {self.quantiles}")
        if list(self.quantiles) != sorted(self.quantiles):
            raise ValidationError("quantiles must be sorted")
        if self.window < 1:
            raise ValidationError("window must be >= 1")


# -- losses -----------------------------------------------------------------


def _pinball(err: Tensor, q: float) -> Tensor:
    return tc.maximum(tc.mul(err, q), tc.mul(err, q - 1.0))


def tilted_loss(y, pred, q: float) -> Tensor:
    """Mean pinball loss at quantile q: mean(max(q e, (q-1) e)), e = y - pred."""
    if not (0.0 < q < 1.0):
        raise ValidationError(f"quantile must be in (0,1), got {q}")
    err = tc.sub(np.asarray(y, dtype=np.float64), tc.as_tensor(pred))
    return tc.mean(_pinball(err, q))


def censored_tilted_loss(y, preds, tau, censored_flags, quantiles) -> Tensor:
    """Right-censored pinball loss summed over quantiles.

    preds holds one column per quantile in its trailing axis. Where a cell
    is censored the observation equals its threshold and the residual uses
    min(tau, prediction): predictions above the clip point cost nothing and
    predictions below are pulled up with weight q. Uncensored cells use the
    plain residual, so with no flags set this equals the sum of
    tilted_loss over the quantiles.
    """
    y = np.asarray(y, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    flags = np.asarray(censored_flags, dtype=bool)
    preds = tc.as_tensor(preds)
    if preds.data.shape[-1] != len(quantiles):
        raise ValidationError(
            f"got {preds.data.shape[-1]} prediction columns for {len(quantiles)} quantiles")
    if preds.data.shape[:-1] != y.shape:
        raise ValidationError(f"prediction shape {preds.data.shape} does not match targets {y.shape}")
    bad = flags & (np.abs(y - tau) > 1e-9)
    if np.any(bad):
        raise ValidationError("censored cells must have target equal to threshold")
    tau_star = np.where(flags, tau, np.inf)  # inactive threshold off the censored cells
    total = None
    for idx, q in enumerate(quantiles):
        if not (0.0 < q < 1.0):
            raise ValidationError(f"quantile must be in (0,1), got {q}")
        pred_q = preds[..., idx]
        err = tc.sub(y, tc.minimum_const(pred_q, tau_star))
        term = tc.mean(_pinball(err, q))
        total = term if total is None else tc.add(total, term)
    return total


def _neg_log_gaussian(y: np.ndarray, mu, sigma) -> Tensor:
    z = tc.div(tc.sub(y, mu), sigma)
    return tc.add(tc.add(tc.log(sigma), tc.mul(tc.square(z), 0.5)), _HALF_LOG_2PI)


def gaussian_nll(y, mu, sigma) -> Tensor:
    """Mean negative log density of y under Normal(mu, sigma)."""
    y = np.asarray(y, dtype=np.float64)
    mu, sigma = tc.as_tensor(mu), tc.as_tensor(sigma)
    if np.any(sigma.data <= 0):
        raise ValidationError("sigma must be positive")
    return tc.mean(_neg_log_gaussian(y, mu, sigma))


def tobit_loss(y, mu, sigma, censored_flags) -> Tensor:
    """Negative censored Gaussian log-likelihood, summed over elements.

    Uncensored cells contribute the negative log density; censored cells
    contribute the negative log survival (evaluated through the stable
    complementary path, never log(1 - CDF) directly).
    """
    y = np.asarray(y, dtype=np.float64)
    flags = np.asarray(censored_flags, dtype=np.float64)
    mu, sigma = tc.as_tensor(mu), tc.as_tensor(sigma)
    if np.any(sigma.data <= 0):
        raise ValidationError("sigma must be positive")
    nll_uncensored = _neg_log_gaussian(y, mu, sigma)
    log_surv = tc.log_survival(y, mu, sigma)
    terms = tc.sub(tc.mul(nll_uncensored, 1.0 - flags), tc.mul(log_surv, flags))
    return tc.sum_(terms)


# -- scaling and windowing ----------------------------------------------------


@dataclass
class ScaledPanel:
    """Per-node min/max scaled view of a demand panel.

    The affine map is fit on the chronologically first train-fraction of
    hours only, and the same map is applied to observed demand, thresholds
    and the held-out true demand, so clipping commutes with scaling.
    """

    start_time: int
    node_min: np.ndarray      # (k,)
    node_span: np.ndarray     # (k,), 1.0 where the training series is constant
    observed: np.ndarray      # (T, k) scaled
    threshold: np.ndarray     # (T, k) scaled
    censored: np.ndarray      # (T, k) bool
    true_demand: np.ndarray   # (T, k) scaled, evaluation only

    @property
    def n_hours(self) -> int:
        return self.observed.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.observed.shape[1]

    def to_scaled(self, values: np.ndarray) -> np.ndarray:
        return (values - self.node_min) / self.node_span

    def to_kwh(self, scaled: np.ndarray) -> np.ndarray:
        return scaled * self.node_span + self.node_min


def scale_panel(panel: DemandPanel, train_fraction: float = 0.8) -> ScaledPanel:
    if not (0.0 < train_fraction <= 1.0):
        raise ValidationError(f"train_fraction must be in (0,1], got {train_fraction}")
    fit_hours = max(1, int(math.floor(panel.n_hours * train_fraction)))
    region = panel.observed[:fit_hours]
    node_min = region.min(axis=0)
    node_span = region.max(axis=0) - node_min
    node_span = np.where(node_span > 0, node_span, 1.0)
    scale = lambda v: (v - node_min) / node_span
    return ScaledPanel(
        start_time=panel.start_time,
        node_min=node_min,
        node_span=node_span,
        observed=scale(panel.observed),
        threshold=scale(panel.threshold),
        censored=panel.censored.copy(),
        true_demand=scale(panel.true_demand),
    )


def cyclical_time_features(start_time: int, n_hours: int) -> np.ndarray:
    """(T, 4) columns: sin/cos hour-of-day, sin/cos day-of-week (UTC)."""
    hours = start_time // 3600 + np.arange(n_hours)
    hod = hours % 24
    dow = (hours // 24 + 3) % 7  # epoch day 0 was a Thursday
    return np.stack([
        np.sin(2 * np.pi * hod / 24.0),
        np.cos(2 * np.pi * hod / 24.0),
        np.sin(2 * np.pi * dow / 7.0),
        np.cos(2 * np.pi * dow / 7.0),
    ], axis=1)


@dataclass
class WindowDataset:
    """Sliding windows with chronological train/val/test split.

    Sample i covers input hours [i, i+window) and predicts hour i+window;
    feature channels per node are scaled observed demand plus the four
    cyclical time encodings.
    """

    windows: np.ndarray       # (N, window, k, 5) view
    targets: np.ndarray       # (N, k) scaled observed demand at t+1
    taus: np.ndarray          # (N, k) scaled thresholds
    flags: np.ndarray         # (N, k) bool
    true_targets: np.ndarray  # (N, k) scaled true demand
    n_train: int
    n_val: int
    n_test: int
    window_len: int
    node_min: np.ndarray
    node_span: np.ndarray

    @property
    def n_samples(self) -> int:
        return self.targets.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.targets.shape[1]

    def split_slice(self, part: str) -> slice:
        if part == "train":
            return slice(0, self.n_train)
        if part == "val":
            return slice(self.n_train, self.n_train + self.n_val)
        if part == "test":
            return slice(self.n_train + self.n_val, self.n_samples)
        raise ValidationError(f"unknown split part {part!r}")


def make_windows(scaled: ScaledPanel, window_len: int,
                 split: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> WindowDataset:
    total = scaled.n_hours
    if total < window_len + 1:
        raise ValidationError(f"panel has {total} hours, need at least window+1 = {window_len + 1}")
    k = scaled.n_nodes
    time_feats = cyclical_time_features(scaled.start_time, total)
    features = np.empty((total, k, 5))
    features[:, :, 0] = scaled.observed
    features[:, :, 1:] = time_feats[:, None, :]
    n_samples = total - window_len
    view = np.lib.stride_tricks.sliding_window_view(features, window_len, axis=0)
    windows = np.moveaxis(view, -1, 1)[:n_samples]  # (N, window, k, 5)
    n_train = int(math.floor(split[0] * n_samples))
    n_val = int(math.floor(split[1] * n_samples))
    n_test = n_samples - n_train - n_val
    return WindowDataset(
        windows=windows,
        targets=scaled.observed[window_len:],
        taus=scaled.threshold[window_len:],
        flags=scaled.censored[window_len:],
        true_targets=scaled.true_demand[window_len:],
        n_train=n_train,
        n_val=n_val,
        n_test=n_test,
        window_len=window_len,
        node_min=scaled.node_min,
        node_span=scaled.node_span,
    )


# -- optimizer -----------------------------------------------------------------


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale grads so their joint L2 norm is at most max_norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    clipped = {k: g * (max_norm / norm) for k, g in grads.items()}
    # One fp-guard pass: the rescaled norm may land an ulp above the bound.
    new_norm = math.sqrt(sum(float(np.sum(g * g)) for g in clipped.values()))
    if new_norm > max_norm:
        clipped = {k: g * (max_norm / new_norm) for k, g in clipped.items()}
    return clipped, norm


class Adam:
    """Standard Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / (1.0 - self.beta1 ** self.t)
            v_hat = self.v[name] / (1.0 - self.beta2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# -- training loop ----------------------------------------------------------------


def batch_objective(model_kind: str, forecast, targets, taus, flags,
                    quantiles) -> Tensor:
    """Per-batch training objective, normalized to per-element scale so the
    early-stopping delta is comparable across the four models."""
    if model_kind == "gaussian":
        return gaussian_nll(targets, forecast.mean, forecast.std)
    if model_kind == "tobit":
        return tc.div(tobit_loss(targets, forecast.mean, forecast.std, flags),
                      float(targets.size))
    if model_kind == "qr":
        total = None
        for idx, q in enumerate(quantiles):
            term = tilted_loss(targets, forecast.values[..., idx], q)
            total = term if total is None else tc.add(total, term)
        return total
    if model_kind == "censored_qr":
        return censored_tilted_loss(targets, forecast.values, taus, flags, quantiles)
    raise ValidationError(f"unknown model kind {model_kind!r}; expected one of {MODEL_KINDS}")


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    history: list[tuple[int, float, float]]  # (epoch, train_loss, val_loss)
    best_val: float
    stopped_epoch: int
    config: TgcnConfig


def _dataset_loss(model_kind, params, tgcn_config, adj_norm, dataset, idx, quantiles,
                  chunk: int = 512) -> float:
    total = 0.0
    count = 0
    for lo in range(0, len(idx), chunk):
        tc.pool_recycle()
        rows = idx[lo:lo + chunk]
        fc = tgcn_forward(adj_norm, dataset.windows[rows], params, tgcn_config)
        loss = batch_objective(model_kind, fc, dataset.targets[rows], dataset.taus[rows],
                               dataset.flags[rows], quantiles)
        total += loss.item() * len(rows)
        count += len(rows)
    tc.pool_recycle()
    return total / max(count, 1)


def train(model_kind: str, dataset: WindowDataset, adj_norm: np.ndarray,
          config: TrainConfig, tgcn_config: TgcnConfig | None = None) -> TrainResult:
    """Fit one forecaster with mini-batch Adam and early stopping.

    The censorship-unaware kinds (gaussian, qr) ignore the dataset's flags
    and thresholds through their objectives. Deterministic for a fixed
    config seed. Raises NumericalError if the loss stops being finite.
    """
    if model_kind not in MODEL_KINDS:
        raise ValidationError(f"unknown model kind {model_kind!r}; expected one of {MODEL_KINDS}")
    if dataset.n_samples == 0 or dataset.n_train == 0:
        raise ValidationError("dataset has no training samples")
    head = "gaussian" if model_kind in ("gaussian", "tobit") else "quantile"
    if tgcn_config is None:
        tgcn_config = TgcnConfig(head=head, quantiles=config.quantiles)
    elif tgcn_config.head != head:
        raise ValidationError(f"model {model_kind} needs a {head} head")
    params = init_params(tgcn_config, seed=config.seed)
    optimizer = Adam(params, lr=config.lr)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    train_idx = np.arange(dataset.n_train)
    val_idx = np.arange(dataset.n_train, dataset.n_train + dataset.n_val)
    monitor_idx = val_idx if dataset.n_val > 0 else train_idx
    history: list[tuple[int, float, float]] = []
    best_val = math.inf
    best_snapshot = {k: p.data.copy() for k, p in params.items()}
    stall = 0
    stopped = -1
    with tc.buffer_pool():
        for epoch in range(config.max_epochs):
            order = shuffle_rng.permutation(train_idx)
            epoch_loss = 0.0
            seen = 0
            for start in range(0, len(order), config.batch_size):
                tc.pool_recycle()
                rows = order[start:start + config.batch_size]
                try:
                    forecast = tgcn_forward(adj_norm, dataset.windows[rows], params, tgcn_config)
                    loss = batch_objective(model_kind, forecast, dataset.targets[rows],
                                           dataset.taus[rows], dataset.flags[rows],
                                           config.quantiles)
                except NumericalError as exc:
                    raise NumericalError(
                        f"diverged at epoch {epoch}, batch {start // config.batch_size}: {exc}"
                    ) from None
                if not np.isfinite(loss.data):
                    raise NumericalError(
                        f"non-finite training loss at epoch {epoch}, "
                        f"batch {start // config.batch_size}")
                zero_grads(params)
                tc.backward(loss)
                grads = {k: p.grad for k, p in params.items() if p.grad is not None}
                grads, _ = clip_global_norm(grads, config.grad_clip_norm)
                optimizer.step(grads)
                epoch_loss += loss.item() * len(rows)
                seen += len(rows)
            zero_grads(params)
            tc.pool_recycle()
            train_loss = epoch_loss / seen
            val_loss = _dataset_loss(model_kind, params, tgcn_config, adj_norm, dataset,
                                     monitor_idx, config.quantiles)
            if not np.isfinite(val_loss):
                raise NumericalError(f"non-finite validation loss at epoch {epoch}")
            history.append((epoch, train_loss, val_loss))
            if val_loss < best_val:
                best_snapshot = {k: p.data.copy() for k, p in params.items()}
            if val_loss < best_val - config.early_stop_delta:
                stall = 0
            else:
                stall += 1
            best_val = min(best_val, val_loss)
            if stall >= config.early_stop_patience:
                stopped = epoch
                break
    for name, data in best_snapshot.items():
        params[name].data = data
    return TrainResult(params=params, history=history, best_val=best_val,
                       stopped_epoch=stopped, config=tgcn_config)


def save_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, train_loss, val_loss in history:
            w.writerow([epoch, repr(float(train_loss)), repr(float(val_loss))])
