"""Test-set metrics against the true latent demand plus the two experiment
protocols: total demand across queues/penetrations, and competing services
where only one provider's stations are observable.

All metrics are computed against TRUE demand in scaled units (as trained),
with an inverse-transformed kWh view alongside. Interval metrics use the
lowest and highest configured quantiles.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .errors import ValidationError
from .losses_training import TrainConfig, WindowDataset, make_windows, scale_panel, train
from .queue_engine import DemandPanel, StationPanel
from .tgcn_model import TgcnConfig, tgcn_forward


def icp(q_low, q_high, y_true) -> float:
    """Interval coverage: fraction of true values inside [q_low, q_high]
    (closed interval)."""
    q_low, q_high, y_true = (np.asarray(a, dtype=float) for a in (q_low, q_high, y_true))
    if not (q_low.shape == q_high.shape == y_true.shape):
        raise ValidationError(
            f"icp shape mismatch: {q_low.shape}, {q_high.shape}, {y_true.shape}")
    return float(np.mean((q_low <= y_true) & (y_true <= q_high)))


def mil(q_low, q_high) -> float:
    """Mean interval length: mean absolute distance between the bounds."""
    q_low, q_high = np.asarray(q_low, dtype=float), np.asarray(q_high, dtype=float)
    if q_low.shape != q_high.shape:
        raise ValidationError(f"mil shape mismatch: {q_low.shape} vs {q_high.shape}")
    return float(np.mean(np.abs(q_high - q_low)))


def quantiles_from_gaussian(mu, sigma, quantiles) -> np.ndarray:
    """Quantiles of Normal(mu, sigma): mu + sigma * z_q, stacked on a new
    trailing axis in the order given."""
    mu, sigma = np.asarray(mu, dtype=float), np.asarray(sigma, dtype=float)
    return np.stack([mu + sigma * float(ndtri(q)) for q in quantiles], axis=-1)


def pinball(y_true: np.ndarray, pred: np.ndarray, q: float) -> np.ndarray:
    err = y_true - pred
    return np.maximum(q * err, (q - 1.0) * err)


# -- synthetic seasonal processes (experiment inputs at desk scale) ----------


def seasonal_series(n_series: int, n_hours: int, seed: int,
                    start_time: int = 0) -> np.ndarray:
    """(hours, series) strictly positive demand with morning/evening peaks,
    a weekend dip and Gaussian noise. Used as ground-truth latent demand."""
    rng = np.random.default_rng(seed)
    hours = start_time // 3600 + np.arange(n_hours)
    hod = (hours % 24).astype(float)
    dow = (hours // 24 + 3) % 7
    weekend = (dow >= 5).astype(float)
    out = np.empty((n_hours, n_series))
    for j in range(n_series):
        base = rng.uniform(1.0, 2.0)
        amp_morning = rng.uniform(2.0, 4.0)
        amp_evening = rng.uniform(2.0, 4.0)
        shift = rng.uniform(-1.0, 1.0)
        sigma = rng.uniform(0.15, 0.30)
        bumps = (amp_morning * np.exp(-0.5 * ((hod - 8.0 - shift) / 2.0) ** 2)
                 + amp_evening * np.exp(-0.5 * ((hod - 17.5 - shift) / 2.5) ** 2))
        mean = base + bumps * (1.0 - 0.35 * weekend)
        out[:, j] = mean + rng.normal(0.0, sigma, size=n_hours)
    return np.maximum(out, 0.0)


def seasonal_panel(n_nodes: int, n_hours: int, seed: int, start_time: int = 0) -> DemandPanel:
    """Uncensored panel (observed == true) from the seasonal process."""
    demand = seasonal_series(n_nodes, n_hours, seed, start_time)
    return DemandPanel(start_time=start_time, observed=demand.copy(), true_demand=demand.copy(),
                       censored=np.zeros_like(demand, dtype=bool), threshold=demand.copy())


def clip_panel(panel: DemandPanel, censor_quantile: float = 0.6) -> DemandPanel:
    """Right-censor a panel at per-node constant thresholds.

    The threshold of node v is the censor_quantile-quantile of its true
    series, so roughly (1 - censor_quantile) of hours end up censored.
    """
    if not (0.0 < censor_quantile < 1.0):
        raise ValidationError(f"censor_quantile must be in (0,1), got {censor_quantile}")
    cut = np.quantile(panel.true_demand, censor_quantile, axis=0)
    observed = np.minimum(panel.true_demand, cut)
    censored = panel.true_demand > observed
    return DemandPanel(start_time=panel.start_time, observed=observed,
                       true_demand=panel.true_demand.copy(), censored=censored,
                       threshold=observed.copy())


def seasonal_station_panel(n_stations: int, n_hours: int, seed: int,
                           start_time: int = 0) -> StationPanel:
    demand = seasonal_series(n_stations, n_hours, seed, start_time)
    ids = [f"s{j:04d}" for j in range(n_stations)]
    return StationPanel(start_time=start_time, station_ids=ids, demand=demand)


# -- competing-services censoring --------------------------------------------


def market_share_censor(station_panel: StationPanel, station_to_cluster: dict[str, int],
                        provider_share: float, seed: int = 0) -> DemandPanel:
    """Censor a station panel down to one provider's view.

    ceil(share * n_stations) stations are sampled uniformly without
    replacement as the provider's. Per cluster-hour, observed demand sums
    the provider's stations, true demand sums all stations, and cells where
    competitors contribute are flagged censored with the observed value as
    the threshold.
    """
    if not (0.0 < provider_share <= 1.0):
        raise ValidationError(f"provider_share must be in (0,1], got {provider_share}")
    ids = station_panel.station_ids
    missing = [s for s in ids if s not in station_to_cluster]
    if missing:
        raise ValidationError(f"stations without a cluster: {missing[:5]}")
    n_pick = int(np.ceil(provider_share * len(ids)))
    rng = np.random.default_rng(seed)
    picked = set(rng.choice(len(ids), size=n_pick, replace=False).tolist())
    k = max(station_to_cluster.values()) + 1
    n_hours = station_panel.demand.shape[0]
    observed = np.zeros((n_hours, k))
    true_demand = np.zeros((n_hours, k))
    for j, sid in enumerate(ids):
        c = station_to_cluster[sid]
        true_demand[:, c] += station_panel.demand[:, j]
        if j in picked:
            observed[:, c] += station_panel.demand[:, j]
    censored = true_demand > observed
    return DemandPanel(start_time=station_panel.start_time, observed=observed,
                       true_demand=true_demand, censored=censored, threshold=observed.copy())


# -- model evaluation -----------------------------------------------------------


@dataclass
class EvalReport:
    """Metrics of one trained model on the test split, against true demand."""

    model_kind: str
    seed: int
    meta: dict = field(default_factory=dict)
    tilted_loss_sum: float = 0.0  # node losses summed, averaged over hours and quantiles
    icp: float = 0.0
    mil: float = 0.0
    per_node_tilted: list[float] = field(default_factory=list)
    per_node_icp: list[float] = field(default_factory=list)
    crossing_rate: float = 0.0
    kwh: dict = field(default_factory=dict)

    def to_row(self) -> dict:
        row = {"model_kind": self.model_kind, "seed": self.seed,
               "tilted_loss_sum": self.tilted_loss_sum, "icp": self.icp, "mil": self.mil,
               "crossing_rate": self.crossing_rate,
               "tilted_loss_sum_kwh": self.kwh.get("tilted_loss_sum"),
               "mil_kwh": self.kwh.get("mil")}
        row.update(self.meta)
        return row


def predict_quantiles(params, tgcn_config: TgcnConfig, model_kind: str,
                      adj_norm: np.ndarray, windows: np.ndarray, quantiles,
                      batch_size: int = 512) -> np.ndarray:
    """(N, nodes, len(quantiles)) predicted quantiles; Gaussian-head models
    go through their fitted distribution."""
    from . import tensor_core as tc

    chunks = []
    with tc.buffer_pool():
        for lo in range(0, windows.shape[0], batch_size):
            tc.pool_recycle()
            fc = tgcn_forward(adj_norm, windows[lo:lo + batch_size], params, tgcn_config)
            if model_kind in ("gaussian", "tobit"):
                chunks.append(quantiles_from_gaussian(fc.mean.data, fc.std.data, quantiles))
            else:
                chunks.append(fc.values.data.copy())
    return np.concatenate(chunks, axis=0)


def evaluate_forecaster(params, tgcn_config: TgcnConfig, model_kind: str,
                        dataset: WindowDataset, adj_norm: np.ndarray,
                        quantiles=(0.05, 0.5, 0.95), part: str = "test",
                        seed: int = 0, meta: dict | None = None) -> EvalReport:
    """Evaluate predicted quantiles against TRUE (latent) scaled demand."""
    rows = np.arange(dataset.n_samples)[dataset.split_slice(part)]
    if len(rows) == 0:
        raise ValidationError(f"no samples in split {part!r}")
    preds = predict_quantiles(params, tgcn_config, model_kind, adj_norm,
                              dataset.windows[rows], quantiles)
    y_true = dataset.true_targets[rows]
    per_node_tilted = np.zeros(dataset.n_nodes)
    for i, q in enumerate(quantiles):
        per_node_tilted += pinball(y_true, preds[:, :, i], q).mean(axis=0)
    per_node_tilted /= len(quantiles)
    lo, hi = preds[:, :, 0], preds[:, :, -1]
    per_node_icp = ((lo <= y_true) & (y_true <= hi)).mean(axis=0)
    crossing = np.any(np.diff(preds, axis=2) < 0, axis=2)
    # kWh view through the per-node inverse transform
    span = dataset.node_span
    y_kwh = y_true * span + dataset.node_min
    preds_kwh = preds * span[None, :, None] + dataset.node_min[None, :, None]
    kwh_tilted = 0.0
    for i, q in enumerate(quantiles):
        kwh_tilted += pinball(y_kwh, preds_kwh[:, :, i], q).mean(axis=0)
    kwh_tilted /= len(quantiles)
    return EvalReport(
        model_kind=model_kind,
        seed=seed,
        meta=meta or {},
        tilted_loss_sum=float(per_node_tilted.sum()),
        icp=icp(lo, hi, y_true),
        mil=mil(lo, hi),
        per_node_tilted=[float(x) for x in per_node_tilted],
        per_node_icp=[float(x) for x in per_node_icp],
        crossing_rate=float(crossing.mean()),
        kwh={"tilted_loss_sum": float(kwh_tilted.sum()),
             "mil": mil(preds_kwh[:, :, 0], preds_kwh[:, :, -1])},
    )


# -- experiment protocols ----------------------------------------------------------


def _train_eval_cell(args) -> EvalReport:
    (panel, model_kind, seed, train_config, tgcn_overrides, meta) = args
    cfg = TrainConfig(**{**train_config.__dict__, "seed": seed})
    scaled = scale_panel(panel, cfg.split[0])
    dataset = make_windows(scaled, cfg.window, cfg.split)
    adj_norm = np.eye(dataset.n_nodes) if tgcn_overrides.get("adj_norm") is None \
        else tgcn_overrides["adj_norm"]
    head = "gaussian" if model_kind in ("gaussian", "tobit") else "quantile"
    tgcn_config = TgcnConfig(
        head=head,
        quantiles=cfg.quantiles,
        gcn_channels=tuple(tgcn_overrides.get("gcn_channels", (16, 8))),
        hidden_size=int(tgcn_overrides.get("hidden_size", 32)),
    )
    result = train(model_kind, dataset, adj_norm, cfg, tgcn_config)
    return evaluate_forecaster(result.params, tgcn_config, model_kind, dataset, adj_norm,
                               quantiles=cfg.quantiles, seed=seed, meta=meta)


def run_experiment(protocol: str, *, model_kinds, seeds, train_config: TrainConfig,
                   panels: dict | None = None, station_panel: StationPanel | None = None,
                   station_to_cluster: dict | None = None, shares=None,
                   adjacencies: dict | None = None, adj_norm: np.ndarray | None = None,
                   tgcn_overrides: dict | None = None,
                   jobs: int = 1) -> tuple[list[EvalReport], list[dict]]:
    """Grid runner: every cell is trained/evaluated once per seed.

    total_demand: ``panels`` maps (queue, penetration) -> DemandPanel.
    competition: ``station_panel`` + ``station_to_cluster`` + ``shares``;
    the provider's stations are resampled per seed.

    Returns per-run reports plus per-cell aggregates (mean/std across
    seeds; a single seed reports std 0 with std_defined=False).
    """
    overrides = dict(tgcn_overrides or {})
    tasks = []
    if protocol == "total_demand":
        if not panels:
            raise ValidationError("total_demand needs a non-empty panels grid")
        for key in sorted(panels):
            queue, penetration = key
            cell_adj = (adjacencies or {}).get(key, adj_norm)
            for kind in model_kinds:
                for seed in seeds:
                    meta = {"queue": queue, "penetration": penetration}
                    tasks.append((panels[key], kind, seed, train_config,
                                  {**overrides, "adj_norm": cell_adj}, meta))
    elif protocol == "competition":
        if station_panel is None or station_to_cluster is None or not shares:
            raise ValidationError("competition needs station_panel, station_to_cluster and shares")
        for share in shares:
            for kind in model_kinds:
                for seed in seeds:
                    panel = market_share_censor(station_panel, station_to_cluster,
                                                share, seed=seed)
                    meta = {"share": share}
                    tasks.append((panel, kind, seed, train_config,
                                  {**overrides, "adj_norm": adj_norm}, meta))
    else:
        raise ValidationError(f"unknown protocol {protocol!r}")
    if not tasks or not model_kinds or not seeds:
        raise ValidationError("experiment grid is empty")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_train_eval_cell, tasks))
    else:
        reports = [_train_eval_cell(t) for t in tasks]
    return reports, aggregate_reports(reports)


def aggregate_reports(reports: list[EvalReport]) -> list[dict]:
    """Group by (meta, model_kind) and report mean/std over seeds."""
    groups: dict[tuple, list[EvalReport]] = {}
    for r in reports:
        key = (tuple(sorted(r.meta.items())), r.model_kind)
        groups.setdefault(key, []).append(r)
    rows = []
    for (meta_items, kind), members in sorted(groups.items(), key=lambda kv: str(kv[0])):
        row = dict(meta_items)
        row["model_kind"] = kind
        row["n_seeds"] = len(members)
        for metric in ("tilted_loss_sum", "icp", "mil"):
            vals = np.array([getattr(m, metric) for m in members], dtype=float)
            row[f"{metric}_mean"] = float(vals.mean())
            row[f"{metric}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        row["std_defined"] = len(members) > 1
        rows.append(row)
    return rows


def save_reports_csv(path, reports: list[EvalReport]) -> None:
    rows = [r.to_row() for r in reports]
    fields = sorted({k for row in rows for k in row})
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in rows:
            w.writerow(row)


def save_aggregate_csv(path, aggregate: list[dict]) -> None:
    fields = sorted({k for row in aggregate for k in row})
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in aggregate:
            w.writerow(row)
