"""Batch entry points: simulate -> panel -> train -> evaluate -> compete.

Every command reads an optional JSON config file with sections
("simulate", "train", "evaluate"); command-line flags override config
keys. Outputs are tidy CSV/JSON files plus a manifest recording input and
output digests, so identical configs and seeds reproduce byte-identical
artifacts. Exit codes: 0 success, 2 validation error, 3 numerical failure.
The environment variable LATENT_DEMAND_SEED is the global seed fallback.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor_core as tc
from .data_ingest import (
    SynthConfig,
    generate_synthetic_stations,
    generate_synthetic_trips,
    load_stations,
    load_trips,
    sample_fleet,
    save_stations,
    save_trips,
)
from .errors import NumericalError, ValidationError
from .eval_metrics import (
    evaluate_forecaster,
    run_experiment,
    save_aggregate_csv,
    save_reports_csv,
)
from .fleet_sim import WillingnessParams, charge, time_to_80
from .losses_training import (
    TrainConfig,
    gaussian_nll,
    make_windows,
    save_history,
    scale_panel,
    tilted_loss,
    train,
)
from .queue_engine import (
    DemandPanel,
    QueuePolicy,
    SimParams,
    StationPanel,
    aggregate_by_station,
    aggregate_demand,
    censorship_stats,
    run_counterfactual,
)
from .spatial_graph import build_adjacency, haversine, kmeans_cluster
from .tgcn_model import TgcnConfig, load_checkpoint, save_checkpoint


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _global_seed(explicit) -> int:
    if explicit is not None:
        return int(explicit)
    return int(os.environ.get("LATENT_DEMAND_SEED", "0"))


def _load_config(path, section: str) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        cfg = json.load(fh)
    if section not in cfg:
        return {}
    if not isinstance(cfg[section], dict):
        raise ValidationError(f"config section {section!r} must be an object")
    return cfg[section]


def _write_manifest(out_dir: Path, command: str, config: dict,
                    inputs: dict[str, Path], outputs: list[Path]) -> None:
    manifest = {
        "tool": "latentdemand",
        "version": __version__,
        "command": command,
        "config": config,
        "inputs": {name: _sha256(p) for name, p in sorted(inputs.items()) if p.exists()},
        "outputs": {p.name: _sha256(p) for p in sorted(outputs)},
    }
    manifest["digest"] = hashlib.sha256(
        json.dumps(manifest, sort_keys=True).encode()).hexdigest()
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


# -- simulate -------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config, "simulate")
    seed = _global_seed(args.seed if args.seed is not None else cfg.get("seed"))
    queue = QueuePolicy((args.queue or cfg.get("queue", "gas_station")))
    penetration = float(args.penetration if args.penetration is not None
                        else cfg.get("penetration", 1.0))
    if not (0.0 < penetration <= 1.0):
        raise ValidationError(f"penetration must be in (0,1], got {penetration}")
    n_clusters = int(args.clusters or cfg.get("clusters", 10))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    inputs: dict[str, Path] = {}

    synth = cfg.get("synthetic", {})
    trips_path = args.trips or cfg.get("trips")
    if trips_path:
        trips_path = Path(trips_path)
        if not trips_path.exists():
            raise ValidationError(f"trips file not found: {trips_path}")
        trips = load_trips(trips_path)
        inputs["trips"] = trips_path
    else:
        synth_cfg = SynthConfig(
            n_vehicles=int(synth.get("n_vehicles", 200)),
            n_days=int(synth.get("n_days", 14)),
            bbox=tuple(synth.get("bbox", SynthConfig().bbox)),
            seed=seed,
        )
        trips = generate_synthetic_trips(synth_cfg, seed)
        save_trips(trips, out_dir / "trips.csv")
    stations_path = args.stations or cfg.get("stations")
    if stations_path:
        stations_path = Path(stations_path)
        if not stations_path.exists():
            raise ValidationError(f"stations file not found: {stations_path}")
        stations = load_stations(stations_path)
        inputs["stations"] = stations_path
    else:
        stations = generate_synthetic_stations(int(synth.get("n_stations", 24)),
                                               bbox=tuple(synth.get("bbox", SynthConfig().bbox)),
                                               seed=seed + 1)
        save_stations(stations, out_dir / "stations.csv")
    if not trips:
        raise ValidationError("no trips to simulate")

    rng = np.random.default_rng([seed, 2])
    vehicle_ids = sorted({t.vehicle_id for t in trips})
    if penetration < 1.0:
        take = max(1, int(round(penetration * len(vehicle_ids))))
        picked = set(rng.choice(len(vehicle_ids), size=take, replace=False).tolist())
        keep = {vehicle_ids[i] for i in picked}
        trips = [t for t in trips if t.vehicle_id in keep]
        vehicle_ids = sorted(keep)
    fleet = sample_fleet(vehicle_ids, seed=seed)
    params = SimParams(
        willingness=WillingnessParams(a=float(cfg.get("willingness_a", 4.0)),
                                      b=float(cfg.get("willingness_b", 2.0))),
        station_choice_sign=float(cfg.get("station_choice_sign", -1.0)),
    )
    ledger = run_counterfactual(trips, fleet, stations, queue, params, seed=seed)
    assignment = kmeans_cluster(stations, min(n_clusters, len(stations)), seed=seed)
    panel = aggregate_demand(ledger, assignment.station_to_cluster)
    station_panel = aggregate_by_station(ledger, [s.station_id for s in stations])
    adjacency = build_adjacency(assignment.centroids,
                                bandwidth_km=float(cfg.get("bandwidth_km", 1.0)))
    stats = censorship_stats(panel)
    stats["queue"] = queue.value
    stats["penetration"] = penetration

    ledger.save_csv(out_dir / "ledger.csv")
    panel.save_csv(out_dir / "panel.csv")
    station_panel.save_csv(out_dir / "station_panel.csv")
    assignment.save_csv(out_dir / "clusters.csv")
    adjacency.save_csv(out_dir / "adjacency.csv")
    with open(out_dir / "stats.json", "w") as fh:
        json.dump(stats, fh, indent=1, sort_keys=True)
        fh.write("\n")
    outputs = [p for p in out_dir.iterdir() if p.name != "manifest.json"]
    resolved = {"seed": seed, "queue": queue.value, "penetration": penetration,
                "clusters": n_clusters, "config": cfg}
    _write_manifest(out_dir, "simulate", resolved, inputs, outputs)
    print(f"simulate: {len(trips)} trips, {len(stations)} stations, "
          f"censored fraction {stats['pooled']:.3f} -> {out_dir}")
    return 0


# -- train ----------------------------------------------------------------------


def _load_adjacency(path, n_nodes: int) -> np.ndarray:
    if path is None:
        return np.eye(n_nodes)
    adj = np.loadtxt(path, delimiter=",", ndmin=2)
    if adj.shape != (n_nodes, n_nodes):
        raise ValidationError(f"adjacency {adj.shape} does not match {n_nodes} panel nodes")
    return adj


def _train_config(cfg: dict, args, seed: int) -> TrainConfig:
    def pick(name, default):
        val = getattr(args, name, None)
        if val is not None:
            return val
        return cfg.get(name, default)

    return TrainConfig(
        lr=float(pick("lr", 0.0003)),
        batch_size=int(pick("batch_size", 256)),
        max_epochs=int(pick("max_epochs", 1000)),
        early_stop_delta=float(cfg.get("early_stop_delta", 0.001)),
        early_stop_patience=int(cfg.get("early_stop_patience", 10)),
        split=tuple(cfg.get("split", (0.8, 0.1, 0.1))),
        window=int(pick("window", 168)),
        quantiles=tuple(cfg.get("quantiles", (0.05, 0.5, 0.95))),
        seed=seed,
    )


def cmd_train(args) -> int:
    cfg = _load_config(args.config, "train")
    seed = _global_seed(args.seed if args.seed is not None else cfg.get("seed"))
    panel_path = Path(args.panel)
    if not panel_path.exists():
        raise ValidationError(f"panel not found: {panel_path}")
    panel = DemandPanel.load_csv(panel_path)
    train_cfg = _train_config(cfg, args, seed)
    model_kind = args.model or cfg.get("model", "censored_qr")
    scaled = scale_panel(panel, train_cfg.split[0])
    dataset = make_windows(scaled, train_cfg.window, train_cfg.split)
    adj_norm = _load_adjacency(args.adjacency or cfg.get("adjacency"), dataset.n_nodes)
    head = "gaussian" if model_kind in ("gaussian", "tobit") else "quantile"
    tgcn_cfg = TgcnConfig(
        head=head,
        quantiles=train_cfg.quantiles,
        gcn_channels=tuple(cfg.get("gcn_channels", (16, 8))),
        hidden_size=int(cfg.get("hidden_size", 32)),
    )
    result = train(model_kind, dataset, adj_norm, train_cfg, tgcn_cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {"model_kind": model_kind, "nodes": dataset.n_nodes, "window": train_cfg.window,
            "split": list(train_cfg.split), "quantiles": list(train_cfg.quantiles),
            "seed": seed, "best_val": result.best_val}
    save_checkpoint(out_dir / "checkpoint.json", result.params, tgcn_cfg, meta)
    save_history(out_dir / "history.csv", result.history)
    inputs = {"panel": panel_path}
    if args.adjacency:
        inputs["adjacency"] = Path(args.adjacency)
    resolved = {"seed": seed, "model": model_kind, "train": cfg,
                "window": train_cfg.window, "max_epochs": train_cfg.max_epochs}
    outputs = [out_dir / "checkpoint.json", out_dir / "history.csv"]
    _write_manifest(out_dir, "train", resolved, inputs, outputs)
    print(f"train[{model_kind}]: {len(result.history)} epochs, "
          f"best val loss {result.best_val:.6f} -> {out_dir}")
    return 0


# -- evaluate ---------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    params, tgcn_cfg, meta = load_checkpoint(args.checkpoint)
    panel = DemandPanel.load_csv(args.panel)
    if int(meta.get("nodes", -1)) != panel.n_clusters:
        raise ValidationError(
            f"checkpoint was trained on {meta.get('nodes')} nodes, panel has {panel.n_clusters}")
    split = tuple(meta.get("split", (0.8, 0.1, 0.1)))
    window = int(meta.get("window", 168))
    quantiles = tuple(meta.get("quantiles", (0.05, 0.5, 0.95)))
    model_kind = meta.get("model_kind", "censored_qr")
    scaled = scale_panel(panel, split[0])
    dataset = make_windows(scaled, window, split)
    adj_norm = _load_adjacency(args.adjacency, dataset.n_nodes)
    report = evaluate_forecaster(params, tgcn_cfg, model_kind, dataset, adj_norm,
                                 quantiles=quantiles, seed=int(meta.get("seed", 0)))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = report.to_row()
    payload["per_node_tilted"] = report.per_node_tilted
    payload["per_node_icp"] = report.per_node_icp
    with open(out_dir / "report.json", "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    outputs = [out_dir / "report.json"]
    if args.series:
        _write_series(out_dir / "series.csv", params, tgcn_cfg, model_kind, dataset,
                      adj_norm, quantiles, panel)
        outputs.append(out_dir / "series.csv")
    _write_manifest(out_dir, "evaluate", {"checkpoint_meta": meta},
                    {"checkpoint": Path(args.checkpoint), "panel": Path(args.panel)}, outputs)
    print(f"evaluate[{model_kind}]: tilted={report.tilted_loss_sum:.4f} "
          f"icp={report.icp:.3f} mil={report.mil:.4f} -> {out_dir}")
    return 0


def _write_series(path, params, tgcn_cfg, model_kind, dataset, adj_norm, quantiles, panel):
    """Tidy per-hour test predictions for external plotting."""
    from .eval_metrics import predict_quantiles

    rows = np.arange(dataset.n_samples)[dataset.split_slice("test")]
    preds = predict_quantiles(params, tgcn_cfg, model_kind, adj_norm,
                              dataset.windows[rows], quantiles)
    base_hour = panel.start_time // 3600 + dataset.window_len
    import csv as _csv

    with open(path, "w", newline="") as fh:
        w = _csv.writer(fh)
        header = ["hour", "node", "true_scaled", "observed_scaled"]
        header += [f"q{q:g}" for q in quantiles]
        w.writerow(header)
        for i, r in enumerate(rows):
            for v in range(dataset.n_nodes):
                w.writerow([base_hour + int(r), v,
                            repr(float(dataset.true_targets[r, v])),
                            repr(float(dataset.targets[r, v]))]
                           + [repr(float(preds[i, v, j])) for j in range(len(quantiles))])


# -- compete -----------------------------------------------------------------------


def cmd_compete(args) -> int:
    cfg = _load_config(args.config, "train")
    seed = _global_seed(args.seed)
    station_panel = StationPanel.load_csv(args.station_panel)
    clusters_path = Path(args.clusters)
    if not clusters_path.exists():
        raise ValidationError(f"clusters file not found: {clusters_path}")
    station_to_cluster = {}
    import csv as _csv

    with open(clusters_path, newline="") as fh:
        for row in _csv.DictReader(fh):
            station_to_cluster[row["station_id"]] = int(row["cluster"])
    shares = [float(s) for s in args.shares.split(",")]
    model_kinds = args.models.split(",")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [seed]
    train_cfg = _train_config(cfg, args, seed)
    adj = None
    if args.adjacency:
        k = max(station_to_cluster.values()) + 1
        adj = _load_adjacency(args.adjacency, k)
    reports, aggregate = run_experiment(
        "competition", model_kinds=model_kinds, seeds=seeds, train_config=train_cfg,
        station_panel=station_panel, station_to_cluster=station_to_cluster,
        shares=shares, adj_norm=adj,
        tgcn_overrides={"gcn_channels": tuple(cfg.get("gcn_channels", (16, 8))),
                        "hidden_size": int(cfg.get("hidden_size", 32))},
        jobs=args.jobs)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_reports_csv(out_dir / "reports.csv", reports)
    save_aggregate_csv(out_dir / "aggregate.csv", aggregate)
    _write_manifest(out_dir, "compete",
                    {"shares": shares, "models": model_kinds, "seeds": seeds},
                    {"station_panel": Path(args.station_panel), "clusters": clusters_path},
                    [out_dir / "reports.csv", out_dir / "aggregate.csv"])
    print(f"compete: {len(reports)} runs over shares {shares} -> {out_dir}")
    return 0


# -- selftest ----------------------------------------------------------------------


def cmd_selftest(args) -> int:
    """Fast embedded oracle checks; exits 3 on any failure."""
    failures = []

    def check(name, ok):
        print(f"[{'PASS' if ok else 'FAIL'}] {name}")
        if not ok:
            failures.append(name)

    check("time_to_80 spot value", abs(time_to_80(57.0, 0.5, 50.0) - 0.456) < 1e-12)
    check("charge branch-1 spot value",
          abs(charge(0.5, 57.0, 22.0, 0.2) - (0.5 + 0.2 * 22.0 / 57.0)) < 1e-12)
    check("great-circle spot value",
          abs(haversine(55.6761, 12.5683, 56.1629, 10.2039) - 156.5) < 0.5)
    mu = tc.parameter(np.array([0.3, 0.7]))
    sigma = tc.parameter(np.array([0.5, 0.8]))
    y = np.array([0.2, 1.1])
    loss = gaussian_nll(y, mu, sigma)
    tc.backward(loss)
    eps = 1e-6
    fd = np.zeros(2)
    for i in range(2):
        up = mu.data.copy()
        up[i] += eps
        dn = mu.data.copy()
        dn[i] -= eps
        fd[i] = (gaussian_nll(y, tc.as_tensor(up), tc.as_tensor(sigma.data)).item()
                 - gaussian_nll(y, tc.as_tensor(dn), tc.as_tensor(sigma.data)).item()) / (2 * eps)
    check("gaussian_nll gradient vs finite differences",
          np.allclose(mu.grad, fd, rtol=1e-5, atol=1e-8))
    pred = tc.parameter(np.array([1.0, 2.0, 3.0]))
    t_loss = tilted_loss(np.array([2.0, 2.0, 2.0]), pred, 0.9)
    check("tilted loss asymmetry",
          abs(t_loss.item() - (0.9 * 1.0 + 0.0 + 0.1 * 1.0) / 3.0) < 1e-12)
    from .eval_metrics import seasonal_panel
    from .queue_engine import censorship_stats as _stats

    panel = seasonal_panel(3, 200, seed=0)
    check("uncensored panel has zero censored fraction", _stats(panel)["pooled"] == 0.0)
    if failures:
        print(f"selftest: {len(failures)} failure(s)")
        return 3
    print("selftest: all checks passed")
    return 0


# -- entry point --------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latent-demand",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="replay trips through a charging queue")
    sim.add_argument("--config")
    sim.add_argument("--trips")
    sim.add_argument("--stations")
    sim.add_argument("--queue", choices=[p.value for p in QueuePolicy])
    sim.add_argument("--penetration", type=float)
    sim.add_argument("--clusters", type=int)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--out", required=True)
    sim.set_defaults(func=cmd_simulate)

    tr = sub.add_parser("train", help="fit a forecaster on a demand panel")
    tr.add_argument("--config")
    tr.add_argument("--panel", required=True)
    tr.add_argument("--adjacency")
    tr.add_argument("--model", choices=["gaussian", "tobit", "qr", "censored_qr"])
    tr.add_argument("--window", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--batch-size", dest="batch_size", type=int)
    tr.add_argument("--max-epochs", dest="max_epochs", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("evaluate", help="score a checkpoint against true demand")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--panel", required=True)
    ev.add_argument("--adjacency")
    ev.add_argument("--series", action="store_true",
                    help="also write per-hour test predictions as tidy CSV")
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_evaluate)

    cp = sub.add_parser("compete", help="competing-services experiment grid")
    cp.add_argument("--config")
    cp.add_argument("--station-panel", dest="station_panel", required=True)
    cp.add_argument("--clusters", required=True, help="clusters.csv from simulate")
    cp.add_argument("--adjacency")
    cp.add_argument("--shares", default="0.10,0.25,0.50,0.75,0.95")
    cp.add_argument("--models", default="gaussian,tobit,qr,censored_qr")
    cp.add_argument("--seeds", default=None)
    cp.add_argument("--seed", type=int)
    cp.add_argument("--window", type=int)
    cp.add_argument("--lr", type=float)
    cp.add_argument("--batch-size", dest="batch_size", type=int)
    cp.add_argument("--max-epochs", dest="max_epochs", type=int)
    cp.add_argument("--jobs", type=int, default=1)
    cp.add_argument("--out", required=True)
    cp.set_defaults(func=cmd_compete)

    st = sub.add_parser("selftest", help="run the embedded oracle checks")
    st.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
