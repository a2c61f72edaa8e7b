import json
from pathlib import Path

import pytest

from latentdemand.cli import main
from latentdemand.eval_metrics import clip_panel, seasonal_panel, seasonal_station_panel
from latentdemand.queue_engine import DemandPanel


def run_cli(*args) -> int:
    return main([str(a) for a in args])


def write_config(tmp_path, payload) -> Path:
    p = tmp_path / "config.json"
    p.write_text(json.dumps(payload))
    return p


def small_sim_config(tmp_path, queue="gas_station", penetration=1.0, seed=3):
    return write_config(tmp_path, {
        "simulate": {
            "synthetic": {"n_vehicles": 40, "n_days": 4, "n_stations": 8},
            "queue": queue,
            "penetration": penetration,
            "clusters": 3,
            "seed": seed,
        }
    })


def save_panel(tmp_path, censor=True, hours=620, nodes=3, seed=0) -> Path:
    panel = seasonal_panel(nodes, hours, seed=seed)
    if censor:
        panel = clip_panel(panel, 0.6)
    p = tmp_path / "panel.csv"
    panel.save_csv(p)
    return p


class TestSimulate:
    def test_outputs_and_stats(self, tmp_path):
        cfg = small_sim_config(tmp_path)
        out = tmp_path / "run"
        assert run_cli("simulate", "--config", cfg, "--out", out) == 0
        for name in ("ledger.csv", "panel.csv", "station_panel.csv", "clusters.csv",
                     "adjacency.csv", "stats.json", "manifest.json"):
            assert (out / name).exists(), name
        stats = json.loads((out / "stats.json").read_text())
        assert 0.0 <= stats["pooled"] <= 1.0
        assert len(stats["per_cluster"]) == 3
        panel = DemandPanel.load_csv(out / "panel.csv")
        assert panel.n_clusters == 3

    def test_identical_rerun_byte_identical(self, tmp_path):
        cfg = small_sim_config(tmp_path)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert run_cli("simulate", "--config", cfg, "--out", out1) == 0
        assert run_cli("simulate", "--config", cfg, "--out", out2) == 0
        for name in ("ledger.csv", "panel.csv", "station_panel.csv", "manifest.json"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name

    def test_missing_trips_file_exit_2(self, tmp_path):
        cfg = write_config(tmp_path, {"simulate": {"trips": "nope.csv"}})
        assert run_cli("simulate", "--config", cfg, "--out", tmp_path / "x") == 2

    def test_censoring_monotone_in_penetration(self, tmp_path):
        fractions = []
        for i, pen in enumerate((0.3, 1.0)):
            cfg = small_sim_config(tmp_path, queue="first_come", penetration=pen)
            out = tmp_path / f"pen{i}"
            assert run_cli("simulate", "--config", cfg, "--out", out) == 0
            fractions.append(json.loads((out / "stats.json").read_text())["pooled"])
        assert fractions[0] <= fractions[1] + 1e-12

    def test_first_come_censors_at_least_gas_station(self, tmp_path):
        fractions = {}
        for queue in ("gas_station", "first_come"):
            cfg = small_sim_config(tmp_path, queue=queue)
            out = tmp_path / queue
            assert run_cli("simulate", "--config", cfg, "--out", out) == 0
            fractions[queue] = json.loads((out / "stats.json").read_text())["pooled"]
        assert fractions["gas_station"] <= fractions["first_come"] + 1e-12


class TestTrain:
    def test_tiny_panel_five_epochs(self, tmp_path):
        panel = save_panel(tmp_path)
        cfg = write_config(tmp_path, {"train": {"gcn_channels": [6, 4], "hidden_size": 8}})
        out = tmp_path / "run"
        code = run_cli("train", "--panel", panel, "--model", "qr", "--max-epochs", 5,
                       "--seed", 0, "--config", cfg, "--out", out)
        assert code == 0
        history = (out / "history.csv").read_text().strip().splitlines()
        assert history[0] == "epoch,train_loss,val_loss"
        assert len(history) == 6  # header + 5 epochs
        assert (out / "checkpoint.json").exists()

    def test_same_seed_identical_outputs(self, tmp_path):
        panel = save_panel(tmp_path)
        cfg = write_config(tmp_path, {"train": {"gcn_channels": [6, 4], "hidden_size": 8}})
        outs = [tmp_path / "r1", tmp_path / "r2"]
        for out in outs:
            assert run_cli("train", "--panel", panel, "--model", "censored_qr",
                           "--max-epochs", 3, "--seed", 7, "--config", cfg,
                           "--out", out) == 0
        for name in ("history.csv", "checkpoint.json", "manifest.json"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name

    def test_censored_equals_plain_on_uncensored_panel(self, tmp_path):
        panel = save_panel(tmp_path, censor=False)
        cfg = write_config(tmp_path, {"train": {"gcn_channels": [6, 4], "hidden_size": 8}})
        finals = {}
        for model in ("qr", "censored_qr"):
            out = tmp_path / model
            assert run_cli("train", "--panel", panel, "--model", model, "--max-epochs", 3,
                           "--seed", 1, "--config", cfg, "--out", out) == 0
            last = (out / "history.csv").read_text().strip().splitlines()[-1]
            finals[model] = float(last.split(",")[1])
        assert finals["qr"] == pytest.approx(finals["censored_qr"], abs=1e-6)

    def test_panel_too_short_exit_2(self, tmp_path):
        panel = save_panel(tmp_path, hours=100)
        assert run_cli("train", "--panel", panel, "--model", "qr",
                       "--out", tmp_path / "x") == 2


class TestEvaluate:
    def make_checkpoint(self, tmp_path, panel_path):
        out = tmp_path / "trained"
        cfg = write_config(tmp_path, {"train": {"gcn_channels": [6, 4], "hidden_size": 8}})
        assert run_cli("train", "--panel", panel_path, "--model", "qr", "--max-epochs", 3,
                       "--window", 24, "--seed", 0, "--config", cfg, "--out", out) == 0
        return out / "checkpoint.json"

    def test_report_sanity(self, tmp_path):
        panel = save_panel(tmp_path, hours=300)
        ckpt = self.make_checkpoint(tmp_path, panel)
        out = tmp_path / "eval"
        assert run_cli("evaluate", "--checkpoint", ckpt, "--panel", panel,
                       "--series", "--out", out) == 0
        report = json.loads((out / "report.json").read_text())
        assert 0.0 <= report["icp"] <= 1.0
        assert report["mil"] > 0.0
        series = (out / "series.csv").read_text().splitlines()
        assert series[0].startswith("hour,node,")
        assert len(series) > 10

    def test_node_count_mismatch_exit_2(self, tmp_path):
        panel = save_panel(tmp_path, hours=300)
        ckpt = self.make_checkpoint(tmp_path, panel)
        other = save_panel(tmp_path, hours=300, nodes=4, seed=5)
        assert run_cli("evaluate", "--checkpoint", ckpt, "--panel", other,
                       "--out", tmp_path / "x") == 2


class TestCompete:
    def test_share_one_identical_models_and_row_count(self, tmp_path):
        sp = seasonal_station_panel(6, 240, seed=2)
        sp_path = tmp_path / "sp.csv"
        sp.save_csv(sp_path)
        clusters_path = tmp_path / "clusters.csv"
        clusters_path.write_text("station_id,cluster\n" + "\n".join(
            f"{sid},{i % 2}" for i, sid in enumerate(sp.station_ids)) + "\n")
        cfg = write_config(tmp_path, {"train": {"gcn_channels": [6, 4], "hidden_size": 8}})
        out = tmp_path / "comp"
        code = run_cli("compete", "--station-panel", sp_path, "--clusters", clusters_path,
                       "--shares", "1.0", "--models", "qr,censored_qr", "--seeds", "0,1",
                       "--window", 12, "--max-epochs", 2, "--config", cfg, "--out", out)
        assert code == 0
        rows = (out / "reports.csv").read_text().strip().splitlines()
        assert len(rows) == 1 + 4  # header + 1 share x 2 models x 2 seeds
        import csv

        with open(out / "reports.csv", newline="") as fh:
            recs = list(csv.DictReader(fh))
        by_kind_seed = {(r["model_kind"], r["seed"]): float(r["tilted_loss_sum"]) for r in recs}
        # share 1.0: no censoring anywhere, both models see identical data
        for seed in ("0", "1"):
            assert by_kind_seed[("qr", seed)] == pytest.approx(
                by_kind_seed[("censored_qr", seed)], abs=1e-9)
        assert (out / "aggregate.csv").exists()


def test_selftest_passes(capsys):
    assert run_cli("selftest") == 0
    out = capsys.readouterr().out
    assert "[PASS]" in out and "[FAIL]" not in out
