import json

import numpy as np
import pytest

from vgm2 import federation as fed
from vgm2 import metrics, reporting


def make_fake_run(root, method="vgm2", dataset="blobs", seed=0, f1s=(0.9,), eces=(0.1,), cfg_overrides=None):
    root.mkdir(parents=True, exist_ok=True)
    cfg = fed.RunConfig(method=method, dataset=dataset, **(cfg_overrides or {}))
    fed.dump_config(cfg, root / "config.txt")
    (root / "seed.txt").write_text(f"{seed}\n")
    record = {"round": 0, "clients": [0], "lambda": 0.0, "per_client": {"0": {"bytes_up": 256}}, "aggregate": {}}
    (root / "records.jsonl").write_text(json.dumps(record) + "\n")
    lines = ["method,dataset,seed,client,f1,ece,bytes_up_per_round"]
    for cid, (f1, ece) in enumerate(zip(f1s, eces)):
        lines.append(f"{method},{dataset},{seed},{cid},{f1:.6f},{ece:.6f},256.0")
    (root / "metrics.csv").write_text("\n".join(lines) + "\n")
    return root


class TestAggregateSeeds:
    def test_hand_arithmetic_mean_and_population_std(self, tmp_path):
        dirs = []
        for seed, f1 in enumerate((0.8, 0.9, 1.0)):
            dirs.append(make_fake_run(tmp_path / f"s{seed}", seed=seed, f1s=(f1,), eces=(0.1,)))
        table = reporting.aggregate_seeds(dirs)
        (row,) = table.rows
        assert row[2] == pytest.approx(0.9)
        assert row[3] == pytest.approx(0.0816496580927726)
        assert row[6] == 3

    def test_single_seed_has_zero_std(self, tmp_path):
        table = reporting.aggregate_seeds([make_fake_run(tmp_path / "one")])
        assert table.rows[0][3] == 0.0

    def test_identical_runs_have_zero_std(self, tmp_path):
        dirs = [make_fake_run(tmp_path / f"r{i}", seed=i, f1s=(0.7, 0.8)) for i in range(3)]
        table = reporting.aggregate_seeds(dirs)
        assert table.rows[0][3] == 0.0

    def test_mismatched_configs_error_lists_keys(self, tmp_path):
        a = make_fake_run(tmp_path / "a", cfg_overrides={"rounds": 5})
        b = make_fake_run(tmp_path / "b", cfg_overrides={"rounds": 9})
        with pytest.raises(reporting.ReportError, match="rounds"):
            reporting.aggregate_seeds([a, b])

    def test_permutation_invariant(self, tmp_path):
        dirs = [make_fake_run(tmp_path / f"r{i}", seed=i, f1s=(0.6 + 0.1 * i,)) for i in range(3)]
        t1 = reporting.aggregate_seeds(dirs)
        t2 = reporting.aggregate_seeds(list(reversed(dirs)))
        assert t1 == t2

    def test_multiple_methods_grouped(self, tmp_path):
        dirs = [
            make_fake_run(tmp_path / "v0", method="vgm2", seed=0),
            make_fake_run(tmp_path / "l0", method="local", seed=0),
        ]
        table = reporting.aggregate_seeds(dirs)
        assert [row[0] for row in table.rows] == ["local", "vgm2"]


class TestAblationTable:
    def test_rows_sorted_by_value(self, tmp_path):
        sweep = {}
        for k in (5, 1, 3, 2):
            sweep[k] = [
                make_fake_run(tmp_path / f"K{k}s{s}", seed=s, f1s=(0.5 + 0.05 * k,), cfg_overrides={"components": k})
                for s in range(2)
            ]
        table = reporting.ablation_table(sweep, "components")
        assert [row[1] for row in table.rows] == [1, 2, 3, 5]
        assert len(table.rows) == 4

    def test_non_sweep_inputs_rejected(self, tmp_path):
        sweep = {
            1: [make_fake_run(tmp_path / "a", cfg_overrides={"components": 1, "rounds": 5})],
            2: [make_fake_run(tmp_path / "b", cfg_overrides={"components": 2, "rounds": 9})],
        }
        with pytest.raises(reporting.ReportError, match="rounds"):
            reporting.ablation_table(sweep, "components")


class TestCalibrationCurve:
    def write_confidences(self, run_dir, conf, labels):
        np.savez(run_dir / "confidences.npz", conf_0=conf, labels_0=labels)

    def test_calibrated_confidences_have_small_per_bin_gap(self, tmp_path):
        run = make_fake_run(tmp_path / "run")
        rng = np.random.default_rng(0)
        conf, labels = [], []
        for center in (0.1, 0.3, 0.7, 0.9):
            conf.extend([center] * 1500)
            labels.extend(rng.binomial(1, center, 1500))
        self.write_confidences(run, np.array(conf), np.array(labels, dtype=float))
        table, _ = reporting.calibration_curve(run, n_bins=15)
        for _, conf_b, acc_b, mass in table.rows:
            if mass > 0:
                assert abs(acc_b - conf_b) < 0.05

    def test_all_half_populates_single_bin(self, tmp_path):
        run = make_fake_run(tmp_path / "run")
        self.write_confidences(run, np.full(50, 0.5), np.array([0.0, 1.0] * 25))
        table, _ = reporting.calibration_curve(run, n_bins=15)
        assert sum(1 for row in table.rows if row[3] > 0) == 1

    def test_ece_matches_independent_recomputation(self, tmp_path):
        run = make_fake_run(tmp_path / "run")
        rng = np.random.default_rng(1)
        conf = rng.uniform(0, 1, 400)
        labels = rng.integers(0, 2, 400).astype(float)
        self.write_confidences(run, conf, labels)
        _, ece = reporting.calibration_curve(run, n_bins=15)
        assert ece == pytest.approx(metrics.hard_ece(conf, labels, 15), abs=1e-12)

    def test_missing_confidences_rejected(self, tmp_path):
        run = make_fake_run(tmp_path / "run")
        with pytest.raises(reporting.ReportError, match="confidences"):
            reporting.calibration_curve(run)


class TestRendering:
    def test_csv_and_text_are_idempotent(self, tmp_path):
        run = make_fake_run(tmp_path / "run", f1s=(0.75, 0.85), eces=(0.2, 0.1))
        t1 = reporting.aggregate_seeds([run])
        t2 = reporting.aggregate_seeds([run])
        assert t1.to_csv() == t2.to_csv()
        assert t1.to_text() == t2.to_text()

    def test_unknown_format_rejected(self, tmp_path):
        table = reporting.aggregate_seeds([make_fake_run(tmp_path / "run")])
        with pytest.raises(reporting.ReportError):
            reporting.render(table, "yaml")
