"""Config parsing, run persistence, the experiment matrix, and plot CSVs."""

import math
import os

import numpy as np
import pytest

from mifl import bench_cli
from mifl.bench_cli import (
    ConfigError,
    emit_plot_data,
    load_manifest,
    parse_config,
    read_csv,
    run_experiment,
    run_matrix,
    write_csv,
)

FAST_BLOBS = [
    "blob_per_class=40",
    "blob_spread=1.2",
    "epochs=1",
    "rounds=2",
    "lr=0.005",
    "val_fraction=0.1",
]


def fast_cfg(tmp_path, extra=(), seed=1):
    return parse_config(
        None, list(FAST_BLOBS) + list(extra), seed=seed, out=str(tmp_path)
    )


class TestParseConfig:
    def test_minimal_defaults_match_protocol(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("scenario = cross-silo\nstrategy = fedavg\nloss = ce\ndataset = blobs\n")
        cfg = parse_config(str(path))
        assert cfg.rounds == 30
        assert cfg.epochs == 10
        assert cfg.clients == 10
        assert cfg.participation == 1.0
        assert cfg.split_ratio == 0.9

    def test_cross_device_preset(self):
        cfg = parse_config(None, ["scenario=cross-device"])
        assert (cfg.clients, cfg.participation) == (100, 0.05)

    def test_negative_rounds_rejected_naming_key(self):
        with pytest.raises(ConfigError, match="rounds"):
            parse_config(None, ["rounds=-1"])

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("no_such_option = 3\n")
        with pytest.raises(ConfigError, match="no_such_option"):
            parse_config(str(path))

    def test_type_error_names_key(self):
        with pytest.raises(ConfigError, match="epochs"):
            parse_config(None, ["epochs=many"])

    def test_override_beats_file_and_is_echoed(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("rounds = 7\n")
        cfg = parse_config(str(path), ["rounds=3"])
        assert cfg.rounds == 3
        assert "config.rounds = 3" in cfg.echo_lines()

    def test_seed_flag_beats_everything(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed = 1\n")
        cfg = parse_config(str(path), ["seed=2"], seed=3)
        assert cfg.seed == 3

    def test_derived_defaults(self):
        cfg = parse_config(None, ["lr=0.01", "strategy=qfedavg"])
        assert cfg.qfedavg_step == pytest.approx(100.0)
        cfg = parse_config(None, ["epochs=4", "strategy=ditto"])
        assert cfg.ditto_personal_epochs == 4

    def test_missing_cifar_dir_rejected(self):
        with pytest.raises(ConfigError, match="cifar_dir"):
            parse_config(None, ["dataset=cifar10", "cifar_dir=/nonexistent"])

    def test_matrix_keys_rejected_for_single_run(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("matrix_losses = ce, mine\n")
        with pytest.raises(ConfigError, match="matrix"):
            parse_config(str(path))

    def test_config_hash_tracks_values(self):
        a = parse_config(None, ["rounds=1"])
        b = parse_config(None, ["rounds=2"])
        assert a.config_hash != b.config_hash
        assert a.config_hash == parse_config(None, ["rounds=1"]).config_hash


class TestCsvRoundTrip:
    def test_floats_survive_exactly(self, tmp_path):
        path = str(tmp_path / "x.csv")
        values = [1 / 3, 0.1, math.pi, 1e-17, float(np.float64(2) / 7)]
        write_csv(path, ["v"], [[v] for v in values])
        _, rows = read_csv(path)
        assert [float(r[0]) for r in rows] == values

    def test_none_becomes_empty_field(self, tmp_path):
        path = str(tmp_path / "x.csv")
        write_csv(path, ["a", "b"], [[None, 1.5]])
        _, rows = read_csv(path)
        assert rows[0][0] == ""


class TestRunExperiment:
    def test_two_round_blob_run_writes_all_files(self, tmp_path):
        cfg = fast_cfg(tmp_path)
        bundle = run_experiment(cfg)
        for name in ("manifest.txt", "rounds.csv", "fairness.csv", "summary.csv"):
            assert os.path.exists(os.path.join(bundle.directory, name))
        header, rows = read_csv(os.path.join(bundle.directory, "fairness.csv"))
        assert header == ["round", "f_j", "f_g", "f_r", "f_o", "F_t"]
        assert len(rows) == 2
        header, rows = read_csv(os.path.join(bundle.directory, "rounds.csv"))
        assert header[:5] == ["round", "client_id", "accuracy", "reward", "shapley"]
        assert len(rows) == 2 * 10  # rounds x clients

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg_a = fast_cfg(tmp_path / "a")
        cfg_b = fast_cfg(tmp_path / "b")
        dir_a = run_experiment(cfg_a).directory
        dir_b = run_experiment(cfg_b).directory
        for name in ("rounds.csv", "fairness.csv", "summary.csv"):
            with open(os.path.join(dir_a, name), "rb") as fh:
                a = fh.read()
            with open(os.path.join(dir_b, name), "rb") as fh:
                b = fh.read()
            assert a == b, f"{name} differs between identical runs"

    def test_fairness_rows_reproduce_report(self, tmp_path):
        cfg = fast_cfg(tmp_path)
        bundle = run_experiment(cfg)
        _, rows = read_csv(os.path.join(bundle.directory, "fairness.csv"))
        for row, comp in zip(rows, bundle.report.rounds):
            assert float(row[1]) == comp["f_j"]
            assert float(row[5]) == comp["F_t"]

    def test_manifest_tamper_detected(self, tmp_path):
        cfg = fast_cfg(tmp_path)
        bundle = run_experiment(cfg)
        load_manifest(bundle.directory)  # clean load passes
        path = os.path.join(bundle.directory, "manifest.txt")
        with open(path) as fh:
            text = fh.read()
        with open(path, "w") as fh:
            fh.write(text.replace("config.rounds = 2", "config.rounds = 9"))
        with pytest.raises(ValueError, match="hash mismatch"):
            load_manifest(bundle.directory)


class TestRunMatrix:
    def test_two_by_two_grid(self, tmp_path):
        path = tmp_path / "matrix.cfg"
        path.write_text(
            "matrix_losses = ce, js\nmatrix_strategies = fedavg, ditto\n"
            + "".join(line + "\n" for line in FAST_BLOBS)
        )
        bundles, failures = run_matrix(str(path), seed=0, out=str(tmp_path / "out"))
        assert len(bundles) == 4 and not failures
        names = sorted(os.path.basename(b.directory) for b in bundles)
        assert names == sorted(
            f"crosssilo_iid_{s}_{l}" for s in ("fedavg", "ditto") for l in ("ce", "js")
        )
        assert os.path.exists(tmp_path / "out" / "matrix_summary.csv")

    def test_cell_seeds_differ(self, tmp_path):
        path = tmp_path / "matrix.cfg"
        path.write_text("matrix_losses = ce, js\n" + "".join(l + "\n" for l in FAST_BLOBS))
        bundles, _ = run_matrix(str(path), seed=0, out=str(tmp_path / "out"))
        seeds = {b.config.seed for b in bundles}
        assert len(seeds) == 2

    def test_failed_cell_is_isolated(self, tmp_path):
        path = tmp_path / "matrix.cfg"
        # ce on the gaussian calibration dataset is invalid -> one cell fails
        path.write_text(
            "matrix_losses = ce, mine\ndataset = gaussian\ncalib_steps = 5\ngauss_n = 200\n"
            "batch_size = 16\n"
        )
        bundles, failures = run_matrix(str(path), seed=0, out=str(tmp_path / "out"))
        assert len(bundles) == 1 and len(failures) == 1
        _, rows = read_csv(str(tmp_path / "out" / "matrix_summary.csv"))
        statuses = {row[0]: row[1] for row in rows}
        assert set(statuses.values()) == {"ok", "failed"}


class TestPlotData:
    @pytest.fixture()
    def bundles(self, tmp_path):
        out = []
        for loss in ("ce", "js"):
            # larger shards so every client's test split sees both parity groups
            cfg = fast_cfg(tmp_path, extra=[f"loss={loss}", "blob_per_class=100"], seed=3)
            out.append(run_experiment(cfg))
        return out

    def test_scatter_one_row_per_cell(self, bundles, tmp_path):
        out_path = str(tmp_path / "scatter.csv")
        emit_plot_data([b.directory for b in bundles], "scatter", out_path)
        header, rows = read_csv(out_path)
        assert header == ["cell", "strategy", "loss", "general_fairness", "performance"]
        assert len(rows) == 2
        for row, bundle in zip(rows, bundles):
            ft = [r["F_t"] for r in bundle.report.rounds]
            assert float(row[3]) == pytest.approx(float(np.mean(ft)))

    def test_bar_means_equal_recomputation(self, bundles, tmp_path):
        out_path = str(tmp_path / "bar.csv")
        emit_plot_data([bundles[0].directory], "components-bar", out_path)
        header, rows = read_csv(out_path)
        assert header == ["cell", "component", "mean", "std"]
        assert [r[1] for r in rows] == ["f_j", "f_g", "f_r", "f_o"]
        for row in rows:
            vals = [r[row[1]] for r in bundles[0].report.rounds if r[row[1]] is not None]
            assert float(row[2]) == pytest.approx(float(np.mean(vals)))
            assert float(row[3]) == pytest.approx(float(np.std(vals)))

    def test_timeseries_row_count_is_rounds(self, bundles, tmp_path):
        out_path = str(tmp_path / "ts.csv")
        emit_plot_data([b.directory for b in bundles], "components-timeseries", out_path)
        _, rows = read_csv(out_path)
        assert len(rows) == 2 * 2  # bundles x rounds

    def test_unknown_kind_rejected(self, bundles, tmp_path):
        with pytest.raises(ValueError, match="kind"):
            emit_plot_data([bundles[0].directory], "pie", str(tmp_path / "x.csv"))

    def test_no_bundles_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="at least one"):
            emit_plot_data([], "scatter", str(tmp_path / "x.csv"))


class TestCalibrationRun:
    def test_gaussian_run_writes_step_series(self, tmp_path):
        cfg = parse_config(
            None,
            [
                "dataset=gaussian",
                "loss=mine",
                "gauss_n=512",
                "calib_steps=20",
                "batch_size=32",
                "calib_hidden=16",
                "critic_embed=8",
                "calib_tail=5",
            ],
            seed=0,
            out=str(tmp_path),
        )
        bundle = run_experiment(cfg)
        header, rows = read_csv(os.path.join(bundle.directory, "mi_steps.csv"))
        assert header == ["step", "estimate"]
        assert len(rows) == 20
        header, rows = read_csv(os.path.join(bundle.directory, "summary.csv"))
        assert header[:4] == ["estimator", "rho", "true_mi", "estimate"]
        assert float(rows[0][2]) == pytest.approx(-0.5 * math.log(1 - 0.25))

    def test_ce_rejected_for_calibration(self, tmp_path):
        cfg = parse_config(None, ["dataset=gaussian", "loss=ce"], out=str(tmp_path))
        with pytest.raises(ConfigError, match="MI estimator"):
            run_experiment(cfg)


class TestCli:
    def test_run_and_plotdata_commands(self, tmp_path):
        cfg_path = tmp_path / "run.cfg"
        cfg_path.write_text("".join(line + "\n" for line in FAST_BLOBS))
        out = str(tmp_path / "runs")
        rc = bench_cli.main(["run", "--config", str(cfg_path), "--seed", "5", "--out", out])
        assert rc == 0
        run_dir = os.path.join(out, "crosssilo_iid_fedavg_ce")
        rc = bench_cli.main(
            ["plotdata", run_dir, "--kind", "scatter", "--out", str(tmp_path / "s.csv")]
        )
        assert rc == 0
        assert os.path.exists(tmp_path / "s.csv")

    def test_override_flag(self, tmp_path):
        out = str(tmp_path / "runs")
        rc = bench_cli.main(
            ["run", "--out", out, "--seed", "1"]
            + sum((["--override", o] for o in FAST_BLOBS), [])
            + ["--override", "name=ovr"]
        )
        assert rc == 0
        assert os.path.exists(os.path.join(out, "ovr", "rounds.csv"))
