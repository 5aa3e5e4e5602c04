import json

import numpy as np
import pytest

from hsiclust.cli import main as cli_main
from hsiclust.hsi_io import load_labels, write_cube, write_labels
from hsiclust.synth import SynthSpec, generate
from hsiclust.train import (
    RunConfig,
    load_checkpoint,
    preprocess,
    run_ablation,
    run_training,
    save_checkpoint,
)


def tiny_scene():
    spec = SynthSpec(height=24, width=24, bands=12, classes=3, regions=6,
                     noise_std=0.3, seed=5)
    return generate(spec)


def tiny_config(**overrides):
    base = dict(n_classes=3, pca_dim=12, superpixels=40, layers=1,
                predictor_hidden=32, epochs=8, seed=0)
    base.update(overrides)
    return RunConfig(**base)


class TestRunConfig:
    def test_range_validation(self):
        with pytest.raises(ValueError):
            RunConfig(gamma=1.5)
        with pytest.raises(ValueError):
            RunConfig(tau=0.0)
        with pytest.raises(ValueError):
            RunConfig(egael_mode="sometimes")

    def test_roundtrip_dict(self):
        cfg = tiny_config(kernel_sizes=(5,), channels=(4,))
        again = RunConfig.from_dict(cfg.to_dict())
        assert again == cfg
        assert again.config_hash() == cfg.config_hash()


class TestTraining:
    def test_zero_epochs_reports_init_clustering(self):
        cube, labels = tiny_scene()
        res = run_training(tiny_config(epochs=0), cube, labels)
        assert res.history == []
        assert res.report is not None
        assert 0.0 <= res.report.acc <= 1.0

    def test_deterministic_same_seed(self):
        cube, labels = tiny_scene()
        r1 = run_training(tiny_config(), cube, labels)
        r2 = run_training(tiny_config(), cube, labels)
        assert r1.report.acc == r2.report.acc
        assert np.array_equal(r1.state.assignments, r2.state.assignments)
        for a, b in zip(r1.history, r2.history):
            assert a.loss == b.loss and a.l_na == b.l_na

    def test_seed_changes_run(self):
        cube, labels = tiny_scene()
        r1 = run_training(tiny_config(seed=0), cube, labels)
        r2 = run_training(tiny_config(seed=1), cube, labels)
        assert any(a.loss != b.loss for a, b in zip(r1.history, r2.history))

    def test_all_egael_modes_run(self):
        cube, labels = tiny_scene()
        for mode in ("full", "w_pre", "w_emp", "off"):
            res = run_training(tiny_config(egael_mode=mode, epochs=3), cube, labels)
            assert len(res.history) == 3
            if mode == "full":
                assert res.history[0].l_e is not None
            if mode in ("off", "w_emp"):
                assert res.history[0].l_e is None

    def test_edge_weights_move_toward_predictions(self):
        cube, labels = tiny_scene()
        res = run_training(tiny_config(epochs=5), cube, labels)
        # initial weights are all 1.0; momentum blending must have moved them
        assert res.graph.weights.max() < 1.0

    def test_no_end_to_end_mode(self):
        cube, labels = tiny_scene()
        res = run_training(tiny_config(egael_end_to_end=False, epochs=3), cube, labels)
        assert len(res.history) == 3

    def test_without_labels(self):
        cube, _ = tiny_scene()
        res = run_training(tiny_config(epochs=2), cube, labels=None)
        assert res.report is None
        assert res.history[0].acc is None
        assert res.pixel_labels.min() >= 1

    def test_variant_training(self):
        cube, labels = tiny_scene()
        for variant in ("mlp", "graphconv", "conv1d"):
            res = run_training(tiny_config(variant=variant, epochs=2), cube, labels)
            assert res.report.acc > 0.3

    def test_run_directory_artifacts(self, tmp_path):
        cube, labels = tiny_scene()
        out = tmp_path / "run"
        res = run_training(tiny_config(epochs=2), cube, labels, out_dir=out)
        assert res.run_dir == out
        for name in ("manifest.json", "train_log.jsonl", "metrics.json",
                     "checkpoint.bin", "clustermap.png", "edge_state.json"):
            assert (out / name).exists(), name
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["seed"] == 0
        lines = (out / "train_log.jsonl").read_text().strip().splitlines()
        assert len(lines) == 2

    def test_run_directory_append_only(self, tmp_path):
        cube, labels = tiny_scene()
        out = tmp_path / "run"
        r1 = run_training(tiny_config(epochs=1), cube, labels, out_dir=out)
        r2 = run_training(tiny_config(epochs=1), cube, labels, out_dir=out)
        assert r1.run_dir != r2.run_dir
        assert (r1.run_dir / "manifest.json").exists()
        assert (r2.run_dir / "manifest.json").exists()

    def test_checkpoint_roundtrip(self, tmp_path):
        cube, labels = tiny_scene()
        res = run_training(tiny_config(epochs=2), cube, labels)
        path = tmp_path / "ckpt.bin"
        save_checkpoint(path, res.pair)
        res2 = run_training(tiny_config(epochs=0), cube, labels)
        load_checkpoint(path, res2.pair)
        for name in res.pair.online.names():
            assert np.array_equal(res.pair.online[name].value,
                                  res2.pair.online[name].value)

    def test_imported_segmentation_matches_auto(self, tmp_path):
        # preprocess-then-train equals train-with-auto-preprocess for one seed
        cube, labels = tiny_scene()
        prep = preprocess(cube, 12, 40, seed=0)
        from hsiclust.superpixel import export_segmentation, import_segmentation
        seg_path = tmp_path / "seg.spseg"
        export_segmentation(seg_path, prep.sp.assignment)
        seg = import_segmentation(seg_path)
        r_auto = run_training(tiny_config(epochs=3), cube, labels)
        r_imported = run_training(tiny_config(epochs=3), cube, labels, segmentation=seg)
        assert r_auto.report.acc == r_imported.report.acc
        for a, b in zip(r_auto.history, r_imported.history):
            assert a.loss == b.loss

    def test_graph_transform_hook(self):
        cube, labels = tiny_scene()
        calls = {}

        def drop_nothing(graph, sp_gt, rng):
            calls["edges"] = graph.n_edges
            return graph

        run_training(tiny_config(epochs=1), cube, labels, graph_transform=drop_nothing)
        assert calls["edges"] > 0


class TestPreprocessFuzz:
    def test_random_specs_roundtrip_through_preprocess(self):
        rng = np.random.default_rng(99)
        for _ in range(20):
            h = int(rng.integers(12, 28))
            w = int(rng.integers(12, 28))
            bands = int(rng.integers(4, 12))
            k = int(rng.integers(1, 4))
            regions = k + int(rng.integers(0, 4))
            spec = SynthSpec(height=h, width=w, bands=bands, classes=k,
                             regions=regions, noise_std=float(rng.uniform(0, 0.6)),
                             seed=int(rng.integers(0, 1000)))
            cube, labels = generate(spec)
            d = int(rng.integers(1, bands + 1))
            m_sp = int(rng.integers(1, min(60, h * w) + 1))
            prep = preprocess(cube, d, m_sp, seed=0)
            assert prep.sp.m == m_sp
            assert prep.pixel_features.shape == (h * w, d)
            assert prep.graph.m == m_sp


class TestAblation:
    def test_single_variant_table(self):
        cube, labels = tiny_scene()
        rows = run_ablation(tiny_config(epochs=2), cube, labels, variants=["ssgco"])
        assert len(rows) == 1
        assert rows[0]["setting"] == "ssgco"

    def test_reference_row_always_included(self):
        cube, labels = tiny_scene()
        rows = run_ablation(tiny_config(epochs=2), cube, labels, variants=["mlp"])
        assert [r["setting"] for r in rows] == ["ssgco", "mlp"]

    def test_egael_rows(self):
        cube, labels = tiny_scene()
        rows = run_ablation(tiny_config(epochs=2), cube, labels, egael_rows=True)
        assert [r["setting"] for r in rows] == ["none", "w_pre", "w_emp", "w_pre+w_emp"]


class TestCli:
    def write_scene(self, tmp_path):
        cube, labels = tiny_scene()
        cube_path = tmp_path / "scene.hsic"
        labels_path = tmp_path / "scene.lblr"
        write_cube(cube_path, cube)
        write_labels(labels_path, labels)
        return cube_path, labels_path

    def test_synth_writes_files(self, tmp_path, capsys):
        rc = cli_main(["synth", "--cube", str(tmp_path / "c.hsic"),
                       "--labels", str(tmp_path / "l.lblr"),
                       "--height", "16", "--width", "16", "--bands", "8",
                       "--classes", "2", "--regions", "4", "--seed", "3"])
        assert rc == 0
        assert (tmp_path / "c.hsic").exists()
        raster = load_labels(tmp_path / "l.lblr")
        assert raster.classes == 2

    def test_preprocess_and_train_pipeline(self, tmp_path, capsys):
        cube_path, labels_path = self.write_scene(tmp_path)
        rc = cli_main(["preprocess", "--cube", str(cube_path),
                       "--segmentation", str(tmp_path / "seg.spseg"),
                       "--pca-dim", "12", "--superpixels", "40"])
        assert rc == 0
        rc = cli_main(["train", "--cube", str(cube_path), "--labels", str(labels_path),
                       "--segmentation", str(tmp_path / "seg.spseg"),
                       "--out", str(tmp_path / "run"),
                       "--pca-dim", "12", "--superpixels", "40", "--layers", "1",
                       "--epochs", "2", "--seed", "0"])
        assert rc == 0
        metrics = json.loads((tmp_path / "run" / "metrics.json").read_text())
        assert 0.0 <= metrics["acc"] <= 1.0

    def test_eval_gt_vs_gt(self, tmp_path, capsys):
        _, labels_path = self.write_scene(tmp_path)
        rc = cli_main(["eval", "--pred", str(labels_path), "--gt", str(labels_path)])
        assert rc == 0
        out = json.loads(capsys.readouterr().out)
        assert out["acc"] == 1.0 and out["f1"] == 1.0

    def test_eval_with_unpredicted_pixels(self, tmp_path, capsys):
        from hsiclust.hsi_io import LabelRaster
        gt = LabelRaster(1, 4, 2, np.array([[1, 1, 2, 2]], dtype=np.int32))
        pred = LabelRaster(1, 4, 2, np.array([[1, 0, 2, 2]], dtype=np.int32))
        write_labels(tmp_path / "gt.lblr", gt)
        write_labels(tmp_path / "pred.lblr", pred)
        rc = cli_main(["eval", "--pred", str(tmp_path / "pred.lblr"),
                       "--gt", str(tmp_path / "gt.lblr")])
        assert rc == 0
        out = json.loads(capsys.readouterr().out)
        assert out["acc"] == pytest.approx(0.75)  # the hole counts as a miss

    def test_config_file_with_flag_override(self, tmp_path, capsys):
        cube_path, labels_path = self.write_scene(tmp_path)
        config = {"pca_dim": 12, "superpixels": 40, "layers": 1, "epochs": 1,
                  "predictor_hidden": 16}
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(config))
        rc = cli_main(["train", "--cube", str(cube_path), "--labels", str(labels_path),
                       "--config", str(cfg_path), "--epochs", "2",
                       "--out", str(tmp_path / "run")])
        assert rc == 0
        manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
        assert manifest["config"]["epochs"] == 2  # flag wins
        assert manifest["config"]["n_classes"] == 3  # taken from labels

    def test_edge_audit_command(self, tmp_path, capsys):
        cube_path, labels_path = self.write_scene(tmp_path)
        rc = cli_main(["train", "--cube", str(cube_path), "--labels", str(labels_path),
                       "--out", str(tmp_path / "run"),
                       "--pca-dim", "12", "--superpixels", "40", "--layers", "1",
                       "--epochs", "2", "--seed", "0"])
        assert rc == 0
        rc = cli_main(["edge-audit", "--run-dir", str(tmp_path / "run")])
        assert rc == 0
        report = json.loads((tmp_path / "run" / "edge_audit.json").read_text())
        assert report["best_accuracy"] >= report["baseline_accuracy"]

    def test_edge_sweep_ratio_zero(self, tmp_path, capsys):
        cube_path, labels_path = self.write_scene(tmp_path)
        rc = cli_main(["edge-sweep", "--cube", str(cube_path),
                       "--labels", str(labels_path), "--out", str(tmp_path / "sweep"),
                       "--ratios", "0", "--pca-dim", "12", "--superpixels", "40",
                       "--layers", "1", "--epochs", "1", "--seed", "0"])
        assert rc == 0
        rows = json.loads((tmp_path / "sweep" / "edge_sweep.json").read_text())
        assert rows[0]["ratio"] == 0.0

    def test_ablate_command(self, tmp_path, capsys):
        cube_path, labels_path = self.write_scene(tmp_path)
        rc = cli_main(["ablate", "--cube", str(cube_path), "--labels", str(labels_path),
                       "--out", str(tmp_path / "abl"), "--variants", "ssgco",
                       "--pca-dim", "12", "--superpixels", "40", "--layers", "1",
                       "--epochs", "1", "--seed", "0"])
        assert rc == 0
        rows = json.loads((tmp_path / "abl" / "ablation.json").read_text())
        assert rows[0]["setting"] == "ssgco"
        assert (tmp_path / "abl" / "ablation.csv").exists()
