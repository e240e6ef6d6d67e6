"""End-to-end command tests driving cli.main in process."""

import csv
import os

import numpy as np
import pytest
import yaml

from pyrflow.checkpoint import save_checkpoint
from pyrflow.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from pyrflow.config import ModelConfig
from pyrflow.estimator import FlowModel
from pyrflow.evalio import read_flo, write_flo, write_image


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    d = tmp_path_factory.mktemp("ck")
    model = FlowModel(ModelConfig.small_test(), seed=1)
    model.eval()
    path = str(d / "model.npz")
    save_checkpoint(path, model, model.cfg)
    return path


@pytest.fixture(scope="module")
def image_pair(tmp_path_factory):
    d = tmp_path_factory.mktemp("imgs")
    rng = np.random.default_rng(0)
    paths = []
    for i in range(2):
        img = rng.random((32, 32, 3))
        p = str(d / f"frame{i}.png")
        write_image(img, p)
        paths.append(p)
    return paths


def toy_config(tmp_path, **overrides) -> str:
    cfg = {
        "seed": 0,
        "size": 32,
        "num_samples": 2,
        "steps": 2,
        "batch_size": 1,
        "eval_every": 1,
        "iters": [1, 1, 1],
        "out_dir": str(tmp_path / "run"),
        "model": ModelConfig.small_test().to_dict(),
    }
    cfg.update(overrides)
    path = str(tmp_path / "config.yaml")
    with open(path, "w") as f:
        yaml.safe_dump(cfg, f)
    return path


class TestTrainToy:
    def test_missing_config_is_usage_error(self, tmp_path):
        assert main(["train-toy", str(tmp_path / "absent.yaml")]) == EXIT_USAGE

    def test_invalid_yaml_is_usage_error(self, tmp_path):
        path = str(tmp_path / "bad.yaml")
        with open(path, "w") as f:
            f.write("seed: [unclosed\n")
        assert main(["train-toy", path]) == EXIT_USAGE

    def test_unknown_key_is_usage_error(self, tmp_path):
        path = str(tmp_path / "bad.yaml")
        with open(path, "w") as f:
            yaml.safe_dump({"learning_rate": 1e-3}, f)
        assert main(["train-toy", path]) == EXIT_USAGE

    def test_short_run_writes_artifacts(self, tmp_path, capsys):
        cfg_path = toy_config(tmp_path)
        assert main(["train-toy", cfg_path, "--quiet"]) == EXIT_OK
        out_dir = tmp_path / "run"
        assert (out_dir / "final.npz").exists()
        with open(out_dir / "loss_curve.csv") as f:
            rows = list(csv.DictReader(f))
        assert [r["step"] for r in rows] == ["0", "1"]
        assert all(float(r["loss"]) > 0 for r in rows)
        assert "final train AEPE" in capsys.readouterr().out

    def test_resume_continues_step_counter(self, tmp_path, capsys):
        cfg_path = toy_config(tmp_path)
        assert main(["train-toy", cfg_path, "--quiet"]) == EXIT_OK
        ck = str(tmp_path / "run" / "final.npz")
        out2 = str(tmp_path / "run2")
        assert (
            main(
                ["train-toy", cfg_path, "--quiet", "--resume", ck,
                 "--steps", "4", "--out-dir", out2]
            )
            == EXIT_OK
        )
        with open(os.path.join(out2, "loss_curve.csv")) as f:
            rows = list(csv.DictReader(f))
        assert [r["step"] for r in rows] == ["2", "3"]
        assert "4 steps" in capsys.readouterr().out


class TestInfer:
    def test_writes_flow_and_visualization(self, checkpoint, image_pair, tmp_path, capsys):
        out = str(tmp_path / "flow.flo")
        viz = str(tmp_path / "flow.png")
        code = main(
            ["infer", checkpoint, image_pair[0], image_pair[1],
             "--iters", "1,1,1", "--out", out, "--viz", viz]
        )
        assert code == EXIT_OK
        flow = read_flo(out)
        assert flow.shape == (2, 32, 32)
        assert os.path.getsize(viz) > 0
        assert "wrote" in capsys.readouterr().out

    def test_creates_missing_output_directories(self, checkpoint, image_pair, tmp_path):
        out = str(tmp_path / "nested" / "deep" / "flow.flo")
        code = main(
            ["infer", checkpoint, image_pair[0], image_pair[1],
             "--iters", "1,1,1", "--out", out]
        )
        assert code == EXIT_OK
        assert os.path.exists(out)

    def test_deterministic(self, checkpoint, image_pair, tmp_path):
        outs = []
        for i in range(2):
            out = str(tmp_path / f"f{i}.flo")
            assert main(
                ["infer", checkpoint, image_pair[0], image_pair[1],
                 "--iters", "1,1,1", "--out", out]
            ) == EXIT_OK
            outs.append(read_flo(out))
        assert np.array_equal(outs[0], outs[1])

    def test_missing_checkpoint_is_data_error(self, image_pair, tmp_path):
        code = main(
            ["infer", str(tmp_path / "no.npz"), image_pair[0], image_pair[1],
             "--out", str(tmp_path / "f.flo")]
        )
        assert code == EXIT_DATA

    def test_scale_mismatch_is_data_error(self, checkpoint, image_pair, tmp_path):
        code = main(
            ["infer", checkpoint, image_pair[0], image_pair[1],
             "--scales", "4", "--out", str(tmp_path / "f.flo")]
        )
        assert code == EXIT_DATA

    def test_train_preset_for_three_scale_model_is_config_error(
        self, checkpoint, image_pair, tmp_path
    ):
        code = main(
            ["infer", checkpoint, image_pair[0], image_pair[1],
             "--preset", "train", "--out", str(tmp_path / "f.flo")]
        )
        assert code == EXIT_USAGE

    def test_bad_iters_string_is_usage_error(self, checkpoint, image_pair, tmp_path):
        code = main(
            ["infer", checkpoint, image_pair[0], image_pair[1],
             "--iters", "a,b", "--out", str(tmp_path / "f.flo")]
        )
        assert code == EXIT_USAGE


class TestEval:
    def make_dirs(self, tmp_path, with_occ=False):
        rng = np.random.default_rng(4)
        gt_dir = tmp_path / "gt"
        pred_dir = tmp_path / "pred"
        gt_dir.mkdir()
        pred_dir.mkdir()
        gt = rng.uniform(-3, 3, (2, 8, 8))
        write_flo(gt, str(gt_dir / "a.flo"))
        write_flo(gt, str(pred_dir / "a.flo"))
        occ_dir = None
        if with_occ:
            occ_dir = tmp_path / "occ"
            occ_dir.mkdir()
            np.save(str(occ_dir / "a.npy"), rng.random((8, 8)) > 0.6)
        return str(pred_dir), str(gt_dir), occ_dir and str(occ_dir)

    def test_identical_prediction_scores_zero(self, tmp_path, capsys):
        pred, gt, _ = self.make_dirs(tmp_path)
        out_csv = str(tmp_path / "metrics.csv")
        assert main(["eval", pred, gt, "--out", out_csv]) == EXIT_OK
        with open(out_csv) as f:
            rows = list(csv.DictReader(f))
        assert float(rows[0]["aepe"]) == 0.0
        assert float(rows[0]["fl"]) == 0.0
        assert rows[0]["aepe_matched"] == ""  # no masks given

    def test_occlusion_masks_enable_region_columns(self, tmp_path):
        pred, gt, occ = self.make_dirs(tmp_path, with_occ=True)
        out_csv = str(tmp_path / "metrics.csv")
        assert main(["eval", pred, gt, "--occ-masks", occ, "--out", out_csv]) == EXIT_OK
        with open(out_csv) as f:
            row = next(csv.DictReader(f))
        n = int(row["n_matched"]) + int(row["n_unmatched"])
        assert n == int(row["n_pixels"])

    def test_missing_prediction_is_data_error(self, tmp_path):
        _, gt, _ = self.make_dirs(tmp_path)
        empty = tmp_path / "empty"
        empty.mkdir()
        assert main(["eval", str(empty), gt]) == EXIT_DATA

    def test_empty_gt_dir_is_data_error(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        a.mkdir()
        b.mkdir()
        assert main(["eval", str(a), str(b)]) == EXIT_DATA


class TestBenchAttn:
    def test_writes_report_and_plot(self, tmp_path, capsys):
        out_dir = str(tmp_path / "bench")
        code = main(
            ["bench-attn", "--sizes", "8,12,16,24", "--dim", "16",
             "--heads", "4", "--out-dir", out_dir]
        )
        assert code == EXIT_OK
        assert os.path.exists(os.path.join(out_dir, "attention_memory.csv"))
        assert os.path.exists(os.path.join(out_dir, "attention_memory.png"))
        text = capsys.readouterr().out
        assert "slope" in text

    def test_unknown_mechanism_is_usage_error(self, tmp_path):
        code = main(
            ["bench-attn", "--mechanisms", "windowed", "--out-dir", str(tmp_path)]
        )
        assert code == EXIT_USAGE

    def test_short_ladder_is_usage_error(self, tmp_path):
        # a slope fit over fewer than 4 sizes is rejected up front
        code = main(
            ["bench-attn", "--sizes", "8,12,16", "--out-dir", str(tmp_path)]
        )
        assert code == EXIT_USAGE

    def test_non_integer_sizes_is_usage_error(self, tmp_path):
        code = main(
            ["bench-attn", "--sizes", "8,tiny,16,24", "--out-dir", str(tmp_path)]
        )
        assert code == EXIT_USAGE


class TestVizContext:
    def test_norm_heatmap_written_and_normalized(self, checkpoint, image_pair, tmp_path):
        import cv2

        out_dir = str(tmp_path / "viz")
        code = main(
            ["viz-context", checkpoint, image_pair[0], "--scale", "0",
             "--out-dir", out_dir]
        )
        assert code == EXIT_OK
        path = os.path.join(out_dir, "context_scale0_norm.png")
        img = cv2.imread(path)
        assert img is not None

    def test_channel_maps_written_per_channel(self, checkpoint, image_pair, tmp_path):
        out_dir = str(tmp_path / "viz")
        code = main(
            ["viz-context", checkpoint, image_pair[0], "--scale", "1",
             "--channels", "0,3", "--out-dir", out_dir]
        )
        assert code == EXIT_OK
        assert os.path.exists(os.path.join(out_dir, "context_scale1_ch0.png"))
        assert os.path.exists(os.path.join(out_dir, "context_scale1_ch3.png"))

    def test_out_of_range_channel_is_usage_error(self, checkpoint, image_pair, tmp_path):
        code = main(
            ["viz-context", checkpoint, image_pair[0], "--channels", "999",
             "--out-dir", str(tmp_path)]
        )
        assert code == EXIT_USAGE

    def test_out_of_range_scale_is_usage_error(self, checkpoint, image_pair, tmp_path):
        code = main(
            ["viz-context", checkpoint, image_pair[0], "--scale", "7",
             "--out-dir", str(tmp_path)]
        )
        assert code == EXIT_USAGE

    def test_deterministic_per_checkpoint(self, checkpoint, image_pair, tmp_path):
        import cv2

        imgs = []
        for i in range(2):
            out_dir = str(tmp_path / f"viz{i}")
            assert main(
                ["viz-context", checkpoint, image_pair[0], "--out-dir", out_dir]
            ) == EXIT_OK
            imgs.append(cv2.imread(os.path.join(out_dir, "context_scale0_norm.png")))
        assert np.array_equal(imgs[0], imgs[1])


class TestUsagePlumbing:
    def test_no_command_is_usage_error(self):
        assert main([]) == EXIT_USAGE

    def test_unknown_command_is_usage_error(self):
        assert main(["frobnicate"]) == EXIT_USAGE
