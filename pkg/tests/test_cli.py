import json

import jsonschema
import numpy as np
import pytest
from PIL import Image

from ddpm_pa.checkpoint import load_checkpoint
from ddpm_pa.cli import main, parse_config_text
from ddpm_pa.metrics import REPORT_SCHEMA

ARCH = [
    "--image_size", "8", "--base_width", "8", "--depth", "1", "--time_embed_dim", "16",
    "--timesteps", "20", "--batch_size", "4",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["make-synthetic", "--out", str(root / "data"), "--count", "4", "--size", "8"]) == 0
    assert main(
        ["make-synthetic", "--out", str(root / "target"), "--count", "3", "--size", "8",
         "--domain", "sketch", "--seed", "1"]
    ) == 0
    code = main(
        ["pretrain", *ARCH, "--dataset", str(root / "data"), "--iterations", "50",
         "--checkpoint_every", "25", "--output_dir", str(root / "src_run")]
    )
    assert code == 0
    return root


def pretrain_run(ws, name, *extra):
    return main(
        ["pretrain", *ARCH, "--dataset", str(ws / "data"), "--iterations", "5",
         "--output_dir", str(ws / name), *extra]
    )


def adapt_run(ws, name, *extra):
    return main(
        ["adapt", *ARCH, "--dataset", str(ws / "target"), "--iterations", "4",
         "--source_checkpoint", str(ws / "src_run" / "latest.ckpt"),
         "--output_dir", str(ws / name), *extra]
    )


class TestConfigParsing:
    def test_parse_with_comments(self):
        text = "# comment\nmode = pa\nlambda4 = 0.5  # inline\nflip_augment = false\nbeta_end = none\n"
        assert parse_config_text(text) == {
            "mode": "pa", "lambda4": 0.5, "flip_augment": False, "beta_end": None
        }

    def test_unknown_key_and_bad_value(self, tmp_path, capsys):
        cfg = tmp_path / "c.txt"
        cfg.write_text("bogus = 1\n")
        assert main(["pretrain", "--config", str(cfg)]) == 2
        cfg.write_text("iterations = many\n")
        assert main(["pretrain", "--config", str(cfg)]) == 2
        assert "iterations" in capsys.readouterr().err

    def test_flags_override_file(self, tmp_path, capsys):
        cfg = tmp_path / "c.txt"
        cfg.write_text("iterations = 7\nlearning_rate = 0.01\n")
        assert main(["pretrain", "--config", str(cfg), "--iterations", "9", "--dump-config"]) == 0
        out = capsys.readouterr().out
        assert "iterations = 9" in out and "learning_rate = 0.01" in out

    def test_dash_aliases(self, capsys):
        assert main(["pretrain", "--batch-size", "3", "--dump-config"]) == 0
        assert "batch_size = 3" in capsys.readouterr().out

    def test_output_root_env(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("DDPM_PA_OUTPUT_ROOT", str(tmp_path))
        assert main(["pretrain", "--output_dir", "runs/x", "--dump-config"]) == 0
        assert f"output_dir = {tmp_path / 'runs' / 'x'}" in capsys.readouterr().out


class TestPretrain:
    def test_missing_dataset(self, tmp_path, capsys):
        missing = tmp_path / "nowhere"
        code = main(["pretrain", "--dataset", str(missing), "--output_dir", str(tmp_path / "o")])
        assert code == 2
        assert str(missing) in capsys.readouterr().err
        assert not (tmp_path / "o").exists()

    def test_smoke_run_outputs(self, workspace):
        run = workspace / "src_run"
        ckpts = sorted(p.name for p in (run / "checkpoints").iterdir())
        assert ckpts == ["ckpt_0000025.ckpt", "ckpt_0000050.ckpt"]
        assert load_checkpoint(run / "latest.ckpt").iteration == 50
        lines = (run / "log.csv").read_text().splitlines()
        assert lines[0] == "iteration,l_simple,l_vlb,l_img,l_hf,l_hfmse,total"
        assert len(lines) == 51
        assert (run / "config.txt").read_text().startswith("mode = scratch")

    def test_same_seed_identical_logs(self, workspace):
        assert pretrain_run(workspace, "rep_a", "--seed", "3") == 0
        assert pretrain_run(workspace, "rep_b", "--seed", "3") == 0
        a = (workspace / "rep_a" / "log.csv").read_bytes()
        assert a == (workspace / "rep_b" / "log.csv").read_bytes()
        assert (workspace / "rep_a" / "latest.ckpt").read_bytes() == (
            workspace / "rep_b" / "latest.ckpt"
        ).read_bytes()

    def test_sample_grids(self, workspace):
        assert pretrain_run(workspace, "grids", "--sample_every", "5", "--sample_count", "4") == 0
        grid = Image.open(workspace / "grids" / "samples" / "grid_0000005.png")
        assert grid.size == (2 * 8 + 2, 2 * 8 + 2)

    def test_rejects_wrong_mode(self, workspace):
        assert pretrain_run(workspace, "bad", "--mode", "pa") == 2

    def test_unwritable_output(self, workspace, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        code = main(["pretrain", *ARCH, "--dataset", str(workspace / "data"),
                     "--output_dir", str(blocker / "sub")])
        assert code == 2


class TestAdapt:
    def test_zero_weight_pa_logs_like_finetune(self, workspace):
        assert adapt_run(workspace, "ft", "--mode", "finetune") == 0
        assert adapt_run(
            workspace, "pa0", "--lambda2", "0", "--lambda3", "0", "--lambda4", "0"
        ) == 0
        assert (workspace / "ft" / "log.csv").read_bytes() == (workspace / "pa0" / "log.csv").read_bytes()

    def test_first_image_loss_is_zero(self, workspace):
        assert adapt_run(workspace, "pa") == 0
        rows = (workspace / "pa" / "log.csv").read_text().splitlines()
        first = dict(zip(rows[0].split(","), rows[1].split(",")))
        assert float(first["l_img"]) == 0.0 and float(first["l_hf"]) == 0.0
        assert len(rows) == 5

    def test_sweep_creates_one_dir_per_value(self, workspace):
        code = main(
            ["sweep", *ARCH, "--dataset", str(workspace / "target"), "--iterations", "2",
             "--source_checkpoint", str(workspace / "src_run" / "latest.ckpt"),
             "--output_dir", str(workspace / "sweep"), "--param", "lambda4",
             "--values", "0,0.05,0.5"]
        )
        assert code == 0
        dirs = sorted(p.name for p in (workspace / "sweep").iterdir())
        assert dirs == ["lambda4_0.0", "lambda4_0.05", "lambda4_0.5"]
        for d in dirs:
            assert (workspace / "sweep" / d / "latest.ckpt").is_file()
        assert "lambda4 = 0.5" in (workspace / "sweep" / "lambda4_0.5" / "config.txt").read_text()

    def test_sweep_validates_all_values_first(self, workspace):
        code = main(
            ["sweep", *ARCH, "--dataset", str(workspace / "target"), "--iterations", "2",
             "--source_checkpoint", str(workspace / "src_run" / "latest.ckpt"),
             "--output_dir", str(workspace / "badsweep"), "--param", "lambda4",
             "--values", "0.1,-1"]
        )
        assert code == 2
        assert not (workspace / "badsweep").exists()

    def test_architecture_mismatch(self, workspace, capsys):
        assert adapt_run(workspace, "mismatch", "--base_width", "16") == 2
        assert "base_width" in capsys.readouterr().err

    def test_pa_needs_two_images(self, workspace, tmp_path):
        single = tmp_path / "one"
        assert main(["make-synthetic", "--out", str(single), "--count", "1", "--size", "8"]) == 0
        code = main(
            ["adapt", *ARCH, "--dataset", str(single), "--iterations", "2",
             "--source_checkpoint", str(workspace / "src_run" / "latest.ckpt"),
             "--output_dir", str(tmp_path / "out")]
        )
        assert code == 2
        finetune = main(
            ["adapt", *ARCH, "--dataset", str(single), "--iterations", "2", "--mode", "finetune",
             "--source_checkpoint", str(workspace / "src_run" / "latest.ckpt"),
             "--output_dir", str(tmp_path / "out_ft")]
        )
        assert finetune == 0

    def test_missing_source(self, workspace):
        code = main(["adapt", *ARCH, "--dataset", str(workspace / "target"),
                     "--output_dir", str(workspace / "nosrc")])
        assert code == 2


class TestSample:
    def test_single_sample_byte_identical(self, workspace):
        ckpt = str(workspace / "src_run" / "latest.ckpt")
        for name in ("s1", "s2"):
            assert main(["sample", "--checkpoint", ckpt, "--count", "1", "--seed", "4",
                         "--out", str(workspace / name)]) == 0
        a = (workspace / "s1" / "images" / "sample_00000.png").read_bytes()
        assert a == (workspace / "s2" / "images" / "sample_00000.png").read_bytes()

    def test_grid_of_nine(self, workspace):
        ckpt = str(workspace / "src_run" / "latest.ckpt")
        out = workspace / "nine"
        assert main(["sample", "--checkpoint", ckpt, "--count", "9", "--out", str(out)]) == 0
        assert len(list((out / "images").glob("sample_*.png"))) == 9
        grid = np.asarray(Image.open(out / "grid.png"))
        assert grid.shape == (3 * 8 + 2 * 2, 3 * 8 + 2 * 2, 3)
        for k in (8, 9, 18, 19):
            assert (grid[k, :, :] == 255).all() and (grid[:, k, :] == 255).all()
        tile = np.asarray(Image.open(out / "images" / "sample_00004.png"))
        np.testing.assert_array_equal(grid[10:18, 10:18], tile)

    def test_corrupt_checkpoint(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint")
        assert main(["sample", "--checkpoint", str(bad), "--out", str(tmp_path / "o")]) == 2


class TestEval:
    def test_self_eval_zero_and_schema(self, workspace, tmp_path):
        out = tmp_path / "report.json"
        code = main(["eval", "--generated", str(workspace / "data"),
                     "--training", str(workspace / "data"), "--out", str(out)])
        assert code == 0
        report = json.loads(out.read_text())
        jsonschema.validate(report, REPORT_SCHEMA)
        assert report["nearest_lpips"] == 0.0 and report["intra_lpips_mean"] == 0.0

    def test_flip_augmentation_never_increases(self, workspace, tmp_path):
        ckpt = str(workspace / "src_run" / "latest.ckpt")
        gen = tmp_path / "gen"
        assert main(["sample", "--checkpoint", ckpt, "--count", "6", "--out", str(gen)]) == 0
        gen = gen / "images"
        reports = []
        for extra in ([], ["--flip-augment-training"]):
            out = tmp_path / f"r{len(reports)}.json"
            assert main(["eval", "--generated", str(gen), "--training", str(workspace / "data"),
                         "--out", str(out), *extra]) == 0
            reports.append(json.loads(out.read_text()))
        assert reports[1]["nearest_lpips"] <= reports[0]["nearest_lpips"]
        assert reports[1]["flip_augmented"] is True

    def test_distance_csv(self, workspace, tmp_path):
        table = tmp_path / "table.csv"
        assert main(["eval", "--generated", str(workspace / "target"),
                     "--training", str(workspace / "data"), "--distance-csv", str(table)]) == 0
        assert len(table.read_text().splitlines()) == 4

    def test_errors(self, workspace, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert main(["eval", "--generated", str(empty), "--training", str(workspace / "data")]) == 2
        assert main(["eval", "--generated", str(tmp_path / "nope"),
                     "--training", str(workspace / "data")]) == 2
        big = tmp_path / "big"
        assert main(["make-synthetic", "--out", str(big), "--count", "2", "--size", "16"]) == 0
        assert main(["eval", "--generated", str(big), "--training", str(workspace / "data")]) == 2
        mixed = tmp_path / "mixed"
        mixed.mkdir()
        Image.new("RGB", (8, 8)).save(mixed / "a.png")
        Image.new("RGB", (16, 16)).save(mixed / "b.png")
        assert main(["eval", "--generated", str(mixed), "--training", str(workspace / "data")]) == 2


class TestMakeSynthetic:
    def test_deterministic_pngs(self, tmp_path):
        for name in ("a", "b"):
            assert main(["make-synthetic", "--out", str(tmp_path / name), "--count", "3",
                         "--domain", "stripes", "--seed", "2"]) == 0
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert files == ["img_00000.png", "img_00001.png", "img_00002.png"]
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        img = Image.open(tmp_path / "a" / files[0])
        assert img.size == (16, 16) and img.mode == "RGB"

    @pytest.mark.parametrize("args", [["--count", "0"], ["--size", "7"]])
    def test_rejects_bad_args(self, tmp_path, args):
        assert main(["make-synthetic", "--out", str(tmp_path / "x"), *args]) == 2

    def test_unknown_command(self):
        assert main(["frobnicate"]) == 2
