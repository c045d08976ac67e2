import dataclasses

import numpy as np
import pytest
import torch

from ddpm_pa.checkpoint import CheckpointError, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from ddpm_pa.data import synthetic_images
from ddpm_pa.denoiser import params_hash
from ddpm_pa.diffusion import build_schedule
from ddpm_pa.training import (
    LOG_COLUMNS,
    CsvLog,
    TrainConfig,
    Trainer,
    adapt,
    generate,
    model_from_checkpoint,
    train_scratch,
)

SMALL = dict(
    image_size=8, base_width=8, depth=1, time_embed_dim=16, timesteps=20, batch_size=4, iterations=6
)


def small_config(**overrides):
    kwargs = dict(SMALL)
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


@pytest.fixture(scope="module")
def images():
    return torch.from_numpy(synthetic_images(6, 8, "shapes", seed=0)).float()


@pytest.fixture(scope="module")
def source_ckpt(images):
    return list(train_scratch(small_config(iterations=3), images))[-1]


def run_rows(trainer):
    rows = []
    last = None
    for last in trainer.run(rows.append):
        pass
    return rows, last


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(mode="other"),
            dict(iterations=0),
            dict(batch_size=0),
            dict(mode="pa", batch_size=1),
            dict(learning_rate=0.0),
            dict(lambda2=-1.0),
            dict(timesteps=0),
            dict(image_size=7),
            dict(checkpoint_every=-1),
        ],
    )
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            small_config(**kwargs)

    def test_dict_round_trip(self):
        cfg = small_config(mode="pa", lambda4=0.5)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ValueError):
            TrainConfig.from_dict({**cfg.to_dict(), "bogus": 1})

    def test_finetune_zeroes_pairwise_weights(self):
        w = small_config(mode="finetune").weights()
        assert (w.lambda2, w.lambda3, w.lambda4) == (0.0, 0.0, 0.0)
        assert w.lambda1 == 0.001


class TestScratch:
    def test_log_rows(self, images):
        rows, last = run_rows(Trainer(small_config(), images))
        assert [r["iteration"] for r in rows] == list(range(1, 7))
        assert set(rows[0]) == set(LOG_COLUMNS)
        assert all(r["l_img"] == 0.0 and r["l_hf"] == 0.0 and r["l_hfmse"] == 0.0 for r in rows)
        assert last.iteration == 6
        for r in rows:
            assert r["total"] == pytest.approx(r["l_simple"] + 0.001 * r["l_vlb"], rel=1e-6)

    def test_checkpoint_every(self, images):
        its = [c.iteration for c in Trainer(small_config(checkpoint_every=2, iterations=5), images).run()]
        assert its == [2, 4, 5]

    def test_same_seed_same_result(self, images):
        a = run_rows(Trainer(small_config(), images))
        b = run_rows(Trainer(small_config(), images))
        assert a[0] == b[0]
        assert to_bytes(a[1]) == to_bytes(b[1])
        c = run_rows(Trainer(small_config(seed=1), images))
        assert c[0] != a[0]

    def test_resume_is_bit_identical(self, images, tmp_path):
        full_rows, full = run_rows(Trainer(small_config(), images))
        first = Trainer(small_config(iterations=3), images)
        rows_a, mid = run_rows(first)
        save_checkpoint(mid, tmp_path / "mid.ckpt")
        resumed = Trainer(small_config(), images, resume=load_checkpoint(tmp_path / "mid.ckpt"))
        rows_b, end = run_rows(resumed)
        assert rows_a + rows_b == full_rows
        assert to_bytes(end) == to_bytes(full)

    def test_loss_decreases(self):
        data = torch.from_numpy(synthetic_images(4, 16, "shapes", seed=0)).float()
        cfg = TrainConfig(
            image_size=16, base_width=8, depth=1, time_embed_dim=16, timesteps=100,
            batch_size=4, iterations=2000, learning_rate=1e-3,
        )
        rows, _ = run_rows(Trainer(cfg, data))
        early = np.mean([r["l_simple"] for r in rows[:200]])
        late = np.mean([r["l_simple"] for r in rows[-200:]])
        assert late < early

    def test_dataset_validation(self):
        with pytest.raises(ValueError):
            Trainer(small_config(), torch.zeros(0, 3, 8, 8))
        with pytest.raises(ValueError):
            Trainer(small_config(), torch.zeros(2, 3, 16, 16))
        with pytest.raises(ValueError):
            Trainer(small_config(), torch.full((2, 3, 8, 8), float("nan")))

    def test_non_finite_loss_raises(self, images):
        trainer = Trainer(small_config(), images)
        with torch.no_grad():
            trainer.model.conv_out.bias.fill_(float("inf"))
        with pytest.raises(FloatingPointError):
            trainer.step()


class TestAdaptation:
    def test_requires_source(self, images):
        with pytest.raises(ValueError):
            Trainer(small_config(mode="pa"), images)
        with pytest.raises(ValueError):
            list(adapt(small_config(mode="scratch"), None, images))

    def test_architecture_mismatch(self, images, source_ckpt):
        with pytest.raises(CheckpointError):
            Trainer(small_config(mode="pa", base_width=16), images, source=source_ckpt)

    def test_pa_needs_two_images(self, images, source_ckpt):
        with pytest.raises(ValueError):
            Trainer(small_config(mode="pa"), images[:1], source=source_ckpt)

    def test_first_step_pairwise_terms_vanish(self, images, source_ckpt):
        trainer = Trainer(small_config(mode="pa"), images, source=source_ckpt)
        row = trainer.step()
        assert row["l_img"] == 0.0
        assert row["l_hf"] == 0.0
        assert row["l_hfmse"] > 0.0

    def test_source_frozen(self, images, source_ckpt):
        trainer = Trainer(small_config(mode="pa", iterations=5), images, source=source_ckpt)
        before = params_hash(trainer.source)
        _, last = run_rows(trainer)
        assert params_hash(trainer.source) == before == last.meta["source_hash"]
        assert all(p.grad is None for p in trainer.source.parameters())
        assert params_hash(trainer.model) != before
        # the source checkpoint itself is untouched as well
        assert params_hash(model_from_checkpoint(source_ckpt)) == before

    def test_zero_weights_match_finetune(self, images, source_ckpt):
        pa = small_config(mode="pa", lambda2=0.0, lambda3=0.0, lambda4=0.0)
        ft = small_config(mode="finetune")
        rows_pa, end_pa = run_rows(Trainer(pa, images, source=source_ckpt))
        rows_ft, end_ft = run_rows(Trainer(ft, images, source=source_ckpt))
        assert rows_pa == rows_ft
        for k in end_pa.params:
            assert torch.equal(end_pa.params[k], end_ft.params[k])

    def test_pairwise_weights_change_trajectory(self, images, source_ckpt):
        _, end_pa = run_rows(Trainer(small_config(mode="pa", lambda4=5.0), images, source=source_ckpt))
        _, end_ft = run_rows(Trainer(small_config(mode="finetune"), images, source=source_ckpt))
        assert any(not torch.equal(end_pa.params[k], end_ft.params[k]) for k in end_pa.params)

    def test_resume_rejects_other_source(self, images, source_ckpt):
        _, mid = run_rows(Trainer(small_config(mode="pa", iterations=2), images, source=source_ckpt))
        other = list(train_scratch(small_config(iterations=2, seed=9), images))[-1]
        with pytest.raises(CheckpointError):
            Trainer(small_config(mode="pa"), images, source=other, resume=mid)


class TestGenerate:
    def test_shape_range_and_determinism(self, source_ckpt):
        model = model_from_checkpoint(source_ckpt)
        s = build_schedule(20)
        a = generate(model, s, 5, seed=3, batch_size=2)
        assert a.shape == (5, 3, 8, 8)
        assert bool(torch.isfinite(a).all())
        assert torch.equal(a, generate(model, s, 5, seed=3, batch_size=2))
        # a different batch split only changes floating-point rounding
        torch.testing.assert_close(a, generate(model, s, 5, seed=3, batch_size=5), rtol=1e-4, atol=1e-4)
        assert not torch.equal(a, generate(model, s, 5, seed=4))

    def test_rejects_empty(self, source_ckpt):
        with pytest.raises(ValueError):
            generate(model_from_checkpoint(source_ckpt), build_schedule(20), 0)


class TestCheckpointFormat:
    def test_round_trip_is_byte_identical(self, source_ckpt, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(source_ckpt, path)
        loaded = load_checkpoint(path)
        save_checkpoint(loaded, tmp_path / "b.ckpt")
        assert path.read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert loaded.iteration == source_ckpt.iteration
        assert loaded.meta["param_count"] == sum(v.numel() for k, v in loaded.params.items())
        for k, v in source_ckpt.params.items():
            assert torch.equal(loaded.params[k], v)

    def test_rejects_mismatched_architecture(self, source_ckpt, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(source_ckpt, path)
        other = small_config(base_width=16).model_config()
        with pytest.raises(CheckpointError, match="base_width"):
            load_checkpoint(path, expect=other)
        assert load_checkpoint(path, expect=small_config().model_config()).iteration == 3

    def test_rejects_corruption(self, source_ckpt):
        data = to_bytes(source_ckpt)
        with pytest.raises(CheckpointError):
            from_bytes(b"garbage" + data)
        with pytest.raises(CheckpointError):
            from_bytes(data[:-5])
        with pytest.raises(CheckpointError):
            from_bytes(data + b"\x00")

    def test_rejects_inconsistent_schedule(self, source_ckpt):
        bad = dataclass_replace_schedule(source_ckpt)
        with pytest.raises(CheckpointError, match="inconsistent"):
            from_bytes(to_bytes(bad))

    def test_no_partial_file_on_failure(self, source_ckpt, tmp_path, monkeypatch):
        import ddpm_pa.checkpoint as ck

        def boom(_):
            raise RuntimeError("disk full")

        monkeypatch.setattr(ck, "to_bytes", boom)
        with pytest.raises(RuntimeError):
            ck.save_checkpoint(source_ckpt, tmp_path / "x.ckpt")
        assert list(tmp_path.iterdir()) == []


def dataclass_replace_schedule(ckpt):
    s = ckpt.schedule
    bad_bar = s.alpha_bar.clone()
    bad_bar[3] += 1e-9
    return dataclasses.replace(ckpt, schedule=dataclasses.replace(s, alpha_bar=bad_bar))


class TestCsvLog:
    def test_header_and_append(self, tmp_path):
        path = tmp_path / "log.csv"
        row = {"iteration": 1, **{c: 0.1 for c in LOG_COLUMNS[1:]}}
        with CsvLog(path) as log:
            log(row)
        with CsvLog(path, append=True) as log:
            log({**row, "iteration": 2})
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(LOG_COLUMNS)
        assert lines[1:] == ["1," + ",".join(["0.1"] * 6), "2," + ",".join(["0.1"] * 6)]
