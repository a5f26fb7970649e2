"""Training-loop tests: step accounting, mode decoupling, checkpoints, resume."""

import dataclasses

import numpy as np
import pytest

from datkit import trainer
from datkit.errors import ConfigError, FormatError, ValidationError
from datkit.model import ModelConfig
from datkit.optim import Schedules
from datkit.synthgen import SynthConfig, generate
from datkit.trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

SMALL_MODEL = ModelConfig(input_dim=8, encoder_layers=1, encoder_hidden=6, head_hidden=6, seed=7)


def small_config(**overrides) -> TrainConfig:
    base = dict(
        mode="finetune",
        epochs=1,
        batch_size=8,
        lr=1e-3,
        schedules=Schedules(lambda_ramp_steps=10),
        model=SMALL_MODEL,
        seed=11,
    )
    base.update(overrides)
    return TrainConfig(**base)


def small_data(n=17, seed=5):
    return generate(SynthConfig(n=n, dim=8, seed=seed, joint=(0.2, 0.3, 0.3, 0.2)))


ZERO_LAMBDA = Schedules(lambda_start=0.0, lambda_end=0.0, lambda_ramp_steps=10)


class TestTrain:
    def test_step_count_is_ceil(self):
        result = train(small_config(), small_data(17))
        assert result.checkpoint.step == 3
        assert len(result.step_lambdas) == 3

    def test_empty_training_set_rejected(self):
        with pytest.raises(ValidationError):
            train(small_config(), [])

    def test_degenerate_class_rejected(self):
        data = [e for e in small_data(30) if e.label == 0]
        with pytest.raises(ConfigError, match="label"):
            train(small_config(), data)

    def test_bad_mode_rejected(self):
        with pytest.raises(ConfigError):
            train(small_config(mode="gan"), small_data())

    def test_loss_descends_on_learnable_task(self):
        config = small_config(epochs=6, lr=5e-3)
        result = train(config, small_data(120, seed=42))
        assert result.epoch_losses[-1].l_mental < result.epoch_losses[0].l_mental

    def test_determinism_across_runs(self):
        config = small_config(mode="dat", epochs=2)
        data = small_data(30)
        a = train(config, data)
        b = train(config, data)
        assert a.checkpoint.live.allclose_bitwise(b.checkpoint.live)
        assert a.checkpoint.ema.allclose_bitwise(b.checkpoint.ema)
        assert a.step_lambdas == b.step_lambdas

    def test_lambda_trace_is_ramp(self):
        config = small_config(mode="dat", epochs=2, schedules=Schedules(lambda_ramp_steps=4))
        result = train(config, small_data(17))
        trace = result.step_lambdas
        assert all(a <= b for a, b in zip(trace, trace[1:]))
        assert trace[0] == 0.0096
        assert all(v == 1.0 for v in trace[4:])

    def test_finetune_mode_records_zero_gender_loss(self):
        result = train(small_config(), small_data())
        assert all(b.l_dis == 0.0 and b.lam == 0.0 for b in result.epoch_losses)


class TestLambdaZeroDecoupling:
    def test_encoder_and_classifier_match_finetune_bitwise(self):
        data = small_data(40)
        ft = train(small_config(epochs=2), data)
        dat = train(small_config(epochs=2, mode="dat", schedules=ZERO_LAMBDA), data)
        for group in ("encoder", "classifier"):
            for name in ft.checkpoint.live.group(group):
                assert ft.checkpoint.live[name].tobytes() == dat.checkpoint.live[name].tobytes()
                assert ft.checkpoint.ema[name].tobytes() == dat.checkpoint.ema[name].tobytes()

    def test_gender_labels_cannot_reach_classifier(self):
        data = small_data(40)
        flipped = [dataclasses.replace(e) for e in data]
        for e in flipped:
            e.gender = 1 - e.gender
        a = train(small_config(epochs=2, mode="dat", schedules=ZERO_LAMBDA), data)
        b = train(small_config(epochs=2, mode="dat", schedules=ZERO_LAMBDA), flipped)
        for group in ("encoder", "classifier"):
            for name in a.checkpoint.live.group(group):
                assert a.checkpoint.live[name].tobytes() == b.checkpoint.live[name].tobytes()


class TestEma:
    def test_zero_coefficient_tracks_live_exactly(self):
        config = small_config(schedules=Schedules(ema_coefficient=0.0, lambda_ramp_steps=10))
        result = train(config, small_data())
        assert result.checkpoint.ema.allclose_bitwise(result.checkpoint.live)

    def test_default_shadow_lags_live(self):
        result = train(small_config(epochs=2), small_data(40))
        ckpt = result.checkpoint
        assert not ckpt.ema.allclose_bitwise(ckpt.live)


class TestCheckpointIO:
    def test_round_trip_bitwise(self, tmp_path):
        result = train(small_config(mode="dat"), small_data())
        path = tmp_path / "run.ckpt"
        save_checkpoint(result.checkpoint, path)
        back = load_checkpoint(path)
        assert back.live.allclose_bitwise(result.checkpoint.live)
        assert back.ema.allclose_bitwise(result.checkpoint.ema)
        assert back.step == result.checkpoint.step
        assert back.config == result.checkpoint.config
        assert back.adam.t == result.checkpoint.adam.t
        for name in result.checkpoint.adam.m:
            assert back.adam.m[name].tobytes() == result.checkpoint.adam.m[name].tobytes()
            assert back.adam.v[name].tobytes() == result.checkpoint.adam.v[name].tobytes()

    def test_corrupted_magic_rejected(self, tmp_path):
        result = train(small_config(), small_data())
        path = tmp_path / "run.ckpt"
        save_checkpoint(result.checkpoint, path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_truncated_file_rejected(self, tmp_path):
        result = train(small_config(), small_data())
        path = tmp_path / "run.ckpt"
        save_checkpoint(result.checkpoint, path)
        path.write_bytes(path.read_bytes()[:100])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(path)

    def test_unknown_version_rejected(self, tmp_path):
        result = train(small_config(), small_data())
        path = tmp_path / "run.ckpt"
        ckpt = dataclasses.replace(result.checkpoint, version=99)
        save_checkpoint(ckpt, path)
        with pytest.raises(FormatError, match="version"):
            load_checkpoint(path)


class TestResume:
    @pytest.mark.parametrize("mode", ["finetune", "dat"])
    def test_resume_reproduces_uninterrupted_run(self, tmp_path, mode):
        config = small_config(mode=mode, epochs=3)
        data = small_data(20)
        full = train(config, data)

        # Interrupt mid-epoch (7 steps into 9), persist, reload, continue.
        partial = train(config, data, stop_after_steps=7)
        assert partial.checkpoint.step == 7
        path = tmp_path / "mid.ckpt"
        save_checkpoint(partial.checkpoint, path)
        resumed = train(config, data, resume_from=load_checkpoint(path))

        assert resumed.checkpoint.step == full.checkpoint.step
        assert resumed.checkpoint.live.allclose_bitwise(full.checkpoint.live)
        assert resumed.checkpoint.ema.allclose_bitwise(full.checkpoint.ema)

    def test_config_mismatch_rejected(self):
        data = small_data(20)
        partial = train(small_config(), data, stop_after_steps=1)
        with pytest.raises(ConfigError):
            train(small_config(seed=99), data, resume_from=partial.checkpoint)
