"""Schedule, optimizer, training stages, and the transfer pipeline."""

import numpy as np
import pytest

from merlib import tensor as tc
from merlib.data import synth_dataset
from merlib.errors import (CheckpointSpecMismatch, ConfigError, ShapeError,
                           TrainingError)
from merlib.model import (NetworkSpec, build_network, load_checkpoint,
                          save_checkpoint)
from merlib.train import (PRESETS, EpochRecord, OptimState, PipelineStage,
                          Schedule, StagePreset, TrainLog, evaluate_accuracy,
                          lr_at, predict_classes, prepare_input,
                          preset_override, run_stage, sgd_step,
                          transfer_pipeline)

SPEC16 = NetworkSpec.stack((3, 16, 16), 2, 4, 2)


def overfit_preset(**overrides):
    base = StagePreset("overfit", batch_size=8, lr0=0.05, weight_decay=0.0,
                       step_epochs=1000, epochs=5, momentum=0.9,
                       augment=None, resample=False)
    return preset_override(base, **overrides)


class TestSchedule:
    def test_pretrain_boundaries(self):
        s = PRESETS["pretrain"].schedule()
        assert lr_at(s, 0) == 0.01
        assert lr_at(s, 19) == 0.01
        assert lr_at(s, 20) == pytest.approx(0.001, rel=1e-12)

    def test_loso_epoch_25(self):
        s = PRESETS["loso"].schedule()
        assert lr_at(s, 25) == pytest.approx(1e-5, rel=1e-12)

    def test_non_increasing_and_piecewise_constant(self):
        s = Schedule(0.1, 7)
        values = [lr_at(s, e) for e in range(60)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        for e in range(59):
            if (e + 1) % 7:
                assert values[e + 1] == values[e]

    def test_validation(self):
        with pytest.raises(ConfigError):
            Schedule(0.0, 10)
        with pytest.raises(ConfigError):
            Schedule(0.1, 0)
        with pytest.raises(ConfigError):
            Schedule(0.1, 10, factor=1.0)
        with pytest.raises(ConfigError):
            lr_at(Schedule(0.1, 10), -1)


class TestPresets:
    def test_section_table_values(self):
        p = PRESETS["pretrain"]
        assert (p.batch_size, p.lr0, p.step_epochs) == (50, 0.01, 20)
        h = PRESETS["hde"]
        assert (h.batch_size, h.lr0, h.weight_decay, h.step_epochs) == (10, 1e-4, 3e-2, 10)
        c = PRESETS["cde"]
        assert (c.batch_size, c.lr0, c.weight_decay, c.step_epochs) == (8, 1e-3, 5e-6, 10)
        l = PRESETS["loso"]
        assert (l.batch_size, l.lr0, l.weight_decay, l.step_epochs) == (10, 1e-3, 5e-4, 10)
        assert all(PRESETS[k].momentum == 0.9 for k in PRESETS)
        assert all(PRESETS[k].resample for k in ("hde", "cde", "loso"))
        assert PRESETS["cde"].augment.crop == (240, 224)

    def test_preset_validation(self):
        with pytest.raises(ConfigError):
            StagePreset("x", batch_size=0, lr0=0.1, weight_decay=0, step_epochs=1)
        with pytest.raises(ConfigError):
            StagePreset("x", batch_size=1, lr0=0.1, weight_decay=0,
                        step_epochs=1, momentum=1.0)
        with pytest.raises(ConfigError):
            StagePreset("x", batch_size=1, lr0=0.1, weight_decay=-1, step_epochs=1)


class TestSgdStep:
    def _setup(self, value):
        p = tc.Tensor(np.array([value]), requires_grad=True)
        params = {"p": p}
        return p, params, OptimState(params)

    def test_zero_grad_zero_decay_is_fixed_point(self):
        p, params, state = self._setup(1.0)
        sgd_step(params, {"p": np.zeros(1)}, state, lr=0.1, momentum=0.9,
                 weight_decay=0.0)
        assert p.data[0] == 1.0
        assert state.velocity["p"][0] == 0.0

    def test_two_step_hand_iteration(self):
        p, params, state = self._setup(1.0)
        g = np.array([1.0])
        sgd_step(params, {"p": g}, state, lr=0.1, momentum=0.9, weight_decay=0.0)
        assert p.data[0] == 1.0 - 0.1 * 1.0
        assert state.velocity["p"][0] == 1.0
        sgd_step(params, {"p": g}, state, lr=0.1, momentum=0.9, weight_decay=0.0)
        v2 = 0.9 * 1.0 + 1.0
        assert state.velocity["p"][0] == v2
        assert p.data[0] == (1.0 - 0.1 * 1.0) - 0.1 * v2  # 0.71 up to float eval
        assert p.data[0] == pytest.approx(0.71, abs=1e-12)

    def test_pure_decay_step(self):
        p, params, state = self._setup(1.0)
        sgd_step(params, {"p": np.zeros(1)}, state, lr=1.0, momentum=0.0,
                 weight_decay=0.1)
        assert p.data[0] == pytest.approx(0.9, abs=1e-15)

    def test_zero_lr_is_identity_on_params(self):
        p, params, state = self._setup(3.0)
        sgd_step(params, {"p": np.array([5.0])}, state, lr=0.0, momentum=0.9,
                 weight_decay=0.01)
        assert p.data[0] == 3.0

    def test_non_finite_gradient_aborts(self):
        p, params, state = self._setup(1.0)
        with pytest.raises(TrainingError, match="p"):
            sgd_step(params, {"p": np.array([float("nan")])}, state, lr=0.1,
                     momentum=0.9, weight_decay=0.0)

    def test_shape_mismatch_rejected(self):
        p, params, state = self._setup(1.0)
        with pytest.raises(ShapeError):
            sgd_step(params, {"p": np.zeros(2)}, state, lr=0.1, momentum=0.9,
                     weight_decay=0.0)


class TestPrepareInput:
    def test_normalization_range(self):
        img = np.zeros((8, 8, 3), dtype=np.uint8)
        img[0, 0] = 255
        x = prepare_input(img, (3, 8, 8))
        assert x.shape == (3, 8, 8)
        assert x[0, 0, 0] == 0.5
        assert x[0, 1, 1] == -0.5

    def test_center_crop_for_oversized_images(self):
        img = np.zeros((12, 12, 3), dtype=np.uint8)
        img[4:12, 4:12] = 200
        x = prepare_input(img, (3, 8, 8))
        assert x.shape == (3, 8, 8)
        # the crop keeps rows/cols 2..9 of the original
        assert x[0, 2, 2] == 200 / 255.0 - 0.5

    def test_undersized_image_rejected(self):
        with pytest.raises(ShapeError):
            prepare_input(np.zeros((4, 4, 3), dtype=np.uint8), (3, 8, 8))


class TestRunStage:
    def _dataset(self, seed=0):
        return synth_dataset(2, 1, 4, image_size=16, seed=seed)  # 8 samples

    def test_overfits_a_tiny_set(self):
        data = self._dataset()
        model = build_network(NetworkSpec.stack((3, 16, 16), 2, 8, 2), seed=1)
        _, log = run_stage(model, data, None,
                           overfit_preset(epochs=200, lr0=0.01), seed=3)
        assert log.records[-1].train_loss < 0.01

    def test_same_seed_gives_identical_trajectories(self):
        data = self._dataset()
        runs = []
        for _ in range(2):
            model = build_network(SPEC16, seed=1)
            model, log = run_stage(model, data, data,
                                   overfit_preset(epochs=3), seed=7)
            runs.append((log.to_text(),
                         {n: p.data.tobytes() for n, p in model.parameters().items()}))
        assert runs[0][0] == runs[1][0]
        assert runs[0][1] == runs[1][1]

    def test_lr_trace_follows_schedule(self):
        data = self._dataset()
        model = build_network(SPEC16, seed=1)
        preset = overfit_preset(epochs=5, step_epochs=2)
        _, log = run_stage(model, data, None, preset, seed=0)
        sched = preset.schedule()
        for r in log.records:
            assert r.lr == lr_at(sched, r.epoch)

    def test_val_accuracy_is_measured_entering_the_epoch(self):
        data = self._dataset()
        model = build_network(SPEC16, seed=1)
        before = evaluate_accuracy(model, data)
        _, log = run_stage(model, data, data, overfit_preset(epochs=2), seed=0)
        assert log.records[0].val_accuracy == before

    def test_empty_training_set_rejected(self):
        from merlib.data import Manifest
        model = build_network(SPEC16, seed=1)
        with pytest.raises(ConfigError):
            run_stage(model, Manifest([], ["a", "b"]), None,
                      overfit_preset(), seed=0)

    def test_oversized_batch_rejected(self):
        data = self._dataset()
        model = build_network(SPEC16, seed=1)
        with pytest.raises(ConfigError, match="batch"):
            run_stage(model, data, None, overfit_preset(batch_size=50), seed=0)

    def test_single_step_decreases_single_sample_loss(self):
        # property over several seeds at a conservative learning rate
        for seed in (0, 1, 2):
            data = synth_dataset(2, 1, 1, image_size=16, seed=seed).subset([0])
            model = build_network(SPEC16, seed=seed + 10)

            def loss_value():
                from merlib.train import _batch_array
                x = _batch_array(data, [0], model.spec.input_shape)
                return tc.softmax_cross_entropy(model.forward(tc.Tensor(x)),
                                                data.label_indices()).item()

            before = loss_value()
            preset = overfit_preset(batch_size=1, epochs=1, lr0=1e-4)
            run_stage(model, data, None, preset, seed=seed)
            assert loss_value() < before, f"seed {seed}"

    def test_augmented_training_stays_deterministic(self):
        data = self._dataset()
        preset = preset_override(PRESETS["loso"], epochs=2, batch_size=4)
        texts = []
        for _ in range(2):
            model = build_network(SPEC16, seed=4)
            _, log = run_stage(model, data, None, preset, seed=11)
            texts.append(log.to_text())
        assert texts[0] == texts[1]

    def test_log_serialization_roundtrip_floats(self):
        log = TrainLog([EpochRecord(0, 0.01, 1.6094379124341003, float("nan"))])
        text = log.to_text()
        assert "epoch\tlr\ttrain_loss\tval_accuracy" in text
        row = text.splitlines()[1].split("\t")
        assert float(row[1]) == 0.01
        assert float(row[2]) == 1.6094379124341003
        assert row[3] == "nan"


class TestTransferPipeline:
    def _macro(self):
        return synth_dataset(2, 2, 3, image_size=16, seed=100, database_id="macro")

    def _micro(self):
        return synth_dataset(2, 2, 2, image_size=16, seed=200, database_id="micro")

    def test_two_stage_upgrade_boundary_accuracy(self, tmp_path):
        macro, micro = self._macro(), self._micro()
        stages = [
            PipelineStage(preset=overfit_preset(epochs=3, batch_size=4),
                          train=macro, mode="init", attention=False),
            PipelineStage(preset=overfit_preset(epochs=2, batch_size=4),
                          train=micro, val=macro, mode="upgrade"),
        ]
        model, logs = transfer_pipeline(SPEC16, stages, tmp_path, seed=5)
        assert model.attention is True
        stage1 = load_checkpoint(tmp_path / "stage0.ckpt", SPEC16)
        assert stage1.attention is False
        # zero-injected attention leaves stage-1 behavior untouched
        assert logs[1].records[0].val_accuracy == evaluate_accuracy(stage1, macro)
        assert (tmp_path / "stage1.ckpt").exists()
        assert (tmp_path / "stage0.log").exists()

    def test_single_stage_pipeline_equals_run_stage(self, tmp_path):
        micro = self._micro()
        preset = overfit_preset(epochs=2, batch_size=4)
        stage = PipelineStage(preset=preset, train=micro, mode="init",
                              attention=True)
        piped, _ = transfer_pipeline(SPEC16, [stage], tmp_path, seed=9)
        direct = build_network(SPEC16, seed=9, attention=True)
        direct, _ = run_stage(direct, micro, None, preset, seed=9)
        for (name, a), b in zip(piped.parameters().items(),
                                direct.parameters().values()):
            assert a.data.tobytes() == b.data.tobytes(), name

    def test_resume_from_saved_checkpoint_replays_exactly(self, tmp_path):
        macro, micro = self._macro(), self._micro()
        s0 = PipelineStage(preset=overfit_preset(epochs=2, batch_size=4),
                           train=macro, mode="init")
        s1 = PipelineStage(preset=overfit_preset(epochs=2, batch_size=4),
                           train=micro, mode="upgrade")
        full, _ = transfer_pipeline(SPEC16, [s0, s1], tmp_path / "full", seed=20)
        # redo only stage 1, seeded the way the full pipeline seeded it
        s1_again = PipelineStage(preset=s1.preset, train=micro, mode="upgrade",
                                 seed=21)
        resumed, _ = transfer_pipeline(
            SPEC16, [s1_again], tmp_path / "resume", seed=999,
            init_checkpoint=tmp_path / "full" / "stage0.ckpt")
        for (name, a), b in zip(full.parameters().items(),
                                resumed.parameters().values()):
            assert a.data.tobytes() == b.data.tobytes(), name

    def test_stage_errors_name_the_stage(self, tmp_path):
        other_spec = NetworkSpec.stack((3, 16, 16), 1, 6, 2)
        model = build_network(other_spec, seed=0, attention=False)
        ckpt = tmp_path / "other.ckpt"
        save_checkpoint(model, ckpt)
        stage = PipelineStage(preset=overfit_preset(), train=self._micro(),
                              mode="exact")
        with pytest.raises(CheckpointSpecMismatch, match="stage 0"):
            transfer_pipeline(SPEC16, [stage], tmp_path, seed=0,
                              init_checkpoint=ckpt)

    def test_pipeline_validation(self, tmp_path):
        micro = self._micro()
        preset = overfit_preset()
        with pytest.raises(ConfigError):
            transfer_pipeline(SPEC16, [], tmp_path, seed=0)
        bad_init = [PipelineStage(preset=preset, train=micro, mode="exact"),
                    PipelineStage(preset=preset, train=micro, mode="init")]
        with pytest.raises(ConfigError, match="init"):
            transfer_pipeline(SPEC16, bad_init, tmp_path, seed=0)
        two_upgrades = [PipelineStage(preset=preset, train=micro, mode="upgrade"),
                        PipelineStage(preset=preset, train=micro, mode="upgrade")]
        with pytest.raises(ConfigError, match="once"):
            transfer_pipeline(SPEC16, two_upgrades, tmp_path, seed=0)
        no_source = [PipelineStage(preset=preset, train=micro, mode="exact")]
        with pytest.raises(ConfigError, match="checkpoint"):
            transfer_pipeline(SPEC16, no_source, tmp_path, seed=0)


class TestPredict:
    def test_prediction_matches_argmax(self):
        data = synth_dataset(3, 1, 2, image_size=16, seed=1)
        model = build_network(NetworkSpec.stack((3, 16, 16), 1, 4, 3), seed=2)
        preds = predict_classes(model, data, batch_size=4)
        assert preds.shape == (6,)
        assert preds.dtype == np.int64
        acc = evaluate_accuracy(model, data)
        assert acc == np.mean(preds == data.label_indices())
