import logging

import numpy as np
import pytest

from hyptas.data import RunConfig, SyntheticSpec, generate_synthetic
from hyptas.errors import FormatError, ShapeError
from hyptas.trainer import (
    TrainedState,
    infer_video,
    init_prototypes,
    load_checkpoint,
    save_checkpoint,
    train,
)

TINY_SPEC = SyntheticSpec(
    num_tasks=2, actions_per_task=1, shared_actions=2, feature_dim=8,
    frames_per_segment=(8, 12), segments_per_video=(3, 4), feature_noise=0.3,
    videos=10, seed=5,
)


@pytest.fixture(scope="module")
def tiny_data():
    return generate_synthetic(TINY_SPEC)


@pytest.fixture(scope="module")
def tiny_run(tiny_data):
    config = RunConfig(epochs=10, e1=4, seed=3, infer_steps=4, timesteps=100)
    state, log = train(tiny_data, config)
    return state, log, config


class TestInitPrototypes:
    def test_same_seed_identical(self):
        a = init_prototypes(6, 16, 1.0, seed=4)
        b = init_prototypes(6, 16, 1.0, seed=4)
        assert np.array_equal(a.points, b.points)

    def test_norms_small_and_distinct(self):
        p = init_prototypes(12, 8, 1.0, seed=9)
        norms = np.linalg.norm(p.points, axis=1)
        assert np.all(norms <= 0.1 + 1e-12)
        assert p.min_pairwise_distance() > 0.0
        assert not p.frozen

    def test_large_class_count(self):
        p = init_prototypes(48, 16, 1.0, seed=0)
        assert p.points.shape == (48, 16)

    def test_too_few_classes(self):
        with pytest.raises(ShapeError):
            init_prototypes(1, 8, 1.0, seed=0)


class TestTrainLoop:
    def test_smoke_run_cross_entropy_descends(self, tiny_data):
        config = RunConfig(epochs=30, seed=1, infer_steps=2, timesteps=100)
        state, log = train(tiny_data, config)
        first = log.records[0].components["ce"]
        last = log.records[-1].components["ce"]
        assert last < first

    def test_phase_flips_exactly_once(self, tiny_run):
        _, log, config = tiny_run
        phases = log.phases()
        assert phases[: config.e1] == ["stabilization"] * config.e1
        assert phases[config.e1 :] == ["guidance"] * (config.epochs - config.e1)

    def test_prototype_checksum_constant_after_freeze(self, tiny_run):
        state, log, config = tiny_run
        frozen_sums = {r.prototype_checksum for r in log.records if r.epoch >= config.e1}
        assert len(frozen_sums) == 1
        stab_sums = {r.prototype_checksum for r in log.records if r.epoch < config.e1}
        assert len(stab_sums) > 1  # prototypes actually moved during stabilization
        assert state.prototypes.frozen

    def test_phase_discipline_of_components(self, tiny_run):
        _, log, config = tiny_run
        for record in log.records:
            if record.phase == "stabilization":
                assert "margin" in record.components and "pp" in record.components
                assert "gg" not in record.components
            else:
                assert "gg" in record.components
                assert "margin" not in record.components
                assert "pp" not in record.components
            assert "ce" in record.components and "entail" in record.components

    def test_e1_equal_epochs_never_guides(self, tiny_data):
        config = RunConfig(epochs=4, e1=4, seed=2, infer_steps=2, timesteps=50)
        state, log = train(tiny_data, config)
        assert set(log.phases()) == {"stabilization"}
        assert all("gg" not in r.components for r in log.records)
        assert not state.prototypes.frozen

    def test_e1_zero_is_guidance_only(self, tiny_data):
        config = RunConfig(epochs=4, e1=0, seed=2, infer_steps=2, timesteps=50)
        state, log = train(tiny_data, config)
        assert set(log.phases()) == {"guidance"}
        assert all("margin" not in r.components for r in log.records)
        checksums = {r.prototype_checksum for r in log.records}
        assert len(checksums) == 1  # frozen from the start

    def test_single_phase_keeps_prototypes_trainable(self, tiny_data):
        config = RunConfig(epochs=6, seed=2, infer_steps=2, timesteps=50, single_phase=True)
        state, log = train(tiny_data, config)
        assert set(log.phases()) == {"single"}
        assert not state.prototypes.frozen
        for record in log.records:
            assert {"ce", "entail", "margin", "pp", "gg"} <= set(record.components)
        assert len({r.prototype_checksum for r in log.records}) > 1

    def test_ce_only_ablation_parity(self, tiny_data):
        config = RunConfig(
            epochs=4, seed=2, infer_steps=2, timesteps=50,
            lambda_entail=0.0, lambda_margin=0.0, lambda_pp=0.0, lambda_gg=0.0,
        )
        _, log = train(tiny_data, config)
        for record in log.records:
            assert record.total == pytest.approx(
                config.lambda_ce * record.components["ce"], abs=0.0
            )

    def test_aux_head_off_path(self, tiny_data):
        on = RunConfig(epochs=3, seed=6, infer_steps=2, timesteps=50, aux_head=True)
        off = RunConfig(epochs=3, seed=6, infer_steps=2, timesteps=50, aux_head=False)
        _, log_on = train(tiny_data, on)
        _, log_off = train(tiny_data, off)
        # the encoder head contributes a second cross-entropy term only when on
        assert log_on.records[0].components["ce"] > log_off.records[0].components["ce"]
        assert all(np.isfinite(r.total) for r in log_off.records)

    def test_deterministic_checkpoints(self, tiny_data, tmp_path):
        config = RunConfig(epochs=5, seed=11, infer_steps=2, timesteps=50)
        for name in ("a", "b"):
            state, _ = train(tiny_data, config)
            save_checkpoint(state, tmp_path / f"{name}.htck")
        assert (tmp_path / "a.htck").read_bytes() == (tmp_path / "b.htck").read_bytes()

    def test_eval_cadence_and_log_lines(self, tiny_run):
        _, log, config = tiny_run
        eval_epochs = [r.epoch for r in log.records if r.metrics is not None]
        assert eval_epochs  # at least the final epoch evaluates
        assert config.epochs - 1 in eval_epochs
        line = log.records[-1].format_line()
        assert line.startswith(f"epoch={config.epochs - 1} phase=")
        assert "acc=" in line and "avg=" in line

    def test_empty_training_split_rejected(self, tiny_data):
        from hyptas.data import Dataset

        empty = Dataset([], tiny_data.test, tiny_data.class_names, tiny_data.feature_dim)
        with pytest.raises(ShapeError):
            train(empty, RunConfig(epochs=1))


class TestInference:
    def test_output_length_matches_input(self, tiny_run, tiny_data):
        state, _, _ = tiny_run
        video = tiny_data.test[0]
        labels, probs, ball = infer_video(state, video.features, steps=3, seed=0)
        L = video.features.shape[0]
        assert labels.shape == (L,)
        assert probs.shape == (L, tiny_data.num_classes)
        assert ball.shape == (L, state.config.embed_dim)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)

    def test_single_step_inference_works(self, tiny_run, tiny_data):
        state, _, _ = tiny_run
        labels, _, _ = infer_video(state, tiny_data.test[0].features, steps=1, seed=0)
        assert labels.shape[0] == tiny_data.test[0].features.shape[0]

    def test_same_seed_same_predictions(self, tiny_run, tiny_data):
        state, _, _ = tiny_run
        a = infer_video(state, tiny_data.test[0].features, steps=4, seed=9)
        b = infer_video(state, tiny_data.test[0].features, steps=4, seed=9)
        assert np.array_equal(a[0], b[0])
        assert np.array_equal(a[1], b[1])

    def test_embeddings_inside_ball(self, tiny_run, tiny_data):
        state, _, _ = tiny_run
        _, _, ball = infer_video(state, tiny_data.test[0].features, steps=2, seed=0)
        c = state.config.curvature
        assert np.all(c * np.sum(ball * ball, axis=1) < 1.0)

    def test_feature_dim_mismatch(self, tiny_run):
        state, _, _ = tiny_run
        with pytest.raises(ShapeError):
            infer_video(state, np.zeros((5, 3)), steps=2, seed=0)


class TestCheckpointRoundtrip:
    def test_loaded_state_reproduces_predictions(self, tiny_run, tiny_data, tmp_path):
        state, _, _ = tiny_run
        path = tmp_path / "model.htck"
        save_checkpoint(state, path)
        loaded = load_checkpoint(path)
        video = tiny_data.test[0]
        a = infer_video(state, video.features, steps=4, seed=3)
        b = infer_video(loaded, video.features, steps=4, seed=3)
        assert np.array_equal(a[0], b[0])
        assert a[1].tobytes() == b[1].tobytes()
        assert a[2].tobytes() == b[2].tobytes()

    def test_frozen_flag_survives(self, tiny_run, tmp_path):
        state, _, _ = tiny_run
        path = tmp_path / "model.htck"
        save_checkpoint(state, path)
        assert load_checkpoint(path).prototypes.frozen == state.prototypes.frozen

    def test_config_survives(self, tiny_run, tmp_path):
        state, _, config = tiny_run
        path = tmp_path / "model.htck"
        save_checkpoint(state, path)
        assert load_checkpoint(path).config == config

    def test_hash_mismatch_warns_but_loads(self, tiny_run, tmp_path, caplog):
        state, _, _ = tiny_run
        path = tmp_path / "model.htck"
        save_checkpoint(state, path)
        other = RunConfig(epochs=99)
        with caplog.at_level(logging.WARNING):
            load_checkpoint(path, expected_config=other)
        assert any("hash" in r.message for r in caplog.records)

    def test_missing_tensor_is_error(self, tiny_run, tmp_path):
        state, _, _ = tiny_run
        from hyptas.data import read_checkpoint, write_checkpoint

        path = tmp_path / "model.htck"
        save_checkpoint(state, path)
        sections = read_checkpoint(path)
        first_param = next(k for k in sections if k.startswith("param/"))
        del sections[first_param]
        write_checkpoint(path, list(sections.items()))
        with pytest.raises(FormatError, match="missing tensor"):
            load_checkpoint(path)

    def test_shape_mismatch_is_error(self, tiny_run, tmp_path):
        state, _, _ = tiny_run
        from hyptas.data import read_checkpoint, write_checkpoint

        path = tmp_path / "model.htck"
        save_checkpoint(state, path)
        sections = read_checkpoint(path)
        first_param = next(k for k in sections if k.startswith("param/"))
        sections[first_param] = np.zeros((2, 2))
        write_checkpoint(path, list(sections.items()))
        with pytest.raises(FormatError, match="shape"):
            load_checkpoint(path)
