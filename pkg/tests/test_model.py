import logging

import numpy as np
import pytest

import hyptas.autodiff as td
import hyptas.ballops as bo
from hyptas.autodiff import Tape
from hyptas.errors import ShapeError
from hyptas.losses import LossWeights, cross_entropy, prototype_margin, push_pull, \
    stabilization_total, temporal_entailment
from hyptas.metrics import segments_from_labels
from hyptas.model import (
    BoundDenoiser,
    Denoiser,
    DenoiserConfig,
    apply_masking,
    mask_vector,
    receptive_halfwidth,
    sample_mask_kind,
    sinusoidal_step_embedding,
)

CFG = DenoiserConfig(feature_dim=10, classes=4)


def make_model(seed=0, **overrides):
    cfg = DenoiserConfig(**{**CFG.__dict__, **overrides})
    return Denoiser(cfg, seed=seed)


class TestEncode:
    def test_zero_features_finite_and_normalized(self):
        model = make_model()
        tape = Tape()
        cond, p_enc = model.bind(tape, trainable=False).encode(np.zeros((20, 10)))
        assert np.all(np.isfinite(cond.value))
        assert np.allclose(p_enc.value.sum(axis=1), 1.0, atol=1e-9)

    def test_deterministic_given_seed_and_input(self):
        rng = np.random.default_rng(1)
        features = rng.normal(size=(30, 10))

        def run():
            model = make_model(seed=7)
            tape = Tape()
            cond, p_enc = model.bind(tape, trainable=False).encode(features)
            return cond.value.tobytes(), p_enc.value.tobytes()

        assert run() == run()

    def test_receptive_field_is_dilation_window(self):
        model = make_model()
        rng = np.random.default_rng(3)
        features = rng.normal(size=(64, 10))
        tape = Tape()
        base = model.bind(tape, trainable=False).encode(features)[0].value

        probe = 32
        perturbed = features.copy()
        perturbed[probe] += 1.0
        tape2 = Tape()
        moved = model.bind(tape2, trainable=False).encode(perturbed)[0].value

        changed = np.where(np.any(moved != base, axis=1))[0]
        half = receptive_halfwidth(model.config)
        assert half == 15
        assert changed.size > 0
        assert changed.min() >= probe - half
        assert changed.max() <= probe + half

    def test_feature_dim_mismatch(self):
        model = make_model()
        tape = Tape()
        with pytest.raises(ShapeError):
            model.bind(tape).encode(np.zeros((5, 11)))

    def test_non_finite_features_rejected(self):
        model = make_model()
        tape = Tape()
        bad = np.zeros((5, 10))
        bad[0, 0] = np.nan
        with pytest.raises(ShapeError):
            model.bind(tape).encode(bad)


class TestDecode:
    def _forward(self, model, t, L=25, seed=5):
        rng = np.random.default_rng(seed)
        tape = Tape()
        bound = model.bind(tape, trainable=False)
        cond, _ = bound.encode(rng.normal(size=(L, 10)))
        y_t = tape.const(rng.normal(size=(L, 4)))
        return bound.decode(y_t, cond, t)

    def test_probabilities_normalized(self):
        emb, probs = self._forward(make_model(), t=100)
        assert np.allclose(probs.value.sum(axis=1), 1.0, atol=1e-9)

    def test_step_embedding_changes_output(self):
        model = make_model()
        emb_a, _ = self._forward(model, t=10)
        emb_b, _ = self._forward(model, t=900)
        assert not np.allclose(emb_a.value, emb_b.value)

    def test_embeddings_land_in_ball_after_projection(self):
        emb, _ = self._forward(make_model(), t=50)
        for c in (0.5, 1.0, 2.0):
            tape = Tape()
            ball = bo.exp_map_origin_rows(tape.const(emb.value), c)
            assert np.all(c * np.sum(ball.value**2, axis=1) < 1.0)

    def test_signal_shape_checked(self):
        model = make_model()
        tape = Tape()
        bound = model.bind(tape, trainable=False)
        cond, _ = bound.encode(np.zeros((10, 10)))
        with pytest.raises(ShapeError):
            bound.decode(tape.const(np.zeros((10, 5))), cond, 1)
        with pytest.raises(ShapeError):
            bound.decode(tape.const(np.zeros((9, 4))), cond, 1)

    def test_step_embedding_shape(self):
        emb = sinusoidal_step_embedding(123, 64)
        assert emb.shape == (1, 64)
        assert np.all(np.isfinite(emb))
        assert not np.array_equal(emb, sinusoidal_step_embedding(124, 64))


class TestMasking:
    SEGMENTS = segments_from_labels([0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 2])

    def test_none_is_identity(self):
        tape = Tape()
        cond = tape.const(np.ones((12, 3)))
        out = apply_masking(cond, "none", self.SEGMENTS, np.random.default_rng(0))
        assert out is cond

    def test_position_zeroes_everything(self):
        tape = Tape()
        cond = tape.const(np.ones((12, 3)))
        out = apply_masking(cond, "position", self.SEGMENTS, np.random.default_rng(0))
        assert np.array_equal(out.value, np.zeros((12, 3)))

    def test_boundary_windows(self):
        keep = mask_vector("boundary", self.SEGMENTS, 12, np.random.default_rng(0), 2)
        # boundaries at first frames of later segments: 3 and 7
        expect = np.ones(12)
        for b in (3, 7):
            expect[max(b - 2, 0) : b + 3] = 0.0
        assert np.array_equal(keep[:, 0], expect)

    def test_relation_zeroes_exactly_one_ground_truth_segment(self):
        rng = np.random.default_rng(11)
        keep = mask_vector("relation", self.SEGMENTS, 12, rng)
        zero_rows = np.where(keep[:, 0] == 0.0)[0]
        spans = [(s.start, s.end) for s in self.SEGMENTS]
        assert (zero_rows.min(), zero_rows.max()) in spans
        assert np.all(np.diff(zero_rows) == 1)

    def test_relation_seeded_choice_deterministic(self):
        a = mask_vector("relation", self.SEGMENTS, 12, np.random.default_rng(42))
        b = mask_vector("relation", self.SEGMENTS, 12, np.random.default_rng(42))
        assert np.array_equal(a, b)

    def test_relation_without_segments_falls_back(self, caplog):
        tape = Tape()
        cond = tape.const(np.ones((4, 2)))
        with caplog.at_level(logging.WARNING):
            out = apply_masking(cond, "relation", [], np.random.default_rng(0))
        assert np.array_equal(out.value, np.ones((4, 2)))
        assert any("falling back" in r.message for r in caplog.records)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ShapeError):
            mask_vector("temporal", self.SEGMENTS, 12, np.random.default_rng(0))

    def test_kind_sampling_uniform_and_seeded(self):
        rng = np.random.default_rng(9)
        kinds = [sample_mask_kind(rng) for _ in range(400)]
        for kind in ("none", "position", "boundary", "relation"):
            assert 60 < kinds.count(kind) < 140

    def test_masking_only_affects_condition_gradient(self):
        model = make_model()
        rng = np.random.default_rng(13)
        tape = Tape()
        bound = model.bind(tape, trainable=False)
        cond, _ = bound.encode(rng.normal(size=(12, 10)))
        masked = apply_masking(cond, "position", self.SEGMENTS, rng)
        y_t = tape.const(rng.normal(size=(12, 4)))
        emb, probs = bound.decode(y_t, masked, 3)
        assert np.array_equal(y_t.value, y_t.value)  # signal untouched by masking
        assert np.all(np.isfinite(probs.value))


class TestGradientFlow:
    def test_every_parameter_receives_gradient_from_phase_one_loss(self):
        model = make_model(seed=3)
        rng = np.random.default_rng(17)
        L, C = 40, 4
        features = rng.normal(size=(L, 10))
        labels = rng.integers(0, C, size=L)
        y_onehot = np.eye(C)[labels]

        tape = Tape()
        bound = model.bind(tape, trainable=True)
        cond, p_enc = bound.encode(features)
        y_t = tape.const(rng.normal(size=(L, C)))
        emb, probs = bound.decode(y_t, cond, 120)

        ball = bo.exp_map_origin_rows(emb, 1.0)
        proto_leaf = tape.leaf(0.05 * rng.normal(size=(C, model.config.embed_dim)))
        protos = bo.exp_map_origin_rows(proto_leaf, 1.0)
        assigned = td.gather_rows(protos, labels)
        w = LossWeights()
        ce = td.add(cross_entropy(probs, y_onehot), cross_entropy(p_enc, y_onehot))
        total = stabilization_total(
            ce,
            temporal_entailment(ball, w.cone_k),
            prototype_margin(protos, w.margin, 1.0),
            push_pull(ball, assigned, 250, 1000, w.decay, 1.0),
            w,
        )
        grads = tape.backward(total)
        for name, tensor in bound.bound.items():
            g = grads[tensor]
            assert np.any(g != 0.0), f"dead parameter {name}"
        assert np.any(grads[proto_leaf] != 0.0)

    def test_parameter_count_in_expected_band(self):
        model = Denoiser(DenoiserConfig(feature_dim=32, classes=6))
        assert 15_000 < model.parameter_count() < 60_000
