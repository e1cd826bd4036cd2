import math

import numpy as np
import pytest

import hyptas.autodiff as td
import hyptas.ballops as bo
from hyptas.autodiff import Tape, finite_diff_check
from hyptas.errors import AutodiffError, ShapeError
from hyptas import geometry


def rand_rows(rng, n, d, lo=0.05, hi=0.9):
    """Rows with norms in [lo, hi], away from every singular set."""
    v = rng.normal(size=(n, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * rng.uniform(lo, hi, size=(n, 1))


class TestBackwardBasics:
    def test_identity_gradient(self):
        tape = Tape()
        x = tape.leaf(np.array(3.0))
        grads = tape.backward(x)
        assert grads[x] == pytest.approx(1.0)

    def test_squared_norm_hand_gradient(self):
        tape = Tape()
        x = tape.leaf(np.array([[1.0, 2.0]]))
        out = td.total(td.rows_dot(x, x))
        grads = tape.backward(out)
        assert np.allclose(grads[x], [[2.0, 4.0]])

    def test_output_must_be_scalar(self):
        tape = Tape()
        x = tape.leaf(np.ones((2, 2)))
        with pytest.raises(AutodiffError):
            tape.backward(td.relu(x))

    def test_foreign_tape_rejected(self):
        t1, t2 = Tape(), Tape()
        x = t1.leaf(np.array(1.0))
        with pytest.raises(AutodiffError):
            t2.backward(x)

    def test_mixed_tapes_rejected(self):
        t1, t2 = Tape(), Tape()
        with pytest.raises(AutodiffError):
            td.add(t1.leaf(np.array(1.0)), t2.leaf(np.array(1.0)))

    def test_constant_receives_no_gradient(self):
        tape = Tape()
        x = tape.leaf(np.array(2.0))
        c = tape.const(np.array(5.0))
        grads = tape.backward(td.mul(x, c))
        assert c not in grads
        assert grads[x] == pytest.approx(5.0)

    def test_unused_leaf_gets_zeros(self):
        tape = Tape()
        x = tape.leaf(np.array([[1.0, 1.0]]))
        y = tape.leaf(np.array(4.0))
        grads = tape.backward(td.mul(y, y))
        assert np.array_equal(grads[x], np.zeros((1, 2)))

    def test_deterministic_bit_identical(self):
        def run():
            rng = np.random.default_rng(5)
            tape = Tape()
            x = tape.leaf(rng.normal(size=(7, 4)))
            w = tape.leaf(rng.normal(size=(4, 3)))
            out = td.mean(td.square(td.tanh(td.matmul(x, w))))
            g = tape.backward(out)
            return [g[t].tobytes() for t in g]

        assert run() == run()

    def test_shape_discipline(self):
        tape = Tape()
        a = tape.leaf(np.ones((3, 2)))
        b = tape.leaf(np.ones((2, 3)))
        with pytest.raises(ShapeError):
            td.add(a, b)
        with pytest.raises(ShapeError):
            td.mul(a, b)

    def test_row_bias_add(self):
        tape = Tape()
        a = tape.leaf(np.zeros((4, 3)))
        b = tape.leaf(np.array([[1.0, 2.0, 3.0]]))
        out = td.total(td.add(a, b))
        grads = tape.backward(out)
        assert np.allclose(grads[b], [[4.0, 4.0, 4.0]])


class TestFiniteDiffOracle:
    def test_linear_function_machine_precision(self):
        w = np.array([[2.0], [-3.0], [0.5]])

        def f(tape, leaves):
            return td.total(td.matmul(leaves[0], tape.const(w)))

        err = finite_diff_check(f, [np.array([[0.3, -0.2, 0.7]])])
        assert err < 1e-9

    def test_distance_to_origin_matches_radial_derivative(self):
        # d(O, x) = 2 artanh(|x|) for c=1; gradient is 2/(1-r^2) * x/r.
        x0 = np.array([[0.3, 0.0]])

        def f(tape, leaves):
            return td.total(bo.origin_distance_rows(leaves[0], 1.0))

        tape = Tape()
        leaf = tape.leaf(x0)
        out = td.total(bo.origin_distance_rows(leaf, 1.0))
        grads = tape.backward(out)
        r = 0.3
        expected = (2.0 / (1.0 - r * r)) * np.array([[1.0, 0.0]])
        assert np.allclose(grads[leaf], expected, rtol=1e-12)
        assert finite_diff_check(f, [x0]) < 1e-6

    def test_rejects_bad_step(self):
        with pytest.raises(AutodiffError):
            finite_diff_check(lambda t, l: td.total(l[0]), [np.ones((1, 1))], step=0.0)

    def test_rejects_non_finite_evaluation(self):
        def f(tape, leaves):
            return td.total(td.log(leaves[0]))

        with np.errstate(invalid="ignore"), pytest.raises(AutodiffError):
            finite_diff_check(f, [np.array([[-1.0]])])


def _op_cases():
    """One scalar-valued composite per registered primitive, on safe domains."""
    rng = np.random.default_rng(17)
    w3 = rng.normal(size=(3, 4, 2))
    w52 = rng.normal(size=(5, 2))

    return {
        "add_mul_sub": lambda t, l: td.mean(td.sub(td.mul(l[0], l[1]), td.add(l[0], l[1]))),
        "div": lambda t, l: td.mean(td.div(l[0], td.add(td.square(l[1]), 0.5))),
        "matmul": lambda t, l: td.mean(td.matmul(l[0], td.matmul(l[1], t.const(w52)))),
        "relu": lambda t, l: td.mean(td.relu(td.sub(l[0], 0.01))),
        "tanh": lambda t, l: td.mean(td.tanh(l[0])),
        "exp_log": lambda t, l: td.mean(td.log(td.add(td.exp(l[0]), 1.0))),
        "sqrt": lambda t, l: td.mean(td.sqrt(td.add(td.square(l[0]), 0.3))),
        "artanh": lambda t, l: td.mean(td.artanh(td.mul(td.tanh(l[0]), 0.9))),
        "asin_acos": lambda t, l: td.mean(td.add(td.asin(td.mul(td.tanh(l[0]), 0.8)),
                                                 td.acos(td.mul(td.tanh(l[1]), 0.8)))),
        "clamp": lambda t, l: td.mean(td.clamp(l[0], lo=-0.5, hi=0.5)),
        "softmax": lambda t, l: td.mean(td.square(td.softmax(l[0]))),
        "log_softmax": lambda t, l: td.mean(td.mul(td.log_softmax(l[0]), t.const(np.eye(4)[:3]))),
        "sum_mean": lambda t, l: td.add(td.total(td.square(l[0])), td.mean(l[1])),
        "rows_dot": lambda t, l: td.mean(td.rows_dot(l[0], l[1])),
        "row_norm": lambda t, l: td.mean(td.row_norm(l[0])),
        "scale_div_rows": lambda t, l: td.mean(td.scale_rows(l[0], td.add(td.row_norm(l[1]), 0.2))),
        "gather_rows": lambda t, l: td.mean(td.gather_rows(l[0], np.array([0, 2, 1, 2]))),
        "slice_concat": lambda t, l: td.mean(td.concat_cols(td.slice_rows(l[0], 0, 2),
                                                            td.slice_rows(l[1], 1, 3))),
        "conv1d": lambda t, l: td.mean(td.conv1d(l[0], t.const(w3), dilation=2)),
    }


class TestPrimitiveGradients:
    @pytest.mark.parametrize("name", sorted(_op_cases()))
    def test_primitive_against_central_differences(self, name):
        f = _op_cases()[name]
        rng = np.random.default_rng(hash(name) % 2**32)
        worst = 0.0
        for _ in range(5):
            a = rand_rows(rng, 3, 4 if name != "matmul" else 5)
            b = rand_rows(rng, 3, 4 if name != "matmul" else 5)
            if name == "matmul":
                a, b = rand_rows(rng, 2, 3), rand_rows(rng, 3, 5)
            worst = max(worst, finite_diff_check(f, [a, b][: f.__code__.co_argcount]))
        assert worst < 1e-4

    def test_hundred_random_points_all_ops(self):
        cases = _op_cases()
        rng = np.random.default_rng(99)
        checks = 0
        for name, f in cases.items():
            for _ in range(5):
                if name == "matmul":
                    pt = [rand_rows(rng, 2, 3), rand_rows(rng, 3, 5)]
                else:
                    pt = [rand_rows(rng, 3, 4), rand_rows(rng, 3, 4)]
                assert finite_diff_check(f, pt) < 1e-4, name
                checks += 1
        assert checks >= 95


class TestBallOps:
    def test_forward_agrees_with_geometry(self):
        rng = np.random.default_rng(41)
        for c in (0.5, 1.0, 2.0):
            X = rand_rows(rng, 20, 3, 0.05, 0.9 / math.sqrt(c))
            Y = rand_rows(rng, 20, 3, 0.05, 0.9 / math.sqrt(c))
            tape = Tape()
            tx, ty = tape.const(X), tape.const(Y)
            assert np.allclose(
                bo.mobius_add_rows(tx, ty, c).value, geometry.mobius_add_rows(X, Y, c), atol=1e-12
            )
            assert np.allclose(
                bo.distance_rows(tx, ty, c).value[:, 0], geometry.distance_rows(X, Y, c), atol=1e-12
            )
            assert np.allclose(
                bo.origin_distance_rows(tx, c).value[:, 0],
                geometry.origin_distance_rows(X, c),
                atol=1e-12,
            )
            assert np.allclose(
                bo.exp_map_origin_rows(tx, c).value, geometry.exp_map_origin_rows(X, c), atol=1e-12
            )
            assert np.allclose(
                bo.exterior_angle_rows(tx, ty).value[:, 0],
                geometry.exterior_angle_rows(X, Y),
                atol=1e-9,
            )
            assert np.allclose(
                bo.aperture_rows(tx, 0.1).value[:, 0], geometry.aperture_rows(X, 0.1), atol=1e-12
            )

    def test_gradients_against_central_differences(self):
        rng = np.random.default_rng(43)
        builders = {
            "distance": lambda t, l: td.mean(bo.distance_rows(l[0], l[1], 1.0)),
            "origin_distance": lambda t, l: td.mean(bo.origin_distance_rows(l[0], 1.0)),
            "exp_origin": lambda t, l: td.mean(td.square(bo.exp_map_origin_rows(l[0], 1.0))),
            "aperture": lambda t, l: td.mean(bo.aperture_rows(l[0], 0.1)),
        }
        for name, f in builders.items():
            for _ in range(5):
                pt = [rand_rows(rng, 4, 3, 0.15, 0.8), rand_rows(rng, 4, 3, 0.15, 0.8)]
                err = finite_diff_check(f, pt[: f.__code__.co_argcount if f.__code__.co_argcount else 2])
                assert err < 1e-4, name

    def test_exterior_angle_gradient_away_from_kinks(self):
        rng = np.random.default_rng(47)
        done = 0
        while done < 5:
            X = rand_rows(rng, 4, 3, 0.2, 0.7)
            Y = rand_rows(rng, 4, 3, 0.2, 0.7)
            tape = Tape()
            cos_vals = None
            theta = bo.exterior_angle_rows(tape.const(X), tape.const(Y)).value
            # Stay away from the acos clamp ends where the kink makes FD meaningless.
            if np.any(theta < 0.05) or np.any(theta > math.pi - 0.05):
                continue

            def f(t, l):
                return td.mean(bo.exterior_angle_rows(l[0], l[1]))

            assert finite_diff_check(f, [X, Y]) < 1e-4
            done += 1

    def test_ball_membership_after_projection(self):
        rng = np.random.default_rng(53)
        v = rng.normal(size=(50, 8)) * 10.0  # norms far beyond the ball
        for c in (0.5, 1.0, 2.0):
            tape = Tape()
            out = bo.exp_map_origin_rows(tape.const(v), c).value
            assert np.all(c * np.sum(out * out, axis=1) < 1.0)
