"""Encoder stack tests: forward/backward contracts, flat views, checkpoints."""

import numpy as np
import pytest

from trialign.errors import FormatError
from trialign.nn import (
    DenseLayer,
    EncoderStack,
    Mlp,
    ModelConfig,
    ParamView,
    build_matcher,
    build_stack,
    load_checkpoint,
    save_checkpoint,
)


def linear_probe(mlp, x, weighting):
    """Scalar loss sum(forward(x) * weighting), for finite differencing."""
    out, _ = mlp.forward(x)
    return float(np.sum(out * weighting))


class TestForward:
    def test_zero_depth_is_pure_normalization(self):
        mlp = Mlp([], in_dim=2, normalize_output=True)
        out, _ = mlp.forward([[3.0, 4.0]])
        assert np.allclose(out, [[0.6, 0.8]], rtol=1e-12)

    def test_outputs_are_unit_norm(self):
        rng = np.random.default_rng(0)
        for dims in ([5, 3], [4, 8, 3], [6, 16, 16, 2]):
            mlp = Mlp.build(dims, rng=rng)
            out, _ = mlp.forward(rng.standard_normal((7, dims[0])))
            assert np.max(np.abs(np.linalg.norm(out, axis=1) - 1.0)) < 1e-9

    def test_dimension_mismatch(self):
        mlp = Mlp.build([4, 3], rng=np.random.default_rng(1))
        with pytest.raises(ValueError):
            mlp.forward(np.zeros((2, 5)))

    def test_zero_input_cannot_normalize(self):
        mlp = Mlp([], in_dim=3, normalize_output=True)
        with pytest.raises(ValueError):
            mlp.forward(np.zeros((1, 3)))

    def test_batch_equals_per_element(self):
        # No cross-example coupling. BLAS picks different kernels for GEMM
        # vs single-row products, so equality is to a few ULPs, not bitwise.
        rng = np.random.default_rng(2)
        mlp = Mlp.build([5, 8, 3], rng=rng)
        x = rng.standard_normal((6, 5))
        batch_out, _ = mlp.forward(x)
        for i in range(6):
            single, _ = mlp.forward(x[i:i + 1])
            assert np.max(np.abs(batch_out[i] - single[0])) < 1e-14


class TestBackward:
    def test_radial_upstream_gives_zero_input_grad(self):
        # Gradient parallel to the output lies in the null space of the
        # unit-sphere Jacobian.
        mlp = Mlp([], in_dim=3, normalize_output=True)
        out, tape = mlp.forward([[1.0, 2.0, 2.0]])
        dx, _ = mlp.backward(tape, 5.0 * out)
        assert np.max(np.abs(dx)) < 1e-15

    def test_single_dense_quadratic_closed_form(self):
        # L = 0.5 ||Wx + b - target||^2 gives dW = (pred - target) x^T.
        rng = np.random.default_rng(3)
        mlp = Mlp.build([4, 3], normalize_output=False, rng=rng)
        x = rng.standard_normal((1, 4))
        target = rng.standard_normal((1, 3))
        pred, tape = mlp.forward(x)
        _, grads = mlp.backward(tape, pred - target)
        dw, db = grads[0]
        assert np.max(np.abs(dw - (pred - target).T @ x)) < 1e-10
        assert np.max(np.abs(db - (pred - target)[0])) < 1e-10

    def test_full_stack_fd_on_random_parameter_coordinates(self):
        rng = np.random.default_rng(4)
        mlp = Mlp.build([6, 8, 8, 3], rng=rng)
        x = rng.standard_normal((4, 6))
        weighting = rng.standard_normal((4, 3))
        out, tape = mlp.forward(x)
        _, grads = mlp.backward(tape, weighting)
        analytic = np.concatenate([np.concatenate([dw.ravel(), db]) for dw, db in grads])
        flat = mlp.get_flat()
        coords = rng.choice(flat.size, size=100, replace=False)
        h = 1e-6
        for i in coords:
            xp = flat.copy()
            xp[i] += h
            xm = flat.copy()
            xm[i] -= h
            mlp.set_flat(xp)
            fp = linear_probe(mlp, x, weighting)
            mlp.set_flat(xm)
            fm = linear_probe(mlp, x, weighting)
            mlp.set_flat(flat)
            fd = (fp - fm) / (2 * h)
            assert abs(analytic[i] - fd) <= 1e-5 * max(abs(analytic[i]), abs(fd), 1e-8)

    def test_input_gradient_fd(self):
        rng = np.random.default_rng(5)
        mlp = Mlp.build([5, 7, 2], rng=rng)
        x = rng.standard_normal((3, 5))
        weighting = rng.standard_normal((3, 2))
        _, tape = mlp.forward(x)
        dx, _ = mlp.backward(tape, weighting)
        h = 1e-6
        flat = x.reshape(-1)
        for i in range(flat.size):
            xp = flat.copy()
            xp[i] += h
            xm = flat.copy()
            xm[i] -= h
            fd = (linear_probe(mlp, xp.reshape(x.shape), weighting)
                  - linear_probe(mlp, xm.reshape(x.shape), weighting)) / (2 * h)
            got = dx.reshape(-1)[i]
            assert abs(got - fd) <= 1e-5 * max(abs(got), abs(fd), 1e-8)

    def test_stale_tape_rejected(self):
        rng = np.random.default_rng(6)
        mlp = Mlp.build([3, 2], rng=rng)
        _, tape = mlp.forward(rng.standard_normal((2, 3)))
        mlp.set_flat(mlp.get_flat())  # parameters "changed"
        with pytest.raises(ValueError, match="stale tape"):
            mlp.backward(tape, np.zeros((2, 2)))


class TestDeterminism:
    def test_same_seed_bitwise_identical(self):
        cfg = ModelConfig(init_seed=123)
        a = build_stack(cfg, 5, 6, 7)
        b = build_stack(cfg, 5, 6, 7)
        assert np.array_equal(a.get_flat(), b.get_flat())
        rng = np.random.default_rng(0)
        t_in = rng.standard_normal((3, 5))
        v_in = rng.standard_normal((3, 6))
        a_in = rng.standard_normal((3, 7))
        ta, va, aa, tapes_a = a.embed(t_in, v_in, a_in)
        tb, vb, ab, tapes_b = b.embed(t_in, v_in, a_in)
        assert np.array_equal(ta, tb) and np.array_equal(va, vb) and np.array_equal(aa, ab)
        up = rng.standard_normal(ta.shape)
        _, ga = a.text.backward(tapes_a[0], up)
        _, gb = b.text.backward(tapes_b[0], up)
        for (dwa, dba), (dwb, dbb) in zip(ga, gb):
            assert np.array_equal(dwa, dwb) and np.array_equal(dba, dbb)

    def test_different_seed_differs(self):
        a = build_stack(ModelConfig(init_seed=1), 5, 6, 7)
        b = build_stack(ModelConfig(init_seed=2), 5, 6, 7)
        assert not np.array_equal(a.get_flat(), b.get_flat())


class TestParamView:
    def test_round_trip(self):
        rng = np.random.default_rng(7)
        stack = build_stack(ModelConfig(init_seed=8), 4, 5, 6)
        matcher = build_matcher(ModelConfig(init_seed=8))
        view = ParamView(stack.encoders() + [matcher])
        flat = view.get_flat()
        assert flat.size == view.total
        new = rng.standard_normal(flat.size)
        view.set_flat(new)
        assert np.array_equal(view.get_flat(), new)

    def test_flatten_grads_matches_param_layout(self):
        rng = np.random.default_rng(9)
        mlp = Mlp.build([4, 5, 2], rng=rng)
        view = ParamView([mlp])
        x = rng.standard_normal((3, 4))
        up = rng.standard_normal((3, 2))
        _, tape = mlp.forward(x)
        _, grads = mlp.backward(tape, up)
        flat_grads = view.flatten_grads([grads])
        assert flat_grads.size == mlp.num_params
        # Perturbing the flat params along the grad direction changes the probe.
        expected = np.concatenate([np.concatenate([dw.ravel(), db]) for dw, db in grads])
        assert np.array_equal(flat_grads, expected)

    def test_wrong_size_rejected(self):
        view = ParamView([Mlp.build([3, 2], rng=np.random.default_rng(0))])
        with pytest.raises(ValueError):
            view.set_flat(np.zeros(5))


class TestStack:
    def test_latent_dim_must_match(self):
        rng = np.random.default_rng(10)
        with pytest.raises(ValueError):
            EncoderStack(Mlp.build([4, 3], rng=rng), Mlp.build([4, 2], rng=rng),
                         Mlp.build([4, 3], rng=rng))

    def test_matcher_shape(self):
        cfg = ModelConfig(latent_dim=3, matcher_hidden=(8,), init_seed=0)
        matcher = build_matcher(cfg)
        assert matcher.in_dim == 9 and matcher.out_dim == 1
        assert not matcher.normalize_output

    def test_shuffled_batch_permutes_rows(self):
        rng = np.random.default_rng(11)
        stack = build_stack(ModelConfig(init_seed=12), 4, 5, 6)
        t_in = rng.standard_normal((6, 4))
        v_in = rng.standard_normal((6, 5))
        a_in = rng.standard_normal((6, 6))
        t, v, a, _ = stack.embed(t_in, v_in, a_in)
        perm = rng.permutation(6)
        t2, v2, a2, _ = stack.embed(t_in[perm], v_in[perm], a_in[perm])
        # row order permutes with the batch (up to BLAS kernel rounding)
        assert np.max(np.abs(t2 - t[perm])) < 1e-14
        assert np.max(np.abs(v2 - v[perm])) < 1e-14
        assert np.max(np.abs(a2 - a[perm])) < 1e-14


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        stack = build_stack(ModelConfig(init_seed=21, text_hidden=(4,)), 5, 6, 7)
        path = tmp_path / "stack.ckpt"
        save_checkpoint(stack, path)
        loaded = load_checkpoint(path)
        assert np.array_equal(loaded.get_flat(), stack.get_flat())
        for orig, got in zip(stack.encoders(), loaded.encoders()):
            assert orig.activation == got.activation
            assert [l.weights.shape for l in orig.layers] == [l.weights.shape for l in got.layers]
        # identical bytes when saved again
        path2 = tmp_path / "again.ckpt"
        save_checkpoint(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_zero_layer_encoder_round_trips(self, tmp_path):
        stack = EncoderStack(Mlp([], in_dim=3), Mlp([], in_dim=3), Mlp([], in_dim=3))
        path = tmp_path / "id.ckpt"
        save_checkpoint(stack, path)
        loaded = load_checkpoint(path)
        assert loaded.text.in_dim == 3 and loaded.latent_dim == 3

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        stack = build_stack(ModelConfig(init_seed=0), 4, 4, 4)
        path = tmp_path / "trunc.ckpt"
        save_checkpoint(stack, path)
        data = path.read_bytes()
        path.write_bytes(data[:-7])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "ver.ckpt"
        path.write_bytes(b"TRI1" + (99).to_bytes(4, "little") + b"\x00" * 8)
        with pytest.raises(FormatError, match="version"):
            load_checkpoint(path)


class TestDenseLayer:
    def test_validates_shapes(self):
        with pytest.raises(ValueError):
            DenseLayer(np.zeros((2, 3)), np.zeros(5))

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            DenseLayer(np.full((2, 2), np.nan), np.zeros(2))
