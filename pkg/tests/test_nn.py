import numpy as np
import pytest
from helpers import tiny_training_batch, training_loss_fn

from nlqground.anchors import AnchorConfig, build_lattice
from nlqground.nn import (
    EncoderConfig,
    GroundingModel,
    InvalidStateError,
    gradcheck,
    init_model,
    load_checkpoint,
    parameter_shapes,
    save_checkpoint,
    sinusoidal_positions,
)
from nlqground.nn.checkpoint import CheckpointError
from nlqground.nn.layers import masked_softmax
from nlqground.trainer import TrainConfig

TINY = EncoderConfig(hidden_dim=8, num_heads=2, intra_layers=1, cross_layers=2,
                     video_input_dim=5, text_input_dim=3, num_scales=2, dropout_rate=0.0)


def tiny_inputs(B=2, T=8, L=4, seed=0, dv=5, dt=3):
    rng = np.random.default_rng(seed)
    video = rng.normal(size=(B, T, dv))
    text = rng.normal(size=(B, L, dt))
    vmask = np.ones((B, T), bool)
    tmask = np.ones((B, L), bool)
    return video, vmask, text, tmask


class TestSinusoidalPositions:
    def test_position_zero_alternates(self):
        table = sinusoidal_positions(4, 6)
        np.testing.assert_allclose(table[0], [0, 1, 0, 1, 0, 1])

    def test_first_angle(self):
        table = sinusoidal_positions(3, 8)
        assert table[1, 0] == pytest.approx(np.sin(1.0), abs=1e-12)
        assert table[1, 0] == pytest.approx(0.841471, abs=1e-6)

    def test_range(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            length = int(rng.integers(1, 50))
            dim = int(rng.integers(1, 32)) * 2
            table = sinusoidal_positions(length, dim)
            assert (table >= -1.0).all() and (table <= 1.0).all()

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError):
            sinusoidal_positions(4, 7)


class TestInitModel:
    def test_deterministic_in_seed(self):
        a = init_model(TINY, seed=5)
        b = init_model(TINY, seed=5)
        assert a.params.keys() == b.params.keys()
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])

    def test_different_seeds_differ(self):
        a = init_model(TINY, seed=5)
        b = init_model(TINY, seed=6)
        assert any(not np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_attention_shapes_at_reference_width(self):
        cfg = EncoderConfig(hidden_dim=512, num_heads=4, video_input_dim=16, text_input_dim=16)
        shapes = dict(((n, (r, c)) for n, r, c in parameter_shapes(cfg)))
        for w in ("wq", "wk", "wv", "wo"):
            assert shapes[f"cross.0.attn.{w}"] == (512, 512)

    def test_param_count_deterministic_function_of_config(self):
        n1 = init_model(TINY, seed=1).num_parameters()
        n2 = init_model(TINY, seed=99).num_parameters()
        assert n1 == n2

    def test_heads_must_divide_hidden(self):
        with pytest.raises(ValueError):
            EncoderConfig(hidden_dim=10, num_heads=4)


class TestForward:
    def test_output_shapes(self):
        cfg = EncoderConfig(hidden_dim=32, num_heads=4, intra_layers=1, cross_layers=2,
                            video_input_dim=6, text_input_dim=4, num_scales=2, dropout_rate=0.0)
        model = init_model(cfg, seed=0)
        rng = np.random.default_rng(0)
        out = model.forward(rng.normal(size=(8, 6)), np.ones(8, bool),
                            rng.normal(size=(4, 4)), np.ones(4, bool))
        assert out.confidence.shape == (8, 2)
        assert out.offsets.shape == (8, 4)
        assert out.fused.shape == (8, 32)

    def test_eval_mode_deterministic(self):
        model = init_model(TINY, seed=3)
        video, vmask, text, tmask = tiny_inputs()
        a = model.forward_batch(video, vmask, text, tmask, train=False)
        b = model.forward_batch(video, vmask, text, tmask, train=False)
        for x, y in zip(a[:3], b[:3]):
            np.testing.assert_array_equal(x, y)

    def test_confidence_strictly_inside_unit_interval(self):
        model = init_model(TINY, seed=3)
        video, vmask, text, tmask = tiny_inputs()
        conf, _, _, _ = model.forward_batch(video, vmask, text, tmask)
        assert (conf > 0.0).all() and (conf < 1.0).all()

    def test_padded_text_rows_do_not_affect_outputs(self):
        model = init_model(TINY, seed=3)
        video, vmask, text, tmask = tiny_inputs()
        tmask[:, 2:] = False
        a = model.forward_batch(video, vmask, text, tmask, train=False)
        # swap the two padded rows and also scribble on them
        text2 = text.copy()
        text2[:, [2, 3]] = text2[:, [3, 2]]
        text2[:, 2:] += 123.456
        b = model.forward_batch(video, vmask, text2, tmask, train=False)
        for x, y in zip(a[:3], b[:3]):
            np.testing.assert_array_equal(x, y)

    def test_attention_rows_sum_to_one_over_valid_keys(self):
        rng = np.random.default_rng(0)
        scores = rng.normal(size=(2, 2, 6, 6))
        mask = np.ones((2, 6), bool)
        mask[0, 4:] = False
        probs = masked_softmax(scores, mask)
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)
        assert (probs[0, :, :, 4:] == 0.0).all()

    def test_all_masked_modality_rejected(self):
        model = init_model(TINY, seed=3)
        video, vmask, text, tmask = tiny_inputs()
        tmask[0, :] = False
        with pytest.raises(ValueError):
            model.forward_batch(video, vmask, text, tmask)

    def test_dimension_mismatch_rejected(self):
        model = init_model(TINY, seed=3)
        video, vmask, text, tmask = tiny_inputs(dv=7)
        with pytest.raises(ValueError):
            model.forward_batch(video, vmask, text, tmask)

    def test_train_mode_dropout_changes_outputs(self):
        cfg = EncoderConfig(hidden_dim=8, num_heads=2, intra_layers=1, cross_layers=2,
                            video_input_dim=5, text_input_dim=3, num_scales=2, dropout_rate=0.4)
        model = init_model(cfg, seed=3)
        video, vmask, text, tmask = tiny_inputs()
        a = model.forward_batch(video, vmask, text, tmask, train=True)
        b = model.forward_batch(video, vmask, text, tmask, train=True)
        assert not np.array_equal(a[0], b[0])


class TestBackward:
    def _run(self, scale):
        model = init_model(TINY, seed=4, dtype=np.float64)
        video, vmask, text, tmask = tiny_inputs()
        conf, offs, fused, cache = model.forward_batch(
            video, vmask, text, tmask, train=False, want_cache=True)
        d_conf = np.full_like(conf, 0.1 * scale)
        d_offs = np.full_like(offs, -0.2 * scale)
        grads, d_video, d_text = model.backward(cache, d_conf, d_offs)
        return grads, d_video, d_text

    def test_zero_upstream_gives_zero_grads(self):
        grads, d_video, d_text = self._run(0.0)
        for g in grads.values():
            assert (g == 0.0).all()
        assert (d_video == 0.0).all() and (d_text == 0.0).all()

    def test_linearity_in_upstream(self):
        g1, _, _ = self._run(1.0)
        g2, _, _ = self._run(2.0)
        for k in g1:
            np.testing.assert_allclose(g2[k], 2.0 * g1[k], rtol=1e-9, atol=1e-12)

    def test_stale_cache_rejected(self):
        model = init_model(TINY, seed=4)
        other = init_model(TINY, seed=5)
        video, vmask, text, tmask = tiny_inputs()
        conf, offs, _, cache = model.forward_batch(video, vmask, text, tmask, want_cache=True)
        with pytest.raises(InvalidStateError):
            other.backward(cache, np.zeros_like(conf), np.zeros_like(offs))


class TestGradcheck:
    def test_quadratic_loss_is_near_exact(self):
        model = init_model(TINY, seed=1, dtype=np.float64)

        def quad(m):
            loss = 0.5 * sum(float(np.sum(p * p)) for p in m.params.values())
            return loss, {k: p.copy() for k, p in m.params.items()}

        # central differences are exact for quadratics at any step, so a
        # large step leaves only summation rounding
        report = gradcheck(quad, model, step=1e-2, num_samples=100, seed=0)
        assert report.max_rel_error < 1e-9

    def test_full_training_loss_through_tiny_model(self):
        model = init_model(TINY, seed=42, dtype=np.float64)
        anchor_set = build_lattice(AnchorConfig(scales=(0.25, 0.75), num_frames=8))
        fn = training_loss_fn(tiny_training_batch(), anchor_set, TrainConfig(seed=0))
        report = gradcheck(fn, model, step=1e-5, tolerance=1e-4, num_samples=200, seed=0)
        assert report.num_checked >= 200
        assert report.max_rel_error < 1e-4, report.worst_parameter

    def test_zero_step_rejected(self):
        model = init_model(TINY, seed=1)
        with pytest.raises(ValueError):
            gradcheck(lambda m: (0.0, m.zero_grads()), model, step=0.0)

    def test_nondeterministic_loss_detected(self):
        model = init_model(TINY, seed=1)
        state = {"n": 0}

        def noisy(m):
            state["n"] += 1
            return float(state["n"]), m.zero_grads()

        with pytest.raises(InvalidStateError):
            gradcheck(noisy, model, step=1e-5)


class TestCheckpoint:
    def test_round_trip_is_bitwise(self, tmp_path):
        model = init_model(TINY, seed=8)
        path = tmp_path / "m.nlqc"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.config == model.config
        for k in model.params:
            np.testing.assert_array_equal(loaded.params[k], model.params[k])

    def test_round_trip_preserves_eval_outputs(self, tmp_path):
        model = init_model(TINY, seed=8)
        path = tmp_path / "m.nlqc"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        video, vmask, text, tmask = tiny_inputs()
        a = model.forward_batch(video, vmask, text, tmask)
        b = loaded.forward_batch(video, vmask, text, tmask)
        for x, y in zip(a[:3], b[:3]):
            np.testing.assert_array_equal(x, y)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "m.nlqc"
        path.write_bytes(b"XLQC" + b"\x00" * 64)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated_payload_rejected(self, tmp_path):
        model = init_model(TINY, seed=8)
        path = tmp_path / "m.nlqc"
        save_checkpoint(model, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-40])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
