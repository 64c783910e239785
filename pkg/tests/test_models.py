import numpy as np
import pytest

from mulfree.errors import ConfigError, DimensionError
from mulfree.layers import MulLinear
from mulfree.models import (ModelConfig, build_model, knn_group,
                            layer_kind_sequence)
from mulfree.tensor import make_rng, softmax_cross_entropy, substream

SMALL = dict(embed_widths=(4, 4, 8, 8), encoder_widths=(8, 16),
             head_widths=(8,), num_classes=4, knn_k=3, points_in=32)


def small(variant):
    return build_model(ModelConfig(variant=variant, **SMALL), substream(7, 0))


def unit_cloud(rng, b=2, n=32):
    pts = rng.standard_normal((b, n, 3)).astype(np.float32)
    return pts / np.linalg.norm(pts, axis=2, keepdims=True).max(axis=1, keepdims=True)


class TestKnnGroup:
    def test_k1_is_self(self):
        pts = make_rng(0).standard_normal((2, 6, 3)).astype(np.float32)
        idx = knn_group(pts, 1)
        np.testing.assert_array_equal(idx[:, :, 0], np.arange(6)[None, :].repeat(2, 0))

    def test_collinear_points(self):
        pts = np.array([[[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0]]], np.float32)
        idx = knn_group(pts, 2)
        np.testing.assert_array_equal(idx[0, 1], [1, 0])  # middle point: self, then x=0

    def test_duplicate_points_tie_break_by_index(self):
        pts = np.zeros((1, 5, 3), np.float32)
        pts[0, 3] = [1, 0, 0]
        pts[0, 4] = [2, 0, 0]
        idx = knn_group(pts, 3)
        np.testing.assert_array_equal(idx[0, 0], [0, 1, 2])
        np.testing.assert_array_equal(idx[0, 2], [2, 0, 1])

    def test_k_larger_than_n(self):
        with pytest.raises(DimensionError):
            knn_group(np.zeros((1, 4, 3), np.float32), 5)

    def test_self_always_first(self):
        pts = make_rng(1).standard_normal((3, 20, 3)).astype(np.float32)
        idx = knn_group(pts, 5)
        np.testing.assert_array_equal(idx[:, :, 0], np.arange(20)[None, :].repeat(3, 0))


class TestStructure:
    def test_variant_kind_sequences(self):
        assert layer_kind_sequence("mul") == ["mul"] * 6
        assert layer_kind_sequence("shift") == ["shift"] * 6
        assert layer_kind_sequence("add") == ["adder"] * 6
        assert layer_kind_sequence("sa") == ["shift", "adder", "shift", "adder", "shift", "adder"]
        with pytest.raises(ConfigError):
            layer_kind_sequence("conv")

    def test_models_differ_only_in_linear_kind(self):
        names = {v: [n for n, _ in small(v).linear_layers()] for v in ("mul", "shift", "add", "sa")}
        assert names["mul"] == names["shift"] == names["add"] == names["sa"]

    def test_sa_interleave_in_model(self):
        assert small("sa").kind_sequence() == ["shift", "adder", "shift", "adder", "shift", "adder"]

    def test_parameter_parity_excluding_bias(self):
        counts = {v: small(v).parameter_count(include_bias=False)
                  for v in ("mul", "shift", "add", "sa")}
        assert len(set(counts.values())) == 1

    def test_head_is_always_mul(self):
        for v in ("mul", "shift", "add", "sa"):
            m = small(v)
            assert all(isinstance(lin, MulLinear) for lin, _ in m.head)
            assert isinstance(m.head_out, MulLinear)

    def test_bad_widths(self):
        with pytest.raises(ConfigError):
            build_model(ModelConfig(variant="mul", embed_widths=(4, 4, 8)), substream(0, 0))


class TestForward:
    def test_identical_point_cloud_degeneracy(self):
        m = small("mul")
        cloud = np.tile(np.array([0.3, -0.2, 0.5], np.float32), (1, 32, 1))
        logits = m.forward(cloud, train=False)
        assert np.all(np.isfinite(logits))
        single = m.last_pooled.copy()
        # every point encodes identically, so pooling changes nothing
        logits2 = m.forward(cloud[:, :16, :], train=False)
        np.testing.assert_allclose(m.last_pooled, single, atol=1e-6)
        assert np.all(np.isfinite(logits2))

    def test_permutation_leaves_logits_bit_identical(self):
        rng = make_rng(3)
        pts = unit_cloud(rng)
        perm = rng.permutation(pts.shape[1])
        for v in ("mul", "shift", "add", "sa"):
            m = small(v)
            a = m.forward(pts, train=False)
            b = m.forward(pts[:, perm, :], train=False)
            np.testing.assert_array_equal(a, b)

    def test_batch_independence_in_eval(self):
        rng = make_rng(4)
        pts = unit_cloud(rng, b=2)
        m = small("sa")
        both = m.forward(pts, train=False)
        one = m.forward(pts[:1], train=False)
        two = m.forward(pts[1:], train=False)
        np.testing.assert_array_equal(both, np.concatenate([one, two]))

    def test_finite_logits_all_variants(self):
        rng = make_rng(5)
        pts = unit_cloud(rng, b=3)
        for v in ("mul", "shift", "add", "sa"):
            logits = small(v).forward(pts, train=True)
            assert logits.shape == (3, 4)
            assert np.all(np.isfinite(logits))

    def test_pooled_feature_exposed(self):
        m = small("mul")
        m.forward(unit_cloud(make_rng(6)), train=False)
        assert m.last_pooled.shape == (2, SMALL["encoder_widths"][-1])

    def test_backward_populates_every_parameter(self):
        rng = make_rng(7)
        for v in ("mul", "shift", "add", "sa"):
            m = small(v)
            logits = m.forward(unit_cloud(rng), train=True)
            _, d = softmax_cross_entropy(logits, np.array([0, 1]))
            m.backward(d)
            for p in m.parameters():
                assert p.grad is not None, p.name
                assert np.all(np.isfinite(p.grad)), p.name

    def test_bad_input_shape(self):
        with pytest.raises(DimensionError):
            small("mul").forward(np.zeros((2, 32, 2), np.float32))


class TestFixedShiftInference:
    def test_logits_match_float_within_fixed_point_tolerance(self):
        # bound frozen from measurement: trained desk models deviate < 3e-3
        rng = make_rng(8)
        pts = unit_cloud(rng, b=4)
        m = small("shift")
        a = m.forward(pts, train=False)
        b = m.forward(pts, train=False, fixed_shift=True)
        assert np.abs(a - b).max() < 0.02
        assert (a.argmax(1) == b.argmax(1)).mean() == 1.0

    def test_flag_is_noop_for_adder_variant(self):
        rng = make_rng(9)
        pts = unit_cloud(rng)
        m = small("add")
        np.testing.assert_array_equal(m.forward(pts, train=False),
                                      m.forward(pts, train=False, fixed_shift=True))


class TestState:
    def test_state_names_unique(self):
        names = [n for n, _ in small("sa").state_items()]
        assert len(names) == len(set(names))

    def test_load_state_shape_mismatch(self):
        m = small("sa")
        state = dict(m.state_items())
        bad = {k: v.copy() for k, v in state.items()}
        first = next(iter(bad))
        bad[first] = np.zeros((1, 1), np.float32)
        with pytest.raises(ConfigError):
            m.load_state(bad)

    def test_load_state_missing_tensor(self):
        m = small("sa")
        state = dict(m.state_items())
        state.pop(next(iter(state)))
        with pytest.raises(ConfigError):
            m.load_state(state)

    def test_load_state_roundtrip_preserves_forward(self):
        rng = make_rng(10)
        pts = unit_cloud(rng)
        m = small("sa")
        want = m.forward(pts, train=False)
        m2 = small("sa")
        m2.load_state({k: v.copy() for k, v in m.state_items()})
        np.testing.assert_array_equal(m2.forward(pts, train=False), want)
