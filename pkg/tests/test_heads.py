import numpy as np
import pytest

from sogs import autodiff as ad
from sogs.anchors import Anchor, AugmentedFeatures
from sogs.errors import ConfigError, InputError, NumericalError
from sogs.heads import (
    MLPLayer,
    MLPParams,
    ViewContext,
    head_input_dim,
    init_attribute_head,
    init_mlp,
    init_texture_extractor,
    mlp_forward,
    mlp_forward_t,
    mlp_params_t,
    predict_gaussians,
    predict_gaussians_batch,
)
from sogs.numerics import finite_difference_gradient


class TestMlpForward:
    def test_identity_layer(self):
        params = MLPParams(layers=[MLPLayer(np.eye(3), np.zeros(3), "none")])
        x = np.array([1.0, -2.0, 0.5])
        np.testing.assert_array_equal(mlp_forward(params, x), x)

    def test_relu_with_negative_bias(self):
        params = MLPParams(layers=[MLPLayer(np.eye(2), np.full(2, -1.0), "relu")])
        np.testing.assert_array_equal(mlp_forward(params, np.zeros(2)), np.zeros(2))

    def test_matches_hand_coded_oracle(self):
        rng = np.random.default_rng(8)
        params = init_mlp([5, 7, 3], rng)
        x = rng.standard_normal(5)
        w1, b1 = params.layers[0].weight, params.layers[0].bias
        w2, b2 = params.layers[1].weight, params.layers[1].bias
        expected = w2 @ np.maximum(w1 @ x + b1, 0.0) + b2
        np.testing.assert_allclose(mlp_forward(params, x), expected, atol=1e-12)

    def test_batched_input(self):
        rng = np.random.default_rng(9)
        params = init_mlp([4, 6, 2], rng)
        xs = rng.standard_normal((10, 4))
        batched = mlp_forward(params, xs)
        for i in range(10):
            np.testing.assert_allclose(batched[i], mlp_forward(params, xs[i]), atol=1e-12)

    def test_shape_mismatch(self):
        params = init_mlp([4, 2], np.random.default_rng(0))
        with pytest.raises(ConfigError):
            mlp_forward(params, np.zeros(5))

    def test_layers_must_chain(self):
        with pytest.raises(ConfigError):
            MLPParams(layers=[MLPLayer(np.zeros((3, 2)), np.zeros(3), "relu"),
                              MLPLayer(np.zeros((2, 4)), np.zeros(2), "none")])

    def test_tape_path_matches_plain(self):
        rng = np.random.default_rng(10)
        params = init_mlp([6, 8, 8, 3], rng)
        xs = rng.standard_normal((5, 6))
        out_t = mlp_forward_t(mlp_params_t(params), ad.constant(xs))
        np.testing.assert_array_equal(out_t.value, mlp_forward(params, xs))

    def test_gradcheck_through_mlp(self):
        rng = np.random.default_rng(11)
        params = init_mlp([4, 6, 2], rng)
        x0 = rng.standard_normal(4)
        layers_t = mlp_params_t(params)
        loss = ad.tsum(ad.sigmoid(mlp_forward_t(layers_t, ad.constant(x0))))
        loss.backward()

        w0 = params.layers[0].weight

        def f(flat):
            p2 = MLPParams(layers=[
                MLPLayer(flat.reshape(w0.shape), params.layers[0].bias, "relu"),
                params.layers[1],
            ])
            out = mlp_forward(p2, x0)
            return float(np.sum(1.0 / (1.0 + np.exp(-out))))

        numeric = finite_difference_gradient(f, w0.ravel(), h=1e-5)
        np.testing.assert_allclose(layers_t[0][0].grad.ravel(), numeric, atol=1e-6)


class TestViewContext:
    def test_for_anchor(self):
        ctx = ViewContext.for_anchor([3.0, 0.0, 0.0], [0.0, 0.0, 0.0])
        assert ctx.distance == 3.0
        np.testing.assert_allclose(ctx.direction, [1.0, 0.0, 0.0])

    def test_rejects_coincident(self):
        with pytest.raises(InputError):
            ViewContext.for_anchor([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])

    def test_rejects_unnormalised_direction(self):
        with pytest.raises(InputError):
            ViewContext(camera_position=np.zeros(3), distance=1.0,
                        direction=np.array([1.0, 1.0, 0.0]))


def make_anchor(rng, d=8, k=10):
    return Anchor(position=rng.uniform(-1, 1, 3), feature=rng.standard_normal(d),
                  scaling=rng.uniform(0.2, 0.8, 3), offsets=rng.standard_normal((k, 3)) * 0.2)


def make_setup(rng, d=8, m=2, k=10):
    anchor = make_anchor(rng, d, k)
    textures = rng.standard_normal((m, d)) * 0.1
    aug = AugmentedFeatures(textures=textures)
    view = ViewContext.for_anchor(anchor.position, np.array([0.0, -4.0, 0.0]))
    head = init_attribute_head(head_input_dim(d, m), 32, k, rng)
    return anchor, aug, view, head


class TestPredictGaussians:
    def test_count_matches_offsets(self):
        rng = np.random.default_rng(12)
        anchor, aug, view, head = make_setup(rng, k=10)
        assert len(predict_gaussians(anchor, aug, view, head)) == 10

    def test_zero_offsets_collapse_to_anchor(self):
        rng = np.random.default_rng(13)
        anchor, aug, view, head = make_setup(rng, k=4)
        anchor.offsets[:] = 0.0
        for g in predict_gaussians(anchor, aug, view, head):
            np.testing.assert_array_equal(g.position, anchor.position)

    def test_quaternions_unit_norm(self):
        rng = np.random.default_rng(14)
        anchor, aug, view, head = make_setup(rng)
        for g in predict_gaussians(anchor, aug, view, head):
            assert abs(np.linalg.norm(g.rotation) - 1.0) < 1e-9

    def test_squash_ranges(self):
        rng = np.random.default_rng(15)
        for seed in range(5):
            anchor, aug, view, head = make_setup(np.random.default_rng(seed))
            for g in predict_gaussians(anchor, aug, view, head):
                assert 0.0 < g.opacity < 1.0
                assert np.all((g.color > 0.0) & (g.color < 1.0))
                assert np.all(g.scale > 0.0)

    def test_base_configuration_without_textures(self):
        rng = np.random.default_rng(16)
        anchor = make_anchor(rng, d=8, k=3)
        view = ViewContext.for_anchor(anchor.position, np.array([0.0, -4.0, 0.0]))
        head = init_attribute_head(head_input_dim(8, 0), 32, 3, rng)
        assert head.input_dim == 8 + 4
        assert len(predict_gaussians(anchor, None, view, head)) == 3

    def test_translation_equivariance(self):
        rng = np.random.default_rng(17)
        anchor, aug, view, head = make_setup(rng, k=5)
        shift = np.array([10.0, -3.0, 2.0])
        moved = Anchor(position=anchor.position + shift, feature=anchor.feature,
                       scaling=anchor.scaling, offsets=anchor.offsets)
        # distance and direction are unchanged by a joint translation; reuse
        # them so the attribute comparison is exact
        view_moved = ViewContext(camera_position=view.camera_position + shift,
                                 distance=view.distance, direction=view.direction)
        a = predict_gaussians(anchor, aug, view, head)
        b = predict_gaussians(moved, aug, view_moved, head)
        for ga, gb in zip(a, b):
            np.testing.assert_allclose(gb.position, ga.position + shift, atol=1e-9)
            assert gb.opacity == ga.opacity
            np.testing.assert_array_equal(gb.color, ga.color)
            np.testing.assert_array_equal(gb.scale, ga.scale)
            np.testing.assert_array_equal(gb.rotation, ga.rotation)

    def test_input_length_mismatch(self):
        rng = np.random.default_rng(18)
        anchor, aug, view, _ = make_setup(rng, d=8, m=2)
        wrong_head = init_attribute_head(head_input_dim(8, 1), 32, 10, rng)
        with pytest.raises(ConfigError):
            predict_gaussians(anchor, aug, view, wrong_head)

    def test_non_finite_head_output_names_anchor(self):
        rng = np.random.default_rng(19)
        anchor, aug, view, head = make_setup(rng, k=2)
        head.layers[-1].bias[:] = np.inf
        with pytest.raises(NumericalError, match="anchor 3"):
            predict_gaussians(anchor, aug, view, head, anchor_index=3)


class TestBatchPrediction:
    def test_matches_scalar_path(self):
        rng = np.random.default_rng(20)
        d, m, k, n = 6, 2, 4, 5
        features = rng.standard_normal((n, d))
        positions = rng.uniform(-1, 1, (n, 3))
        scalings = rng.uniform(0.3, 0.9, (n, 3))
        offsets = rng.standard_normal((n, k, 3)) * 0.2
        head = init_attribute_head(head_input_dim(d, m), 16, k, rng)
        textures = [rng.standard_normal((n, d)) * 0.1 for _ in range(m)]
        cam_pos = np.array([0.0, -5.0, 1.0])
        deltas = positions - cam_pos
        dists = np.linalg.norm(deltas, axis=1)
        dirs = deltas / dists[:, None]

        batch = predict_gaussians_batch(
            ad.constant(features), [ad.constant(t) for t in textures], positions,
            ad.constant(scalings), ad.constant(offsets), dists, dirs,
            mlp_params_t(head), k)

        for i in range(n):
            anchor = Anchor(position=positions[i], feature=features[i],
                            scaling=scalings[i], offsets=offsets[i])
            aug = AugmentedFeatures(textures=np.stack([t[i] for t in textures]))
            view = ViewContext.for_anchor(positions[i], cam_pos)
            singles = predict_gaussians(anchor, aug, view, head)
            for j, g in enumerate(singles):
                np.testing.assert_allclose(batch.positions.value[i, j], g.position, atol=1e-12)
                np.testing.assert_allclose(batch.opacities.value[i, j], g.opacity, atol=1e-12)
                np.testing.assert_allclose(batch.colors.value[i, j], g.color, atol=1e-12)
                np.testing.assert_allclose(batch.scales.value[i, j], g.scale, atol=1e-12)
                np.testing.assert_allclose(batch.quats.value[i, j], g.rotation, atol=1e-12)


def test_texture_extractor_is_two_layers():
    params = init_texture_extractor(8, 32, np.random.default_rng(0))
    assert len(params.layers) == 2
    assert params.input_dim == 16
    assert params.output_dim == 8
