import numpy as np
import pytest

from sogs import autodiff as ad
from sogs.errors import InputError
from sogs.heads import GaussianPrimitive
from sogs.numerics import finite_difference_gradient
from sogs.renderer import (
    DILATION,
    Camera,
    Splat2D,
    build_covariance_3d,
    project_batch_t,
    project_gaussian,
    quaternion_to_rotation,
    rasterize_t,
    render,
)


def default_camera(width=32, height=24, fx=40.0, fy=40.0):
    return Camera.look_at(eye=[0.0, -5.0, 0.0], target=[0.0, 0.0, 0.0],
                          width=width, height=height, fx=fx, fy=fy)


class TestCovariance3d:
    def test_identity(self):
        cov = build_covariance_3d([1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0])
        np.testing.assert_allclose(cov, np.eye(3), atol=1e-12)

    def test_axis_scaling(self):
        cov = build_covariance_3d([1.0, 0.0, 0.0, 0.0], [2.0, 1.0, 1.0])
        np.testing.assert_allclose(cov, np.diag([4.0, 1.0, 1.0]), atol=1e-12)

    def test_rotation_about_z(self):
        # 90 degrees about z maps the x-elongation onto y
        q = np.array([np.cos(np.pi / 4), 0.0, 0.0, np.sin(np.pi / 4)])
        rot = quaternion_to_rotation(q)
        expected = rot @ np.diag([4.0, 1.0, 1.0]) @ rot.T
        cov = build_covariance_3d(q, [2.0, 1.0, 1.0])
        np.testing.assert_allclose(cov, expected, atol=1e-12)
        np.testing.assert_allclose(cov, np.diag([1.0, 4.0, 1.0]), atol=1e-12)

    def test_zero_quaternion_rejected(self):
        with pytest.raises(InputError):
            build_covariance_3d([0.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0])

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(InputError):
            build_covariance_3d([1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 1.0])


def isotropic_primitive(position, sigma, opacity=0.8, color=(1.0, 0.0, 0.0)):
    return GaussianPrimitive(position=np.asarray(position, dtype=float), opacity=opacity,
                             color=np.array(color), scale=np.full(3, sigma),
                             rotation=np.array([1.0, 0.0, 0.0, 0.0]))


class TestProjection:
    def test_on_axis_isotropic(self):
        cam = default_camera()
        sigma, depth = 0.3, 5.0
        splat = project_gaussian(isotropic_primitive([0.0, 0.0, 0.0], sigma), cam)
        np.testing.assert_allclose(splat.mean2d, [cam.cx, cam.cy], atol=1e-9)
        expected = (cam.fx * sigma / depth) ** 2
        np.testing.assert_allclose(splat.cov2d, expected * np.eye(2) + DILATION * np.eye(2),
                                   atol=1e-9)
        assert abs(splat.depth - depth) < 1e-12

    def test_behind_camera_culled(self):
        cam = default_camera()
        assert project_gaussian(isotropic_primitive([0.0, -10.0, 0.0], 0.3), cam) is None

    def test_far_offscreen_culled(self):
        cam = default_camera()
        assert project_gaussian(isotropic_primitive([50.0, 0.0, 0.0], 0.05), cam) is None

    def test_rigid_invariance(self):
        cam = default_camera()
        prim = isotropic_primitive([0.4, 0.2, -0.3], 0.25)
        shift = np.array([3.0, -7.0, 11.0])
        moved = isotropic_primitive(prim.position + shift, 0.25)
        a = project_gaussian(prim, cam)
        b = project_gaussian(moved, cam.translated(shift))
        np.testing.assert_allclose(a.mean2d, b.mean2d, atol=1e-9)
        np.testing.assert_allclose(a.cov2d, b.cov2d, atol=1e-9)
        assert abs(a.depth - b.depth) < 1e-9

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(31)
        cam = default_camera()
        n = 12
        positions = rng.uniform(-0.8, 0.8, (n, 3))
        quats = rng.standard_normal((n, 4))
        quats /= np.linalg.norm(quats, axis=1, keepdims=True)
        scales = rng.uniform(0.1, 0.4, (n, 3))
        out = project_batch_t(ad.constant(positions), ad.constant(quats),
                              ad.constant(scales), cam)
        assert out is not None
        for row, j in enumerate(out["kept"]):
            prim = GaussianPrimitive(position=positions[j], opacity=0.5,
                                     color=np.zeros(3), scale=scales[j], rotation=quats[j])
            splat = project_gaussian(prim, cam)
            np.testing.assert_allclose(out["mean_x"].value[row], splat.mean2d[0], atol=1e-10)
            np.testing.assert_allclose(out["mean_y"].value[row], splat.mean2d[1], atol=1e-10)
            np.testing.assert_allclose(out["cov_a"].value[row], splat.cov2d[0, 0], atol=1e-10)
            np.testing.assert_allclose(out["cov_b"].value[row], splat.cov2d[0, 1], atol=1e-10)
            np.testing.assert_allclose(out["cov_c"].value[row], splat.cov2d[1, 1], atol=1e-10)
            np.testing.assert_allclose(out["depths"][row], splat.depth, atol=1e-12)

    def test_all_behind_returns_none(self):
        cam = default_camera()
        out = project_batch_t(ad.constant(np.array([[0.0, -20.0, 0.0]])),
                              ad.constant(np.array([[1.0, 0.0, 0.0, 0.0]])),
                              ad.constant(np.array([[0.1, 0.1, 0.1]])), cam)
        assert out is None


def big_splat(depth, opacity, color, center, splat_id=0, cov_scale=1e6):
    # footprint far wider than the image: alpha is flat at exp(~0) everywhere
    return Splat2D(mean2d=np.asarray(center, dtype=float),
                   cov2d=np.eye(2) * cov_scale, depth=depth,
                   opacity=opacity, color=np.array(color, dtype=float), splat_id=splat_id)


class TestRender:
    def test_empty_gives_background(self):
        cam = default_camera(width=8, height=6)
        bg = np.array([0.1, 0.2, 0.3])
        image = render([], cam, bg)
        np.testing.assert_array_equal(image, np.tile(bg, (6, 8, 1)))

    def test_two_splat_hand_case(self):
        # front: alpha 0.5 red; back: alpha 0.5 blue; black background.
        cam = default_camera(width=3, height=3, fx=10.0, fy=10.0)
        center = [1.5, 1.5]  # center pixel (1, 1) has d == 0 exactly
        front = big_splat(1.0, 0.5, [1.0, 0.0, 0.0], center, splat_id=0)
        back = big_splat(2.0, 0.5, [0.0, 0.0, 1.0], center, splat_id=1)
        image = render([front, back], cam, np.zeros(3))
        np.testing.assert_allclose(image[1, 1], [0.5, 0.0, 0.25], atol=1e-12)

    def test_opacity_one_clips(self):
        cam = default_camera(width=3, height=3)
        bg = np.array([0.2, 0.4, 0.6])
        splat = big_splat(1.0, 1.0, [1.0, 1.0, 1.0], [1.5, 1.5])
        image = render([splat], cam, bg)
        expected = 0.999 * np.ones(3) + (1.0 - 0.999) * bg
        np.testing.assert_allclose(image[1, 1], expected, atol=1e-12)

    def test_blend_weights_sum_to_one(self):
        rng = np.random.default_rng(41)
        cam = default_camera(width=16, height=12)
        splats = []
        for i in range(25):
            splats.append(Splat2D(
                mean2d=rng.uniform(0, 16, 2), cov2d=np.eye(2) * rng.uniform(0.5, 9.0),
                depth=rng.uniform(0.5, 8.0), opacity=rng.uniform(0.05, 1.0),
                color=rng.uniform(0, 1, 3), splat_id=i))
        _, stats = render(splats, cam, np.zeros(3), return_stats=True)
        assert np.max(np.abs(stats.weight_sum - 1.0)) <= 1e-12

    def test_transmittance_monotone_under_prefixes(self):
        rng = np.random.default_rng(42)
        cam = default_camera(width=10, height=10)
        splats = sorted((Splat2D(mean2d=rng.uniform(0, 10, 2), cov2d=np.eye(2) * 4.0,
                                 depth=rng.uniform(0.5, 5.0), opacity=rng.uniform(0.1, 0.9),
                                 color=rng.uniform(0, 1, 3), splat_id=i) for i in range(8)),
                        key=lambda s: s.depth)
        prev = np.ones((10, 10))
        for k in range(1, 9):
            _, stats = render(splats[:k], cam, np.zeros(3), return_stats=True)
            assert np.all(stats.transmittance <= prev + 1e-15)
            assert np.all((stats.transmittance >= 0.0) & (stats.transmittance <= 1.0))
            prev = stats.transmittance

    def test_input_permutation_bit_identical(self):
        rng = np.random.default_rng(43)
        cam = default_camera(width=12, height=9)
        splats = [Splat2D(mean2d=rng.uniform(0, 12, 2), cov2d=np.eye(2) * rng.uniform(1, 6),
                          depth=float(rng.choice([1.0, 1.0, 2.0, 3.0])),  # forced depth ties
                          opacity=rng.uniform(0.1, 0.9), color=rng.uniform(0, 1, 3),
                          splat_id=i) for i in range(10)]
        base = render(splats, cam, np.full(3, 0.5))
        for seed in range(3):
            perm = np.random.default_rng(seed).permutation(10)
            image = render([splats[i] for i in perm], cam, np.full(3, 0.5))
            np.testing.assert_array_equal(image, base)

    def test_singular_cov_skipped_with_diagnostic(self):
        cam = default_camera(width=6, height=6)
        bad = Splat2D.__new__(Splat2D)  # bypass validation to hit the runtime guard
        bad.mean2d = np.array([3.0, 3.0])
        bad.cov2d = np.zeros((2, 2))
        bad.depth = 1.0
        bad.opacity = 0.5
        bad.color = np.ones(3)
        bad.splat_id = 0
        _, stats = render([bad], cam, np.zeros(3), return_stats=True)
        assert stats.skipped_singular == 1

    def test_splat_validation(self):
        with pytest.raises(InputError):
            Splat2D(mean2d=np.zeros(2), cov2d=np.eye(2), depth=-1.0,
                    opacity=0.5, color=np.zeros(3))
        with pytest.raises(InputError):
            Splat2D(mean2d=np.zeros(2), cov2d=np.array([[1.0, 2.0], [2.0, 1.0]]),
                    depth=1.0, opacity=0.5, color=np.zeros(3))


class TestRasterizeGradients:
    def setup_scene(self, rng, n=6, width=10, height=8):
        mx = rng.uniform(1, width - 1, n)
        my = rng.uniform(1, height - 1, n)
        cov_a = rng.uniform(1.0, 4.0, n)
        cov_c = rng.uniform(1.0, 4.0, n)
        cov_b = rng.uniform(-0.5, 0.5, n) * np.sqrt(cov_a * cov_c)
        opacity = rng.uniform(0.2, 0.9, n)
        colors = rng.uniform(0.1, 0.9, (n, 3))
        depths = rng.uniform(0.5, 5.0, n)
        ids = np.arange(n)
        bg = np.array([0.3, 0.2, 0.1])
        cof = rng.uniform(-1, 1, (height, width, 3))
        return mx, my, cov_a, cov_b, cov_c, opacity, colors, depths, ids, bg, cof

    def test_forward_matches_render(self):
        rng = np.random.default_rng(50)
        mx, my, ca, cb, cc, op, col, depths, ids, bg, _ = self.setup_scene(rng)
        cam = default_camera(width=10, height=8)
        splats = [Splat2D(mean2d=np.array([mx[i], my[i]]),
                          cov2d=np.array([[ca[i], cb[i]], [cb[i], cc[i]]]),
                          depth=depths[i], opacity=op[i], color=col[i], splat_id=i)
                  for i in range(len(mx))]
        expected = render(splats, cam, bg)
        got = rasterize_t(ad.constant(mx), ad.constant(my), ad.constant(ca),
                          ad.constant(cb), ad.constant(cc), ad.constant(op),
                          ad.constant(col), depths, ids, 10, 8, bg)
        np.testing.assert_array_equal(got.value, expected)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(51)
        mx, my, ca, cb, cc, op, col, depths, ids, bg, cof = self.setup_scene(rng)
        n = len(mx)

        leaves = {name: ad.parameter(arr) for name, arr in
                  [("mx", mx), ("my", my), ("ca", ca), ("cb", cb), ("cc", cc),
                   ("op", op), ("col", col)]}
        out = rasterize_t(leaves["mx"], leaves["my"], leaves["ca"], leaves["cb"],
                          leaves["cc"], leaves["op"], leaves["col"], depths, ids, 10, 8, bg)
        ad.tsum(out * ad.constant(cof)).backward()

        arrays = {"mx": mx, "my": my, "ca": ca, "cb": cb, "cc": cc, "op": op, "col": col}

        for name in arrays:
            def f(flat, _name=name):
                local = {k: v.copy() for k, v in arrays.items()}
                local[_name] = flat.reshape(arrays[_name].shape)
                img = rasterize_t(*(ad.constant(local[k]) for k in
                                    ("mx", "my", "ca", "cb", "cc", "op", "col")),
                                  depths, ids, 10, 8, bg)
                return float(np.sum(img.value * cof))

            numeric = finite_difference_gradient(f, arrays[name].ravel(), h=1e-6)
            analytic = leaves[name].grad.ravel()
            np.testing.assert_allclose(analytic, numeric, atol=5e-5,
                                       err_msg=f"gradient mismatch for {name}")

    def test_zero_upstream_zero_grads(self):
        rng = np.random.default_rng(52)
        mx, my, ca, cb, cc, op, col, depths, ids, bg, _ = self.setup_scene(rng)
        leaf = ad.parameter(op)
        out = rasterize_t(ad.constant(mx), ad.constant(my), ad.constant(ca),
                          ad.constant(cb), ad.constant(cc), leaf,
                          ad.constant(col), depths, ids, 10, 8, bg)
        ad.tsum(out).backward(grad_output=np.zeros(()))
        np.testing.assert_array_equal(leaf.grad, np.zeros_like(op))


class TestCamera:
    def test_position_roundtrip(self):
        cam = default_camera()
        np.testing.assert_allclose(cam.position, [0.0, -5.0, 0.0], atol=1e-12)

    def test_look_at_points_forward(self):
        cam = Camera.look_at(eye=[2.0, 0.0, 0.0], target=[0.0, 0.0, 0.0],
                             width=8, height=8, fx=10.0, fy=10.0)
        cam_space = cam.rotation @ np.zeros(3) + cam.translation
        assert cam_space[2] > 0  # target in front
        np.testing.assert_allclose(cam_space[:2], [0.0, 0.0], atol=1e-12)

    def test_rejects_bad_rotation(self):
        with pytest.raises(InputError):
            Camera(width=4, height=4, fx=1.0, fy=1.0, cx=2.0, cy=2.0,
                   rotation=np.eye(3) * 2.0, translation=np.zeros(3))
