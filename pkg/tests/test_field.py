import numpy as np
import pytest

from conftest import kink_free_rows, to_float64
from graspfield import autodiff as ad
from graspfield.autodiff import Tensor
from graspfield.camera import bilinear_sample, project
from graspfield.field import (CameraObservation, FieldConfig, bundle_points, encode_image,
                              encode_observation, field_query, grasp_head, grasp_theta,
                              init_params, positional_encode, render_view, render_weights,
                              volumetric_render)
from graspfield.scene import Workspace, default_cameras, make_object_set, observe, spawn_scene

DOWN = np.array([0.0, 0.0, -1.0])


@pytest.fixture(scope="module")
def scene_obs(small_config):
    cams = default_cameras(width=small_config.image_width, height=small_config.image_height)
    scene = spawn_scene(make_object_set("single"), 1, np.random.default_rng(0))
    return [CameraObservation(img, c) for img, c in zip(observe(scene, cams), cams)]


@pytest.fixture(scope="module")
def encoded64(small_params, scene_obs):
    p64 = to_float64(small_params)
    with ad.precision(np.float64):
        return p64, [encode_observation(o, p64) for o in scene_obs]


def random_points(rng, n):
    lo, hi = Workspace().box()
    return rng.uniform(lo, hi, size=(n, 3))


class TestPositionalEncoding:
    def test_zero(self):
        np.testing.assert_allclose(positional_encode(np.array([0.0]), 2).data, [0, 1, 0, 1])

    def test_half(self):
        np.testing.assert_allclose(positional_encode(np.array([0.5]), 2).data, [1, 0, 0, -1],
                                   atol=1e-6)

    def test_length(self):
        assert positional_encode(np.zeros(3), 6).shape == (36,)
        assert positional_encode(np.zeros((5, 3)), 6).shape == (5, 36)

    def test_range(self, rng):
        out = positional_encode(rng.normal(scale=10, size=(100, 3)), 6).data
        assert out.min() >= -1 and out.max() <= 1

    def test_component_major_layout(self):
        out = positional_encode(np.array([0.25, 0.0]), 2).data
        np.testing.assert_allclose(out[:4], [np.sin(np.pi / 4), np.cos(np.pi / 4), 1.0, 0.0],
                                   atol=1e-6)
        np.testing.assert_allclose(out[4:], [0, 1, 0, 1])


class TestEncoder:
    def test_output_resolution(self, small_params, scene_obs):
        fm = encode_image(scene_obs[0].image, small_params)
        assert fm.shape == (24, 24, small_params.config.feature_dim)

    def test_deterministic_on_zero_image(self, small_params):
        z = np.zeros((24, 24, 3), dtype=np.float32)
        assert np.array_equal(encode_image(z, small_params).data, encode_image(z, small_params).data)

    def test_dimension_mismatch(self, small_params):
        with pytest.raises(ValueError):
            encode_image(np.zeros((24, 24, 4), dtype=np.float32), small_params)

    def test_observation_size_checked(self, scene_obs):
        with pytest.raises(ValueError):
            CameraObservation(np.zeros((10, 10, 3)), scene_obs[0].camera)


def manual_field(x, d, enc, p):
    """Numpy re-composition of the core, used as a wiring oracle."""
    cfg = p.config

    def pe(v, m):
        f = (2.0 ** np.arange(m)) * np.pi
        a = v[..., :, None] * f
        return np.stack([np.sin(a), np.cos(a)], -1).reshape(v.shape[:-1] + (-1,))

    def w(name):
        return p[name].data

    uv = project(x, enc.camera.K, enc.camera.RT)
    with ad.precision(np.float64):
        feat = bilinear_sample(enc.features.data, uv).data
    h = np.concatenate([pe(x, cfg.m_position), np.tile(pe(d, cfg.m_direction), (len(x), 1)), feat], 1)
    h = h @ w("phi.in.w") + w("phi.in.b")
    skips = []
    for i in range(cfg.phi_blocks):
        r = np.maximum(np.maximum(h, 0) @ w(f"phi.block{i}.w1") + w(f"phi.block{i}.b1"), 0)
        h = h + r @ w(f"phi.block{i}.w2") + w(f"phi.block{i}.b2")
        skips.append(h)
    trunk = np.maximum(h, 0)
    out = trunk @ w("phi.out.w") + w("phi.out.b")
    z = np.concatenate([trunk] + skips, 1) @ w("psi.in.w") + w("psi.in.b")
    for i in range(cfg.psi_blocks):
        r = np.maximum(np.maximum(z, 0) @ w(f"psi.block{i}.w1") + w(f"psi.block{i}.b1"), 0)
        z = z + r @ w(f"psi.block{i}.w2") + w(f"psi.block{i}.b2")
    score = (np.maximum(z, 0) @ w("psi.out.w") + w("psi.out.b"))[:, 0]
    return 1 / (1 + np.exp(-out[:, :3])), np.logaddexp(0, out[:, 3]) * cfg.density_scale, score


class TestFieldQuery:
    def test_activation_ranges(self, small_params, scene_obs, rng):
        enc = encode_observation(scene_obs[0], small_params)
        fo = field_query(random_points(rng, 1000), DOWN, enc, small_params)
        assert (fo.density.data >= 0).all()
        assert (fo.color.data >= 0).all() and (fo.color.data <= 1).all()
        assert len(fo.skips) == small_params.config.phi_blocks

    def test_matches_manual_composition(self, encoded64, rng):
        p64, encs = encoded64
        x = random_points(rng, 50)
        with ad.precision(np.float64):
            fo = field_query(x, DOWN, encs[1], p64)
            score = grasp_head(fo, p64)
        color, density, s = manual_field(x, DOWN, encs[1], p64)
        np.testing.assert_allclose(fo.color.data, color, rtol=1e-10)
        np.testing.assert_allclose(fo.density.data, density, rtol=1e-10)
        np.testing.assert_allclose(score.data, s, rtol=1e-9, atol=1e-12)

    def test_density_gradient(self, encoded64, rng):
        p64, encs = encoded64
        with ad.precision(np.float64):
            f = lambda t: field_query(t, DOWN, encs[0], p64).density.sum()
            x = random_points(rng, 40)
            x = x[kink_free_rows(f, x, 1e-6)][:20]
            err = ad.finite_diff_check(f, Tensor(x), h=1e-6)
        assert err <= 1e-3

    def test_behind_camera_is_clamped(self, small_params, scene_obs):
        enc = encode_observation(scene_obs[0], small_params)
        behind = scene_obs[0].camera.RT.center - scene_obs[0].camera.RT.rotation[2]
        fo = field_query(behind[None], DOWN, enc, small_params)
        assert np.isfinite(fo.density.data).all()


class TestGraspTheta:
    def test_bundle_offsets(self):
        pts = bundle_points(np.array([[0, 0, 0.1]]), DOWN, FieldConfig().bundle_offsets).data
        np.testing.assert_allclose(np.sort(pts[:, 2])[::-1], [0.10375, 0.10125, 0.09875, 0.09625],
                                   atol=1e-7)

    def test_constant_head_gives_four_k(self, small_params, scene_obs, rng):
        enc = encode_observation(scene_obs[0], small_params)

        def stub(fo, params):
            return Tensor(np.full(fo.density.shape[0], 1.5))

        theta = grasp_theta(random_points(rng, 7), DOWN, enc, small_params, head=stub)
        np.testing.assert_allclose(theta.data, 6.0)

    def test_sum_over_bundle(self, encoded64, rng):
        p64, encs = encoded64
        x = random_points(rng, 5)
        with ad.precision(np.float64):
            theta = grasp_theta(x, DOWN, encs[2], p64).data
            pts = bundle_points(x, DOWN, p64.config.bundle_offsets).data
        _, _, s = manual_field(pts, DOWN, encs[2], p64)
        np.testing.assert_allclose(theta, s.reshape(5, 4).sum(1), rtol=1e-9)

    def test_single_candidate_scalar(self, small_params, scene_obs):
        enc = encode_observation(scene_obs[0], small_params)
        assert grasp_theta(np.array([0, 0, 0.05]), DOWN, enc, small_params).shape == ()

    def test_rejects_non_unit_direction(self, small_params, scene_obs):
        enc = encode_observation(scene_obs[0], small_params)
        with pytest.raises(ValueError):
            grasp_theta(np.zeros((1, 3)), np.array([0, 0, -2.0]), enc, small_params)

    def test_gradient_at_candidates(self, encoded64, rng):
        p64, encs = encoded64
        with ad.precision(np.float64):
            f = lambda t: grasp_theta(t, DOWN, encs[0], p64).sum()
            x = random_points(rng, 150)
            x = x[kink_free_rows(f, x, 1e-6)][:100]
            assert len(x) == 100
            err = ad.finite_diff_check(f, Tensor(x), h=1e-6)
        assert err <= 1e-3


class TestVolumetricRender:
    def test_transparent(self):
        rgb, op = volumetric_render(np.full((2, 8), 0.1), np.zeros((2, 8)), np.ones((2, 8, 3)),
                                    (0.2, 0.3, 0.4))
        np.testing.assert_allclose(rgb.data, [[0.2, 0.3, 0.4]] * 2, atol=1e-7)
        np.testing.assert_array_equal(op.data, 0)

    def test_opaque_first_sample(self):
        color = np.zeros((1, 4, 3))
        color[0, 0] = (1, 0, 0)
        density = np.array([[1e6, 1.0, 1.0, 1.0]])
        rgb, op = volumetric_render(np.full((1, 4), 0.01), density, color, (0.5, 0.5, 0.5))
        np.testing.assert_allclose(rgb.data[0], [1, 0, 0], atol=1e-6)
        assert op.data[0] == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("sigma,length", [(1.0, 0.5), (20.0, 0.1), (3.0, 1.0)])
    def test_constant_slab_closed_form(self, sigma, length):
        with ad.precision(np.float64):
            n = 256
            _, op = volumetric_render(np.full((1, n), length / n), np.full((1, n), sigma),
                                      np.zeros((1, n, 3)), (0, 0, 0))
        assert op.data[0] == pytest.approx(1 - np.exp(-sigma * length), abs=1e-4)

    def test_weights_properties(self, rng):
        deltas = rng.uniform(0.001, 0.05, size=(1000, 32))
        density = rng.exponential(20.0, size=(1000, 32))
        trans, w = render_weights(deltas, density)
        assert (np.diff(trans, axis=1) <= 0).all()
        assert (w >= 0).all() and (w <= 1).all()
        s = w.sum(1)
        assert (s >= 0).all() and (s <= 1 + 1e-12).all()

    def test_gradients(self, rng):
        deltas = rng.uniform(0.01, 0.05, size=(4, 8))
        color = rng.uniform(size=(4, 8, 3))
        w = rng.normal(size=(4, 3))
        err_d = ad.finite_diff_check(
            lambda t: (volumetric_render(deltas, t, color, (0.1, 0.2, 0.3))[0] * Tensor(w)).sum(),
            Tensor(rng.uniform(0, 30, size=(4, 8))), h=1e-5)
        err_c = ad.finite_diff_check(
            lambda t: (volumetric_render(deltas, np.full((4, 8), 10.0), t, (0, 0, 0))[0] * Tensor(w)).sum(),
            Tensor(color), h=1e-5)
        assert err_d <= 1e-3 and err_c <= 1e-3


class TestRenderView:
    def test_untrained_is_finite(self, small_params, scene_obs):
        box = Workspace().box(0.0, inflate=0.1)
        img = render_view(scene_obs[0], scene_obs[1].camera, small_params, box, n_samples=8)
        assert img.shape == (24, 24, 3) and np.isfinite(img).all()

    def test_init_is_seeded(self, small_config):
        a, b = init_params(small_config, 3), init_params(small_config, 3)
        assert all(np.array_equal(a[k].data, b[k].data) for k in a.tensors)
