import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import case_projection, case_rasterizer, random_splats
from voxsplat.errors import ContractError
from voxsplat.renderer import (Camera, RenderOutput, Splats, project_gaussian, rasterize, rasterize_backward,
                               rasterize_reference)


def _axis_camera(f=40.0, size=33):
    return Camera(f, f, (size - 1) / 2, (size - 1) / 2, size, size, np.eye(3), np.zeros(3))


def test_on_axis_projects_to_principal_point():
    cam = _axis_camera()
    mean, cov, depth = project_gaussian(np.array([[0.0, 0.0, 2.0]]), 0.01 * np.eye(3)[None], cam)
    np.testing.assert_allclose(mean, [cam.cx, cam.cy])
    assert depth == 2.0


def test_isotropic_covariance_on_axis():
    cam = _axis_camera(f=50.0)
    sigma, z = 0.05, 4.0
    _, cov, _ = project_gaussian(np.array([[0.0, 0.0, z]]), sigma ** 2 * np.eye(3)[None], cam)
    np.testing.assert_allclose(cov, ((50 * sigma / z) ** 2 + 0.3) * np.eye(2), rtol=1e-12)


def test_behind_camera_is_culled():
    assert project_gaussian(np.array([[0.0, 0.0, -1.0]]), np.eye(3)[None], _axis_camera()) is None


@pytest.mark.parametrize("seed", range(10))
def test_gradients(seed):
    assert case_projection(seed) <= 1e-4
    assert case_rasterizer(seed) <= 1e-3


def _splats(means, covs, depths, colors, opac):
    n = len(depths)
    return Splats(np.asarray(means, float).reshape(n, 2), np.asarray(covs, float).reshape(n, 2, 2),
                  np.asarray(depths, float), np.asarray(colors, float).reshape(n, 3), np.asarray(opac, float),
                  np.arange(n))


def test_empty_scene_is_background():
    bg = np.array([0.2, 0.4, 0.6])
    out = rasterize(Splats.empty(), 20, 30, bg)
    np.testing.assert_array_equal(out.image, np.broadcast_to(bg, (20, 30, 3)))
    assert not out.alpha.any()
    np.testing.assert_array_equal(rasterize_reference(Splats.empty(), 20, 30, bg), out.image)


def test_single_splat_at_its_mean():
    c, bg, a = np.array([1.0, 0.5, 0.0]), np.array([0.0, 0.0, 1.0]), 0.6
    sp = _splats([[7, 9]], np.eye(2) * 4, [2.0], c, [a])
    out = rasterize(sp, 20, 20, bg)
    np.testing.assert_allclose(out.image[9, 7], c * a + bg * (1 - a), atol=1e-15)


def test_two_splats_front_to_back():
    c1, c2, bg = np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0.1, 0.1, 0.1])
    a1, a2 = 0.5, 0.7
    # supplied back-first to check sorting
    sp = _splats([[5, 5], [5, 5]], [np.eye(2) * 3, np.eye(2) * 3], [3.0, 1.0], [c2, c1], [a2, a1])
    px = rasterize(sp, 12, 12, bg).image[5, 5]
    np.testing.assert_allclose(px, c1 * a1 + c2 * a2 * (1 - a1) + bg * (1 - a1) * (1 - a2), atol=1e-15)


def test_reference_bit_identical_for_single_tile():
    rng = np.random.default_rng(0)
    for _ in range(20):
        sp = random_splats(rng, 1, 16)
        assert np.array_equal(rasterize(sp, 16, 16, (0.3, 0.2, 0.1)).image,
                              rasterize_reference(sp, 16, 16, (0.3, 0.2, 0.1)))


def test_tiled_matches_reference_on_random_scenes():
    rng = np.random.default_rng(11)
    for _ in range(20):
        h, w = int(rng.integers(8, 40)), int(rng.integers(8, 40))
        sp = random_splats(rng, int(rng.integers(1, 65)), max(h, w))
        bg = rng.uniform(0, 1, 3)
        assert np.abs(rasterize(sp, h, w, bg).image - rasterize_reference(sp, h, w, bg)).max() <= 1e-5


def test_singular_covariance_skipped_and_counted():
    sp = _splats([[4, 4], [4, 4]], [np.zeros((2, 2)), np.eye(2)], [1.0, 2.0], np.ones((2, 3)), [0.9, 0.5])
    out = rasterize(sp, 8, 8)
    assert out.skipped_singular == 1
    np.testing.assert_allclose(out.image[4, 4], 0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_permutation_invariance_and_energy_bound(seed):
    rng = np.random.default_rng(seed)
    sp = random_splats(rng, int(rng.integers(1, 30)), 20)
    sp.depths[: len(sp) // 2] = 2.0  # force depth ties
    out = rasterize(sp, 20, 20)
    perm = rng.permutation(len(sp))
    shuffled = Splats(sp.means[perm], sp.covs[perm], sp.depths[perm], sp.colors[perm], sp.opacities[perm],
                      sp.source[perm])
    # ties are broken by position in the list, so a permutation may reorder equal-depth splats;
    # distinct depths give identical images
    sp.depths[:] = rng.permutation(len(sp)) + 1.0
    shuffled.depths[:] = sp.depths[perm]
    np.testing.assert_allclose(rasterize(sp, 20, 20).image, rasterize(shuffled, 20, 20).image, atol=1e-15)
    assert np.all((out.alpha >= 0) & (out.alpha <= 1))
    assert out.image.max() <= 1.0 + 1e-12


def test_zero_upstream_gradient():
    sp = random_splats(np.random.default_rng(1), 10, 16)
    grads = rasterize_backward(rasterize(sp, 16, 16), np.zeros((16, 16, 3)))
    assert all(not np.any(g) for g in grads.values())


def test_fully_occluded_splat_gets_no_gradient():
    # an opaque splat in front (alpha capped at 0.99) stacked four times drives T below 1e-4
    n = 5
    means = np.tile([[4.0, 4.0]], (n, 1))
    covs = np.tile(np.eye(2) * 1e5, (n, 1, 1))  # alpha ~ 0.99 over the whole image
    sp = _splats(means, covs, np.arange(n) + 1.0, np.random.default_rng(0).uniform(0, 1, (n, 3)), np.ones(n))
    out = rasterize(sp, 8, 8)
    grads = rasterize_backward(out, np.ones((8, 8, 3)))
    assert not np.any(grads["colors"][4]) and grads["opacities"][4] == 0.0
    assert np.any(grads["colors"][0])


def test_backward_requires_buffers():
    sp = random_splats(np.random.default_rng(1), 3, 16)
    out = rasterize(sp, 16, 16)
    bare = RenderOutput(out.image, out.alpha, out.final_transmittance, sp, out.background)
    with pytest.raises(ContractError):
        rasterize_backward(bare, np.zeros_like(out.image))
    with pytest.raises(ContractError):
        rasterize_backward(out, np.zeros((3, 3, 3)))


def test_non_finite_splat_rejected():
    sp = random_splats(np.random.default_rng(1), 3, 16)
    sp.means[0, 0] = np.inf
    with pytest.raises(ContractError):
        rasterize(sp, 16, 16)


def test_look_at_points_camera_at_target():
    cam = Camera.look_at([1.0, -2.0, 3.0], [0.0, 0.0, 0.0], 21, 21, fx=30)
    mean, _, depth = project_gaussian(np.zeros((1, 3)), 0.01 * np.eye(3)[None], cam)
    np.testing.assert_allclose(mean, [10.0, 10.0], atol=1e-12)
    assert depth == pytest.approx(np.sqrt(14.0))
    np.testing.assert_allclose(cam.rotation @ cam.rotation.T, np.eye(3), atol=1e-14)
