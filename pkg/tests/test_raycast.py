import copy

import numpy as np
import pytest
from scipy import integrate

from volcap import raycast as rc
from volcap.errors import InvalidArgumentError
from volcap.model import PosedGaussians


def line_density(o, n, posed):
    """Direct 3D density along the ray, for quadrature oracles."""
    def f(s):
        x = o + s * n
        d2 = np.sum((posed.means_world - x) ** 2, axis=1)
        return float(np.sum(posed.densities * np.exp(-d2 / (2 * posed.std_devs**2))))
    return f


def quad_B(o, n, posed):
    a = (posed.means_world - o) @ n
    lo = (a - 12 * posed.std_devs).min()
    hi = (a + 12 * posed.std_devs).max()
    val, _ = integrate.quad(line_density(o, n, posed), lo, hi, points=sorted(a), limit=200,
                            epsabs=1e-13, epsrel=1e-12)
    return np.exp(-val)


def random_scene(rng, q, spread=0.3, depth=3.0):
    means = rng.normal(0, spread, (q, 3)) + [0, 0, depth]
    sig = rng.uniform(0.05, 0.2, q)
    dens = rng.uniform(1.0, 15.0, q)
    return PosedGaussians(means, sig, dens)


def cam(size=(40, 30), f=40.0):
    return rc.CameraModel(np.array([[f, 0, (size[0] - 1) / 2], [0, f, (size[1] - 1) / 2], [0, 0, 1]]),
                          np.eye(3), np.zeros(3), size)


def test_camera_validation():
    K = np.eye(3)
    with pytest.raises(InvalidArgumentError):
        rc.CameraModel(K, np.diag([1, 1, -1.0]), np.zeros(3), (4, 4))
    bad = np.array([[1.0, 0, 0], [0.5, 1, 0], [0, 0, 1]])
    with pytest.raises(InvalidArgumentError):
        rc.CameraModel(bad, np.eye(3), np.zeros(3), (4, 4))


def test_principal_point_ray():
    c = rc.CameraModel(np.eye(3), np.eye(3), np.zeros(3), (1, 1))
    o, n, dn = rc.pixel_ray(c, 0.0, 0.0)
    assert np.allclose(n, [0, 0, 1])
    assert np.allclose(dn @ n, 0)


def test_ray_derivative_fd(rng):
    c = rc.CameraModel.look_at([1, -3, 0.5], [0, 0, 0], [0, 0, 1], 120.0, (64, 48))
    h = 1e-5
    for _ in range(20):
        u, v = rng.uniform(0, 63), rng.uniform(0, 47)
        _, n, dn = rc.pixel_ray(c, u, v)
        assert abs(n @ dn[0]) < 1e-14 and abs(n @ dn[1]) < 1e-14
        fd_u = (rc.pixel_ray(c, u + h, v)[1] - rc.pixel_ray(c, u - h, v)[1]) / (2 * h)
        fd_v = (rc.pixel_ray(c, u, v + h)[1] - rc.pixel_ray(c, u, v - h)[1]) / (2 * h)
        assert np.allclose(fd_u, dn[0], atol=1e-8)
        assert np.allclose(fd_v, dn[1], atol=1e-8)


def test_project_gaussian_closest_point(rng):
    o = np.zeros(3)
    n = np.array([0.0, 0.0, 1.0])
    mu = np.array([0.3, -0.1, 2.0])
    g = rc.project_gaussian(o, n, mu, 0.2, 3.0)
    closest = o + g.s_peak * n
    direct = 3.0 * np.exp(-np.sum((closest - mu) ** 2) / (2 * 0.2**2))
    assert g.s_peak == pytest.approx(2.0)
    assert g.c_bar == pytest.approx(direct, rel=1e-14)
    through = rc.project_gaussian(o, n, [0, 0, 2.0], 0.2, 3.0)
    assert through.c_bar == 3.0


def test_behind_camera_uses_same_formula():
    g = rc.project_gaussian(np.zeros(3), np.array([0, 0, 1.0]), [0.1, 0, -2.0], 0.2, 3.0)
    assert g.s_peak < 0
    assert g.c_bar == pytest.approx(3.0 * np.exp(-0.01 / 0.08))


def test_empty_scene_is_fully_visible():
    empty = PosedGaussians(np.zeros((0, 3)), np.zeros(0), np.zeros(0))
    assert rc.background_visibility(np.zeros(3), np.array([0, 0, 1.0]), empty) == 1.0
    zero = PosedGaussians(np.array([[0, 0, 3.0]]), np.array([0.1]), np.array([0.0]))
    assert rc.background_visibility(np.zeros(3), np.array([0, 0, 1.0]), zero) == 1.0


def test_single_gaussian_value():
    posed = PosedGaussians(np.array([[0, 0, 5.0]]), np.array([1.0]), np.array([1.0]))
    o, n = np.zeros(3), np.array([0, 0, 1.0])
    B = rc.background_visibility(o, n, posed)
    assert B == pytest.approx(np.exp(-np.sqrt(2 * np.pi)), rel=1e-15)
    assert B == pytest.approx(0.0815, abs=1e-4)
    assert B == pytest.approx(quad_B(o, n, posed), rel=1e-6)


def test_disjoint_gaussians_multiply():
    o, n = np.zeros(3), np.array([0, 0, 1.0])
    a = PosedGaussians(np.array([[0.05, 0, 3.0]]), np.array([0.1]), np.array([4.0]))
    b = PosedGaussians(np.array([[0, 0.02, 6.0]]), np.array([0.2]), np.array([2.0]))
    both = PosedGaussians(np.vstack([a.means_world, b.means_world]), np.r_[0.1, 0.2], np.r_[4.0, 2.0])
    assert rc.background_visibility(o, n, both) == pytest.approx(
        rc.background_visibility(o, n, a) * rc.background_visibility(o, n, b), rel=1e-14)


def test_quadrature_oracle_random(rng):
    for _ in range(100):
        posed = random_scene(rng, rng.integers(1, 6))
        n = rng.normal(0, 0.1, 3) + [0, 0, 1]
        n /= np.linalg.norm(n)
        B = rc.background_visibility(np.zeros(3), n, posed)
        assert 0 < B <= 1
        assert B == pytest.approx(quad_B(np.zeros(3), n, posed), rel=1e-6)


def test_gradient_zero_through_centre():
    c = cam()
    # a lone Gaussian on the optical axis of the principal pixel
    posed = PosedGaussians(np.array([[0, 0, 3.0]]), np.array([0.2]), np.array([5.0]))
    g = rc.background_visibility_gradient(c, c.K[0, 2], c.K[1, 2], posed)
    assert np.allclose(g, 0.0, atol=1e-15)


def test_gradient_points_outwards():
    c = cam()
    posed = PosedGaussians(np.array([[0, 0, 3.0]]), np.array([0.2]), np.array([5.0]))
    g = rc.background_visibility_gradient(c, c.K[0, 2] + 3, c.K[1, 2], posed)
    assert g[0] > 0 and abs(g[1]) < 1e-12


def test_gradient_fd_all_pixels(rng):
    c = cam()
    posed = random_scene(rng, 6)
    vis = rc.render(c, posed)
    u, v = c.pixel_grid()
    h = 1e-4
    fd_u = (rc.render(c, posed, u + h, v).background - rc.render(c, posed, u - h, v).background) / (2 * h)
    fd_v = (rc.render(c, posed, u, v + h).background - rc.render(c, posed, u, v - h).background) / (2 * h)
    g = vis.grad.reshape(-1, 2)
    scale = np.abs(g).max()
    assert np.abs(fd_u - g[:, 0]).max() <= 1e-4 * scale
    assert np.abs(fd_v - g[:, 1]).max() <= 1e-4 * scale


def test_scene_scaling_with_camera_is_invariant(rng):
    c = cam()
    posed = random_scene(rng, 5)
    g1 = rc.render(c, posed).grad
    # scaling world and scene together leaves images unchanged when densities
    # are scaled inversely (absorbance sigma*c preserved)
    k = 2.5
    scaled = PosedGaussians(posed.means_world * k, posed.std_devs * k, posed.densities / k)
    g2 = rc.render(c, scaled).grad
    # only the c < 1e-8 cull boundary differs
    assert np.allclose(g1, g2, atol=1e-7)


def test_render_matches_single_ray(rng):
    c = cam()
    posed = random_scene(rng, 5)
    vis = rc.render(c, posed)
    for (u, v) in [(3, 4), (20, 15), (33, 2)]:
        o, n, _ = rc.pixel_ray(c, u, v)
        assert vis.background[v, u] == pytest.approx(rc.background_visibility(o, n, posed), rel=1e-12)


def _energy(c, posed, wg, wb):
    vis = rc.render(c, posed)
    return float(np.sum(vis.grad.reshape(-1, 2) * wg) + np.sum(vis.background.ravel() * wb))


def test_backward_fd(rng):
    c = cam()
    posed = random_scene(rng, 5)
    npix = c.width * c.height
    wg = rng.normal(size=(npix, 2))
    wb = rng.normal(size=npix)
    _, cache = rc.render(c, posed, return_cache=True)
    dm, ds, dc = rc.backward(cache, wg, wb)
    h = 1e-6
    for q in range(5):
        for attr, idx, an in [("means_world", (q, 0), dm[q, 0]), ("means_world", (q, 2), dm[q, 2]),
                              ("std_devs", q, ds[q]), ("densities", q, dc[q])]:
            p1, p2 = copy.deepcopy(posed), copy.deepcopy(posed)
            getattr(p1, attr)[idx] += h
            getattr(p2, attr)[idx] -= h
            fd = (_energy(c, p1, wg, wb) - _energy(c, p2, wg, wb)) / (2 * h)
            assert an == pytest.approx(fd, rel=1e-4, abs=1e-6)


def test_pixel_jacobians_agree_with_backward(rng):
    c = cam((12, 10), 12.0)
    posed = random_scene(rng, 3)
    _, cache = rc.render(c, posed, return_cache=True)
    dB, dgrad = rc.pixel_jacobians(cache)
    wg = rng.normal(size=(120, 2))
    wb = rng.normal(size=120)
    dm, ds, dc = rc.backward(cache, wg, wb)
    total = np.einsum("pq f,p->qf".replace(" ", ""), dB, wb) + np.einsum("pkqf,pk->qf", dgrad, wg)
    assert np.allclose(total[:, :3], dm, atol=1e-10)
    assert np.allclose(total[:, 3], ds, atol=1e-10)
    assert np.allclose(total[:, 4], dc, atol=1e-10)


def test_translation_along_ray_leaves_B():
    c = cam()
    posed = PosedGaussians(np.array([[0.1, 0.05, 4.0]]), np.array([0.15]), np.array([6.0]))
    o, n, _ = rc.pixel_ray(c, 25.0, 18.0)
    b0 = rc.background_visibility(o, n, posed)
    moved = PosedGaussians(posed.means_world + 0.5 * n, posed.std_devs, posed.densities)
    assert rc.background_visibility(o, n, moved) == pytest.approx(b0, rel=1e-12)


# ---------------------------------------------------------------- per-Gaussian visibility


def dense_V(o, n, posed, q, lo, hi, m=200001):
    """Brute-force nested integral on a fine grid."""
    s = np.linspace(lo, hi, m)
    x = o + s[:, None] * n
    d2 = np.sum((x[:, None, :] - posed.means_world[None]) ** 2, axis=2)
    dens = posed.densities * np.exp(-d2 / (2 * posed.std_devs**2))
    total = dens.sum(axis=1)
    absorbed = integrate.cumulative_trapezoid(total, s, initial=0.0)
    return integrate.trapezoid(dens[:, q] * np.exp(-absorbed), s)


def test_single_gaussian_conservation():
    posed = PosedGaussians(np.array([[0.05, 0, 3.0]]), np.array([0.2]), np.array([6.0]))
    o, n = np.zeros(3), np.array([0, 0, 1.0])
    V = rc.gaussian_visibility(o, n, posed, 0)
    assert V == pytest.approx(1 - rc.background_visibility(o, n, posed), abs=1e-3)


def test_symmetric_pair_equal_visibility():
    posed = PosedGaussians(np.array([[0.05, 0, 3.0], [-0.05, 0, 3.0]]), np.r_[0.2, 0.2], np.r_[4.0, 4.0])
    V = rc.gaussian_visibility(np.zeros(3), np.array([0, 0, 1.0]), posed)
    assert V[0] == pytest.approx(V[1], rel=1e-12)


def test_occluder_and_dense_oracle():
    posed = PosedGaussians(np.array([[0, 0, 2.0], [0.02, 0, 3.0]]), np.r_[0.15, 0.2], np.r_[5.0, 5.0])
    o, n = np.zeros(3), np.array([0, 0, 1.0])
    V = rc.gaussian_visibility(o, n, posed)
    assert V[0] > V[1]
    for q in range(2):
        assert V[q] == pytest.approx(dense_V(o, n, posed, q, 0.0, 5.0), abs=1e-3)


def test_visibility_gradients_fd(rng):
    R, M = 4, 5
    a = rng.uniform(2, 4, (R, M))
    cb = rng.uniform(0, 8, (R, M))
    sg = rng.uniform(0.05, 0.2, (R, M))
    tgt = rng.integers(0, M, R)
    V, da, dc = rc.visibility_rows(a, cb, sg, tgt, want_grad=True)
    h = 1e-6
    for i in range(M):
        e = np.zeros((R, M))
        e[:, i] = h
        fa = (rc.visibility_rows(a + e, cb, sg, tgt) - rc.visibility_rows(a - e, cb, sg, tgt)) / (2 * h)
        fc = (rc.visibility_rows(a, cb + e, sg, tgt) - rc.visibility_rows(a, cb - e, sg, tgt)) / (2 * h)
        assert np.allclose(fa, da[:, i], atol=1e-7)
        assert np.allclose(fc, dc[:, i], atol=1e-7)


def test_image_visibility_sums(rng):
    c = cam()
    posed = random_scene(rng, 6)
    V = rc.render_gaussian_visibility(c, posed)
    B = rc.render(c, posed).background.ravel()
    assert np.all(V >= 0)
    assert np.abs(1 - B - V.sum(axis=1)).max() <= 1e-3


def test_op_count_linear():
    counter = rc.OpCounter()
    rng = np.random.default_rng(3)
    counts = []
    for q in (10, 100, 1000):
        posed = random_scene(rng, q)
        counter.count = 0
        rc.background_visibility(np.zeros(3), np.array([0, 0, 1.0]), posed, counter)
        counts.append(counter.count)
    assert counts == [10, 100, 1000]
