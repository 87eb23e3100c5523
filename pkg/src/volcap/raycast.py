"""Closed-form ray casting through a sum of isotropic Gaussians.

Along a ray ``o + s n`` every 3D Gaussian is a 1D Gaussian with the same
standard deviation, so the background visibility has the closed form
``B = exp(-sqrt(2 pi) sum_q sigma_q cbar_q)``. Its derivative with respect
to pixel position and the derivatives of any function of ``(B, grad B)``
with respect to the Gaussian parameters are likewise closed form.

Per-Gaussian visibility needs the nested absorption integral; the inner
integral is closed form (error functions) and the outer one is evaluated
with Gauss-Hermite nodes centred on the target Gaussian.

Pixel coordinates are integer at pixel centres: column ``u``, row ``v``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import erf

from .errors import InvalidArgumentError

SQRT_2PI = np.sqrt(2.0 * np.pi)
CULL = 1e-8
# Gauss-Hermite nodes for V; 64 keep |1 - B - sum V| near 1e-4 even for optical depth 15
N_NODES = 64


class OpCounter:
    """Counts per-Gaussian terms evaluated; used to check linear cost."""

    def __init__(self):
        self.count = 0

    def add(self, n):
        self.count += int(n)


class CameraModel:
    def __init__(self, K, R, center, image_size, name="cam"):
        K = np.asarray(K, dtype=float)
        R = np.asarray(R, dtype=float)
        center = np.asarray(center, dtype=float)
        if K.shape != (3, 3) or R.shape != (3, 3) or center.shape != (3,):
            raise InvalidArgumentError("camera needs 3x3 K, 3x3 R and a 3-vector center")
        if abs(K[1, 0]) + abs(K[2, 0]) + abs(K[2, 1]) > 1e-12 or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise InvalidArgumentError("K must be upper triangular with positive focal lengths")
        if abs(K[2, 2] - 1.0) > 1e-12:
            raise InvalidArgumentError("K[2, 2] must be 1")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
            raise InvalidArgumentError("R must be a proper rotation")
        self.K = K
        self.R = R
        self.center = center
        self.width, self.height = int(image_size[0]), int(image_size[1])
        self.name = name
        self.K_inv = np.linalg.inv(K)

    @property
    def image_size(self):
        return (self.width, self.height)

    @classmethod
    def look_at(cls, eye, target, up, focal, image_size, name="cam"):
        eye = np.asarray(eye, float)
        fwd = np.asarray(target, float) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        w, h = image_size
        K = np.array([[focal, 0, (w - 1) / 2.0], [0, focal, (h - 1) / 2.0], [0, 0, 1]])
        return cls(K, R, eye, image_size, name)

    def scaled(self, factor):
        """Same camera sampled on a grid ``factor`` times as dense."""
        S = np.diag([factor, factor, 1.0])
        K = S @ self.K
        K[0, 2] = factor * (self.K[0, 2] + 0.5) - 0.5
        K[1, 2] = factor * (self.K[1, 2] + 0.5) - 0.5
        size = (max(1, int(round(self.width * factor))), max(1, int(round(self.height * factor))))
        return CameraModel(K, self.R, self.center, size, self.name)

    def project(self, points):
        """Pixel coordinates (N, 2) and depths (N,) of world points."""
        X = (np.asarray(points, float) - self.center) @ self.R.T
        uvw = X @ self.K.T
        return uvw[:, :2] / uvw[:, 2:3], X[:, 2]

    def rays(self, u, v):
        """Unit directions n and their pixel derivatives for pixel arrays."""
        u = np.asarray(u, dtype=float).ravel()
        v = np.asarray(v, dtype=float).ravel()
        d = np.stack([u, v, np.ones_like(u)], axis=1) @ self.K_inv.T
        r = np.linalg.norm(d, axis=1, keepdims=True)
        n_cam = d / r
        out = []
        for col in (self.K_inv[:, 0], self.K_inv[:, 1]):
            proj = col[None, :] - (n_cam @ col)[:, None] * n_cam
            out.append((proj / r) @ self.R)
        return n_cam @ self.R, out[0], out[1]

    def pixel_grid(self):
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        return u.ravel().astype(float), v.ravel().astype(float)


def pixel_ray(camera: CameraModel, u, v):
    """Origin, unit direction and the 2x3 derivative d n / d(u, v)."""
    n, nu, nv = camera.rays([u], [v])
    return camera.center.copy(), n[0], np.stack([nu[0], nv[0]])


@dataclass
class RayGaussian1D:
    sigma_bar: float
    c_bar: float
    s_peak: float


def project_gaussian(o, n, mean, sigma, density) -> RayGaussian1D:
    x = np.asarray(mean, float) - np.asarray(o, float)
    a = float(x @ n)
    d2 = max(float(x @ x) - a * a, 0.0)
    return RayGaussian1D(float(sigma), float(density) * np.exp(-d2 / (2 * sigma**2)), a)


def _ray_params(o, n, means, sigmas, densities):
    x = means - o
    a = x @ n
    d2 = np.maximum(np.einsum("qi,qi->q", x, x) - a * a, 0.0)
    e = np.exp(-d2 / (2 * sigmas**2))
    return a, densities * e


def background_visibility(o, n, posed, counter: Optional[OpCounter] = None):
    """B for one ray: fraction of light not absorbed by the Gaussians."""
    if counter is not None:
        counter.add(len(posed.std_devs))
    if len(posed.std_devs) == 0:
        return 1.0
    _, cbar = _ray_params(np.asarray(o, float), np.asarray(n, float), posed.means_world,
                          posed.std_devs, posed.densities)
    keep = cbar >= CULL
    return float(np.exp(-SQRT_2PI * np.sum(posed.std_devs[keep] * cbar[keep])))


def background_visibility_gradient(camera: CameraModel, u, v, posed):
    """Analytic (dB/du, dB/dv) at one pixel."""
    vis = render(camera, posed, np.array([u], float), np.array([v], float))
    return vis.grad[0]


@dataclass
class VisibilityImage:
    background: np.ndarray  # (P,) or (H, W)
    grad: np.ndarray  # (P, 2) or (H, W, 2)
    per_gaussian_visibility: Optional[np.ndarray] = None


@dataclass
class RenderCache:
    """Everything ``render`` computed that the backward pass reuses."""

    n: np.ndarray
    nu: np.ndarray
    nv: np.ndarray
    pix: np.ndarray
    gid: np.ndarray
    x: np.ndarray
    a: np.ndarray
    d2: np.ndarray
    e: np.ndarray
    cbar: np.ndarray
    bu: np.ndarray
    bv: np.ndarray
    B: np.ndarray
    grad: np.ndarray
    sigmas: np.ndarray
    n_gaussians: int


def footprint_pairs(camera: CameraModel, means, sigmas, densities, u, v, grid_shape=None,
                    cull=CULL):
    """(pixel, gaussian) index pairs that may have cbar >= ``cull``.

    With ``grid_shape=(h, w)`` the pixels ``u, v`` must be a row-major
    regular grid and pairs are enumerated from projected bounding boxes;
    otherwise every pixel is paired with every Gaussian.
    """
    q = len(sigmas)
    npix = len(u)
    if grid_shape is None or q == 0:
        pix = np.repeat(np.arange(npix), q)
        gid = np.tile(np.arange(q), npix)
        return pix, gid
    h, w = grid_shape
    u0, v0 = u[0], v[0]
    du = u[1] - u[0] if w > 1 else 1.0
    dv = v[w] - v[0] if h > 1 else 1.0
    X = (means - camera.center) @ camera.R.T
    ratio = np.maximum(densities, 0) / cull
    radius = np.where(ratio > 1, sigmas * np.sqrt(2 * np.log(np.maximum(ratio, 1.0))), 0.0)
    pix_list, gid_list = [], []
    K = camera.K
    for i in range(q):
        if radius[i] <= 0:
            continue
        z = X[i, 2]
        if z - radius[i] <= 1e-9:
            i0, i1, j0, j1 = 0, w - 1, 0, h - 1
        else:
            lateral = np.hypot(X[i, 0], X[i, 1])
            rho = radius[i] * (1 + lateral / z) / (z - radius[i])
            uc = K[0, 0] * X[i, 0] / z + K[0, 1] * X[i, 1] / z + K[0, 2]
            vc = K[1, 1] * X[i, 1] / z + K[1, 2]
            ru = (abs(K[0, 0]) + abs(K[0, 1])) * rho + 1
            rv = K[1, 1] * rho + 1
            i0 = max(0, int(np.floor((uc - ru - u0) / du)))
            i1 = min(w - 1, int(np.ceil((uc + ru - u0) / du)))
            j0 = max(0, int(np.floor((vc - rv - v0) / dv)))
            j1 = min(h - 1, int(np.ceil((vc + rv - v0) / dv)))
            if i0 > i1 or j0 > j1:
                continue
        cols = np.arange(i0, i1 + 1)
        rows = np.arange(j0, j1 + 1)
        idx = (rows[:, None] * w + cols[None, :]).ravel()
        pix_list.append(idx)
        gid_list.append(np.full(len(idx), i))
    if not pix_list:
        return np.zeros(0, int), np.zeros(0, int)
    return np.concatenate(pix_list), np.concatenate(gid_list)


def render(camera: CameraModel, posed, u=None, v=None, grid_shape=None, counter=None,
           return_cache=False):
    """B and grad B at pixels ``(u, v)`` (default: the full image grid).

    Returns a :class:`VisibilityImage` with flat per-pixel arrays; when the
    full grid is rendered they are reshaped to ``(H, W)``.
    """
    full = u is None
    if full:
        u, v = camera.pixel_grid()
        grid_shape = (camera.height, camera.width)
    u = np.asarray(u, float).ravel()
    v = np.asarray(v, float).ravel()
    npix = len(u)
    n, nu, nv = camera.rays(u, v)
    means = np.asarray(posed.means_world, float).reshape(-1, 3)
    sig = np.asarray(posed.std_devs, float)
    dens = np.asarray(posed.densities, float)
    pix, gid = footprint_pairs(camera, means, sig, dens, u, v, grid_shape)
    x = means[gid] - camera.center
    npair = n[pix]
    a = np.einsum("pi,pi->p", x, npair)
    d2 = np.maximum(np.einsum("pi,pi->p", x, x) - a * a, 0.0)
    s = sig[gid]
    e = np.exp(-d2 / (2 * s * s))
    cbar = dens[gid] * e
    keep = cbar >= CULL
    if not np.all(keep):
        pix, gid, x, a, d2, e, cbar, s, npair = (arr[keep] for arr in (pix, gid, x, a, d2, e, cbar, s, npair))
    if counter is not None:
        counter.add(len(pix))
    bu = np.einsum("pi,pi->p", x, nu[pix])
    bv = np.einsum("pi,pi->p", x, nv[pix])
    S = SQRT_2PI * np.bincount(pix, weights=s * cbar, minlength=npix)
    B = np.exp(-S)
    w = cbar / s * a
    grad = np.stack([np.bincount(pix, weights=w * bu, minlength=npix),
                     np.bincount(pix, weights=w * bv, minlength=npix)], axis=1)
    grad = grad.astype(float) * (-SQRT_2PI * B)[:, None]
    cache = RenderCache(n, nu, nv, pix, gid, x, a, d2, e, cbar, bu, bv, B, grad, sig, len(sig))
    if full:
        out = VisibilityImage(B.reshape(camera.height, camera.width),
                              grad.reshape(camera.height, camera.width, 2))
    else:
        out = VisibilityImage(B, grad)
    if return_cache:
        return out, cache
    return out


def backward(cache: RenderCache, d_grad, d_B=None):
    """Pull per-pixel dE/d(grad B) (and optionally dE/dB) back to the
    Gaussians: returns (dE/dmean (Q,3), dE/dsigma (Q,), dE/ddensity (Q,))."""
    c = cache
    q = c.n_gaussians
    d_grad = np.asarray(d_grad, float).reshape(-1, 2)
    # dE = coefA * dS + sum_k beta_k dF_k  with  grad_k = -sqrt(2pi) B sum F_k
    coefA = -np.einsum("pk,pk->p", d_grad, c.grad)
    if d_B is not None:
        coefA = coefA - np.asarray(d_B, float).ravel() * c.B
    beta = -SQRT_2PI * c.B[:, None] * d_grad  # (P, 2)
    nu_b = beta[:, 0:1] * c.nu + beta[:, 1:2] * c.nv  # (P, 3)
    pix, gid = c.pix, c.gid
    s = c.sigmas[gid]
    A = coefA[pix]
    gam = beta[pix, 0] * c.bu + beta[pix, 1] * c.bv
    a, cbar, d2, e = c.a, c.cbar, c.d2, c.e
    n = c.n[pix]
    xperp = c.x - a[:, None] * n
    s2 = s * s
    k1 = -(A * SQRT_2PI + a * gam / s2)
    vec = (cbar / s)[:, None] * (k1[:, None] * xperp + gam[:, None] * n + a[:, None] * nu_b[pix])
    d_mean = np.stack([np.bincount(gid, weights=vec[:, i], minlength=q) for i in range(3)], axis=1)
    d_sig = A * SQRT_2PI * cbar * (1 + d2 / s2) + a * gam * cbar / s2 * (d2 / s2 - 1)
    d_c = A * SQRT_2PI * s * e + a * gam * e / s
    return (d_mean, np.bincount(gid, weights=d_sig, minlength=q),
            np.bincount(gid, weights=d_c, minlength=q))


def pixel_jacobians(cache: RenderCache):
    """Forward-mode per-pixel derivatives of B and grad B w.r.t. each
    Gaussian's (mean, sigma, density).

    Returns ``dB`` of shape (P, Q, 5) and ``dgrad`` of shape (P, 2, Q, 5),
    the last axis ordered (mean_x, mean_y, mean_z, sigma, density).
    """
    c = cache
    npix = len(c.B)
    q = c.n_gaussians
    pix, gid = c.pix, c.gid
    s = c.sigmas[gid]
    s2 = s * s
    n = c.n[pix]
    xperp = c.x - c.a[:, None] * n
    dS = np.zeros((len(pix), 5))
    dS[:, :3] = -SQRT_2PI * (c.cbar / s)[:, None] * xperp
    dS[:, 3] = SQRT_2PI * c.cbar * (1 + c.d2 / s2)
    dS[:, 4] = SQRT_2PI * s * c.e
    dB = np.zeros((npix, q, 5))
    dB[pix, gid] = -c.B[pix][:, None] * dS
    dgrad = np.zeros((npix, 2, q, 5))
    for k, (b, nk) in enumerate(((c.bu, c.nu[pix]), (c.bv, c.nv[pix]))):
        dF = np.zeros((len(pix), 5))
        dF[:, :3] = (c.cbar / s)[:, None] * (-(c.a * b / s2)[:, None] * xperp + b[:, None] * n
                                             + c.a[:, None] * nk)
        dF[:, 3] = c.a * b * c.cbar / s2 * (c.d2 / s2 - 1)
        dF[:, 4] = c.e * c.a * b / s
        dgrad[pix, k, gid] = -c.grad[pix, k][:, None] * dS - SQRT_2PI * c.B[pix][:, None] * dF
    return dB, dgrad


# ---------------------------------------------------------------- per-Gaussian visibility


@lru_cache(maxsize=None)
def _nodes(k):
    return hermegauss(k)


def visibility_rows(a, cbar, sig, target, n_nodes=N_NODES, want_grad=False):
    """Visibility of Gaussian ``target[r]`` along ray r.

    ``a``, ``cbar``, ``sig`` are (R, M) arrays of ray-space peak positions,
    peak densities and standard deviations of the M Gaussians seen by each
    ray (pad with ``cbar = 0``). Light is absorbed from ``s = -inf`` so
    that ``sum_q V_q = 1 - B`` holds exactly in the continuum.

    With ``want_grad`` also returns dV/da and dV/dcbar, each (R, M).
    """
    t, w = _nodes(n_nodes)
    nr, m = a.shape
    R = np.arange(nr)
    aj = a[R, target]
    sj = sig[R, target]
    cj = cbar[R, target]
    s_nodes = aj[:, None] + sj[:, None] * t[None, :]  # (R, K)
    # only (ray, Gaussian) pairs above the cull threshold absorb light
    keep = cbar >= CULL
    keep[R, target] = True
    ri, mi = np.nonzero(keep)
    sp = sig[ri, mi]
    cp = cbar[ri, mi]
    z = (s_nodes[ri] - a[ri, mi][:, None]) / (np.sqrt(2.0) * sp[:, None])  # (pairs, K)
    erfz = erf(z)
    mass = np.sqrt(np.pi / 2) * cp * sp
    absorb = np.stack([np.bincount(ri, weights=mass * (1.0 + erfz[:, k]), minlength=nr)
                       for k in range(len(t))], axis=1)  # (R, K)
    E = np.exp(-absorb)
    wE = w[None, :] * E
    V = cj * sj * wE.sum(axis=1)
    if not want_grad:
        return V
    C = cj * sj
    wEp = wE[ri]
    # dV/da_m = C sum_k wE_k G_m(s_k), with the target's own shift of the nodes
    pa = np.einsum("pk,pk->p", wEp, cp[:, None] * np.exp(-z * z))
    dV_da = np.zeros((nr, m))
    dV_da[ri, mi] = C[ri] * pa
    dV_da[R, target] -= C * np.bincount(ri, weights=pa, minlength=nr)
    dV_dc = np.zeros((nr, m))
    dV_dc[ri, mi] = -C[ri] * np.einsum("pk,pk->p", wEp, np.sqrt(np.pi / 2) * sp[:, None] * (1.0 + erfz))
    dV_dc[R, target] += sj * wE.sum(axis=1)
    return V, dV_da, dV_dc


def gaussian_visibility(o, n, posed, q=None, n_nodes=N_NODES):
    """V_q along one ray; all Gaussians when ``q`` is None."""
    means = np.asarray(posed.means_world, float)
    a, cbar = _ray_params(np.asarray(o, float), np.asarray(n, float), means,
                          posed.std_devs, posed.densities)
    m = len(a)
    targets = np.arange(m) if q is None else np.array([q])
    if m == 0:
        return np.zeros(0)
    rows = len(targets)
    V = visibility_rows(np.tile(a, (rows, 1)), np.tile(cbar, (rows, 1)),
                        np.tile(posed.std_devs, (rows, 1)), targets, n_nodes)
    return V if q is None else float(V[0])


def render_gaussian_visibility(camera: CameraModel, posed, u=None, v=None, grid_shape=None,
                               n_nodes=N_NODES, max_elems=4_000_000):
    """Per-pixel visibility of every Gaussian: dense (P, Q) array.

    Only Gaussians with cbar above the cull threshold on a ray take part;
    work is chunked over pixels to bound memory.
    """
    full = u is None
    if full:
        u, v = camera.pixel_grid()
        grid_shape = (camera.height, camera.width)
    u = np.asarray(u, float).ravel()
    v = np.asarray(v, float).ravel()
    npix = len(u)
    q = len(posed.std_devs)
    out = np.zeros((npix, q))
    if q == 0 or npix == 0:
        return out
    n, _, _ = camera.rays(u, v)
    means = np.asarray(posed.means_world, float)
    sig = np.asarray(posed.std_devs, float)
    dens = np.asarray(posed.densities, float)
    pix, gid = footprint_pairs(camera, means, sig, dens, u, v, grid_shape)
    x = means[gid] - camera.center
    a = np.einsum("pi,pi->p", x, n[pix])
    d2 = np.maximum(np.einsum("pi,pi->p", x, x) - a * a, 0.0)
    cbar = dens[gid] * np.exp(-d2 / (2 * sig[gid] ** 2))
    keep = cbar >= CULL
    pix, gid, a, cbar = pix[keep], gid[keep], a[keep], cbar[keep]
    order = np.lexsort((gid, pix))
    pix, gid, a, cbar = pix[order], gid[order], a[order], cbar[order]
    counts = np.bincount(pix, minlength=npix)
    starts = np.concatenate([[0], np.cumsum(counts)])
    slot = np.arange(len(pix)) - starts[pix]
    active = np.nonzero(counts)[0]
    i = 0
    while i < len(active):
        m = 1
        j = i
        # grow the chunk while the padded work stays bounded
        while j < len(active):
            m_new = max(m, counts[active[j]])
            rows = counts[active[i : j + 1]].sum()
            if j > i and rows * m_new * n_nodes > max_elems:
                break
            m = m_new
            j += 1
        chunk = active[i:j]
        lo, hi = starts[chunk[0]], starts[chunk[-1] + 1]
        local = np.searchsorted(chunk, pix[lo:hi])
        A = np.zeros((len(chunk), m))
        Cb = np.zeros((len(chunk), m))
        Sg = np.ones((len(chunk), m))
        A[local, slot[lo:hi]] = a[lo:hi]
        Cb[local, slot[lo:hi]] = cbar[lo:hi]
        Sg[local, slot[lo:hi]] = sig[gid[lo:hi]]
        V = visibility_rows(A[local], Cb[local], Sg[local], slot[lo:hi], n_nodes)
        out[pix[lo:hi], gid[lo:hi]] = V
        i = j
    return out
