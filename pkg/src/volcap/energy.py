"""Space-time objective: contour and detection data terms plus priors.

All terms return analytic gradients with respect to the per-frame pose
vectors P (T x 43) and the shape coefficients s. Per-(camera, frame) data
terms are independent; they may be evaluated on a thread pool but are
always summed in (camera, frame) order so results do not depend on the
thread count.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from . import raycast
from .errors import InvalidArgumentError
from .model import ActorModel, backprop_points, forward_kinematics, pose_gaussians
from .shape_space import ShapeSpace, evaluate_shape, stack

# joint blobs are kept semi-transparent: heat maps show occluded joints at full
# strength, so opaque blobs would reward poses that un-occlude them
JOINT_KAPPA = 0.5
DETECTION_NODES = 12
HEAT_FLOOR = 1e-3


@dataclass
class EnergyConfig:
    w_data: float = 1.0
    w_smooth: float = 0.1
    w_pose: float = 1.0
    w_shape: float = 1.0
    delta_low: float = 0.1
    delta_high: float = 0.2
    sobel_sigma: float = 1.1
    joint_sigma: Optional[float] = None  # None: the model's value
    threads: int = 1

    def __post_init__(self):
        for name in ("w_data", "w_smooth", "w_pose", "w_shape"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be >= 0")

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        bad = set(d) - known
        if bad:
            raise InvalidArgumentError(f"unknown energy settings: {sorted(bad)}")
        return cls(**d)


@dataclass
class HeatMapSet:
    """Joint-location probability maps keyed by (camera, frame, joint).

    ``scale`` is the heat-map resolution relative to the camera image.
    """

    maps: dict
    scale: float
    n_cameras: int
    n_frames: int
    n_joints: int

    def get(self, c, t, j):
        return self.maps.get((c, t, j))


# ---------------------------------------------------------------- image preprocessing


def image_gradients(image, sigma=1.1, delta_high=0.2):
    """Smoothed Sobel gradient (H, W, 2) as (d/du, d/dv), summed over
    channels and magnitude-clamped. Units are intensity per pixel."""
    img = np.asarray(image, dtype=float)
    if img.size == 0:
        raise InvalidArgumentError("empty image")
    if img.ndim == 2:
        img = img[:, :, None]
    out = np.zeros(img.shape[:2] + (2,))
    for ch in range(img.shape[2]):
        for k, axis in enumerate((1, 0)):
            g = ndimage.sobel(img[:, :, ch], axis=axis, mode="reflect") / 8.0
            if sigma > 0:
                g = ndimage.gaussian_filter(g, sigma, mode="reflect", truncate=3.0)
            out[:, :, k] += g
    return clamp_magnitude(out, delta_high)


def clamp_magnitude(grad, limit):
    grad = np.array(grad, dtype=float)
    mag = np.linalg.norm(grad, axis=-1, keepdims=True)
    scale = np.where(mag > limit, limit / np.where(mag > 0, mag, 1.0), 1.0)
    return grad * scale


# ---------------------------------------------------------------- contour terms


def e_sim(gb, gi):
    """-|gb||gi| cos(2 angle); 0 when either vector is zero."""
    gb = np.asarray(gb, float)
    gi = np.asarray(gi, float)
    nb = np.linalg.norm(gb, axis=-1)
    ni = np.linalg.norm(gi, axis=-1)
    dot = np.sum(gb * gi, axis=-1)
    prod = nb * ni
    ok = prod > 0
    return np.where(ok, prod - 2.0 * dot**2 / np.where(ok, prod, 1.0), 0.0)


def e_flat(gb, gi, delta_low=0.1):
    nb = np.linalg.norm(np.asarray(gb, float), axis=-1)
    ni = np.linalg.norm(np.asarray(gi, float), axis=-1)
    return nb * np.maximum(0.0, delta_low - ni)


def contour_pixels(g, h, delta_low=0.1):
    """Per-pixel e_sim + e_flat and its derivative with respect to g."""
    nb = np.linalg.norm(g, axis=1)
    ni = np.linalg.norm(h, axis=1)
    dot = np.einsum("pk,pk->p", g, h)
    w = np.maximum(ni, delta_low)
    # also drop |g| so small that |g|^3 |h| underflows
    both = nb**3 * ni > 0
    nb_s = np.where(both, nb, 1.0)
    prod = np.where(both, nb * ni, 1.0)
    E = nb * w - np.where(both, 2.0 * dot**2 / prod, 0.0)
    dg = (w / np.where(nb > 0, nb, 1.0))[:, None] * g
    corr = 4.0 * (dot / prod)[:, None] * h - 2.0 * (dot**2 / (prod * nb_s**2))[:, None] * g
    dg -= np.where(both[:, None], corr, 0.0)
    return E, dg


# ---------------------------------------------------------------- shape and pose plumbing


def shaped(model: ActorModel, space: Optional[ShapeSpace], s) -> ActorModel:
    if space is None or len(s) == 0:
        return model
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return model.with_shape(*evaluate_shape(space, s))


def shape_gradient(space: Optional[ShapeSpace], g_local, g_sig, g_c, g_b):
    if space is None:
        return np.zeros(0)
    return space.basis.T @ stack(g_local, g_sig, g_c, g_b)


def contour_view(camera, target, model: ActorModel, pose, delta_low=0.1):
    """E_contour for one view and its gradients.

    Returns (E, d_pose, d_bone_lengths, d_means_local, d_sigma, d_density).
    """
    sk = model.skeleton
    kin = forward_kinematics(sk, pose)
    posed = pose_gaussians(model, pose, kin)
    vis, cache = raycast.render(camera, posed, return_cache=True)
    g = vis.grad.reshape(-1, 2)
    h = np.asarray(target, float).reshape(-1, 2)
    if h.shape != g.shape:
        raise InvalidArgumentError(f"gradient image for camera {camera.name!r} has the wrong size")
    E, dg = contour_pixels(g, h, delta_low)
    d_mean, d_sig, d_c = raycast.backward(cache, dg)
    gp, gb, gl = backprop_points(sk, kin, model.bone_ids, posed.means_world, d_mean)
    return float(E.sum()), gp, gb, gl, d_sig, d_c


def joint_densities(sigma):
    return JOINT_KAPPA / (np.sqrt(2 * np.pi) * sigma)


def detection_view(camera, maps, model: ActorModel, pose, scale, joint_sigma=None,
                   n_nodes=DETECTION_NODES):
    """E_detection = -sum_j sum_pixels D_j V_j for one view.

    ``maps`` is a list (one per joint, or None when missing) of heat maps
    sampled on the camera grid scaled by ``scale``. Returns
    (E, d_pose, d_bone_lengths).
    """
    sk = model.skeleton
    kin = forward_kinematics(sk, pose)
    J = kin.positions
    nj = len(J)
    sigma = model.joint_sigma if joint_sigma is None else joint_sigma
    cam = camera if scale == 1 else camera.scaled(scale)
    rows_pix, rows_joint, rows_D = [], [], []
    for j, D in enumerate(maps):
        if D is None:
            continue
        if D.shape != (cam.height, cam.width):
            raise InvalidArgumentError(f"heat map for joint {j} does not match the camera grid")
        idx = np.flatnonzero(D.ravel() > HEAT_FLOOR)
        rows_pix.append(idx)
        rows_joint.append(np.full(len(idx), j))
        rows_D.append(D.ravel()[idx])
    zero = (0.0, np.zeros(sk.n_dofs), np.zeros(nj))
    if not rows_pix:
        return zero
    pix = np.concatenate(rows_pix)
    target = np.concatenate(rows_joint)
    Dv = np.concatenate(rows_D)
    if len(pix) == 0:
        return zero
    u, v = cam.pixel_grid()
    n, _, _ = cam.rays(u[pix], v[pix])
    x = J[None, :, :] - cam.center  # (1, M, 3)
    a = np.einsum("rmi,ri->rm", np.broadcast_to(x, (len(pix), nj, 3)), n)
    d2 = np.maximum(np.sum(x * x, axis=2) - a * a, 0.0)
    c = joint_densities(sigma)
    cbar = c * np.exp(-d2 / (2 * sigma**2))
    sig = np.full_like(a, sigma)
    V, dV_da, dV_dc = raycast.visibility_rows(a, cbar, sig, target, n_nodes, want_grad=True)
    E = -float(np.dot(Dv, V))
    # chain rule to joint positions
    ga = -Dv[:, None] * dV_da
    gc = -Dv[:, None] * dV_dc
    xperp = x - a[:, :, None] * n[:, None, :]
    gx = ga[:, :, None] * n[:, None, :] - (gc * cbar / sigma**2)[:, :, None] * xperp
    g_joints = gx.sum(axis=0)
    gp, gb, _ = backprop_points(sk, kin, np.arange(nj), J, g_joints)
    return E, gp, gb


# ---------------------------------------------------------------- priors


def e_shape_prior(s, bounds):
    s = np.asarray(s, float)
    ex = np.maximum(0.0, np.abs(s) - np.asarray(bounds, float))
    return float(np.sum(ex**2)), 2.0 * ex * np.sign(s)


def e_smooth_prior(P):
    P = np.atleast_2d(np.asarray(P, float))
    grad = np.zeros_like(P)
    if len(P) < 3:
        return 0.0, grad
    acc = P[:-2] - 2 * P[1:-1] + P[2:]
    grad[:-2] += 2 * acc
    grad[1:-1] -= 4 * acc
    grad[2:] += 2 * acc
    return float(np.sum(acc**2)), grad


def e_pose_prior(p, limits):
    p = np.asarray(p, float)
    lim = np.asarray(limits, float)
    lo = np.minimum(0.0, p - lim[:, 0])
    hi = np.maximum(0.0, p - lim[:, 1])
    lo = np.where(np.isfinite(lo), lo, 0.0)
    hi = np.where(np.isfinite(hi), hi, 0.0)
    return float(np.sum(lo**2 + hi**2)), 2.0 * (lo + hi)


# ---------------------------------------------------------------- total energy


@dataclass
class FitProblem:
    """Everything the objective needs besides the parameters."""

    model: ActorModel
    cameras: list
    space: Optional[ShapeSpace] = None
    gradients: Optional[list] = None  # [camera][frame] -> (H, W, 2)
    heatmaps: Optional[HeatMapSet] = None
    n_frames: int = 1

    @property
    def shape_dim(self):
        return 0 if self.space is None else self.space.dim


@dataclass
class EnergyResult:
    value: float
    grad_P: np.ndarray
    grad_s: np.ndarray
    terms: dict = field(default_factory=dict)


def all_views(problem):
    return [(c, t) for c in range(len(problem.cameras)) for t in range(problem.n_frames)]


def _parallel(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def total_energy(problem: FitProblem, P, s, stage, config: EnergyConfig = None,
                 views=None, frames=None) -> EnergyResult:
    """Weighted sum of all terms with stage-selected data term.

    ``views`` optionally restricts the data term to a list of
    (camera, frame) pairs; ``frames`` restricts the per-frame priors.
    """
    config = config or EnergyConfig()
    if stage not in (1, 2):
        raise InvalidArgumentError(f"stage must be 1 or 2, got {stage!r}")
    P = np.atleast_2d(np.asarray(P, float))
    s = np.asarray(s, float)
    T = problem.n_frames
    if P.shape != (T, problem.model.skeleton.n_dofs):
        raise InvalidArgumentError(f"P must be {T} x {problem.model.skeleton.n_dofs}, got {P.shape}")
    if s.shape != (problem.shape_dim,):
        raise InvalidArgumentError(f"s must have {problem.shape_dim} entries, got {s.shape}")
    model = shaped(problem.model, problem.space, s)
    nj = model.skeleton.n_joints
    q = model.n_gaussians
    gP = np.zeros_like(P)
    g_loc = np.zeros((q, 3))
    g_sig = np.zeros(q)
    g_c = np.zeros(q)
    g_b = np.zeros(nj)
    terms = {}
    if views is None:
        views = all_views(problem)

    if config.w_data > 0 and views:
        if stage == 2:
            if problem.gradients is None:
                raise InvalidArgumentError("stage 2 needs gradient images")

            def run(ct):
                c, t = ct
                return contour_view(problem.cameras[c], problem.gradients[c][t], model, P[t],
                                    config.delta_low)
        else:
            hm = problem.heatmaps
            if hm is None:
                raise InvalidArgumentError("stage 1 needs heat maps")

            def run(ct):
                c, t = ct
                maps = [hm.get(c, t, j) for j in range(nj)]
                return detection_view(problem.cameras[c], maps, model, P[t], hm.scale,
                                      config.joint_sigma)

        results = _parallel(run, views, config.threads)
        e_data = 0.0
        w = config.w_data
        for (c, t), r in zip(views, results):
            e_data += r[0]
            gP[t] += w * r[1]
            g_b += w * r[2]
            if stage == 2:
                g_loc += w * r[3]
                g_sig += w * r[4]
                g_c += w * r[5]
        terms["data"] = w * e_data

    frame_ids = range(T) if frames is None else frames
    e_pose = 0.0
    limits = model.skeleton.joint_limits()
    for t in frame_ids:
        e, g = e_pose_prior(P[t], limits)
        e_pose += e
        gP[t] += config.w_pose * g
    terms["pose"] = config.w_pose * e_pose
    if frames is None:
        e, g = e_smooth_prior(P)
        terms["smooth"] = config.w_smooth * e
        gP += config.w_smooth * g
    else:
        terms["smooth"] = 0.0
    gs = shape_gradient(problem.space, g_loc, g_sig, g_c, g_b)
    if problem.space is not None:
        e, g = e_shape_prior(s, problem.space.coeff_bounds)
        terms["shape"] = config.w_shape * e
        gs = gs + config.w_shape * g
    else:
        terms["shape"] = 0.0
    return EnergyResult(float(sum(terms.values())), gP, gs, terms)
