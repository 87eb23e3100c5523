"""Metrics and the synthetic ground-truth harness."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import ConvexHull

from . import raycast
from .energy import HeatMapSet, clamp_magnitude, image_gradients
from .errors import InvalidArgumentError, NoSliceError
from .model import ActorModel, forward_kinematics, pose_gaussians
from .raycast import CameraModel
from .shape_space import ShapeSpace, shaped_model

# ---------------------------------------------------------------- silhouettes and overlap


def render_silhouette(posed, camera: CameraModel, tau=0.5):
    """Pixel on iff 1 - B >= tau."""
    if not 0 < tau < 1:
        raise InvalidArgumentError("tau must lie in (0, 1)")
    B = raycast.render(camera, posed).background
    return (1.0 - B) >= tau


@dataclass
class OverlapReport:
    precision: float
    recall: float
    per_frame: list = field(default_factory=list)


def _ratio(num, den, both_empty):
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def overlap_metrics(pred, ref) -> OverlapReport:
    pred = np.asarray(pred, bool)
    ref = np.asarray(ref, bool)
    if pred.shape != ref.shape:
        raise InvalidArgumentError(f"mask shapes differ: {pred.shape} vs {ref.shape}")
    inter = int(np.count_nonzero(pred & ref))
    npred = int(np.count_nonzero(pred))
    nref = int(np.count_nonzero(ref))
    empty = npred == 0 and nref == 0
    p = _ratio(inter, npred, empty)
    r = _ratio(inter, nref, empty)
    return OverlapReport(p, r, [(p, r)])


def overlap_sequence(pred_masks, ref_masks) -> OverlapReport:
    """Pooled precision/recall over many masks, with per-mask values."""
    inter = npred = nref = 0
    per = []
    for p, r in zip(pred_masks, ref_masks):
        rep = overlap_metrics(p, r)
        per.append((rep.precision, rep.recall))
        inter += int(np.count_nonzero(np.asarray(p, bool) & np.asarray(r, bool)))
        npred += int(np.count_nonzero(p))
        nref += int(np.count_nonzero(r))
    empty = npred == 0 and nref == 0
    return OverlapReport(_ratio(inter, npred, empty), _ratio(inter, nref, empty), per)


# ---------------------------------------------------------------- joints


def joint_error(P, skeleton, gt_positions, offset_compensation=False):
    """Per-frame mean Euclidean joint distance in millimetres."""
    P = np.atleast_2d(np.asarray(P, float))
    gt = np.asarray(gt_positions, float).reshape(len(P), -1, 3)
    est = np.stack([forward_kinematics(skeleton, p).positions for p in P])
    return joint_error_positions(est, gt, offset_compensation)


def joint_error_positions(est, gt, offset_compensation=False):
    est = np.asarray(est, float)
    gt = np.asarray(gt, float)
    if est.shape != gt.shape:
        raise InvalidArgumentError(f"joint arrays differ: {est.shape} vs {gt.shape}")
    diff = est - gt
    if offset_compensation and len(diff) > 1:
        diff = diff.copy()
        diff[1:] -= diff[0]
    return 1000.0 * np.linalg.norm(diff, axis=2).mean(axis=1)


# ---------------------------------------------------------------- circumference


def slice_points(vertices, faces, height, axis=2):
    """Intersection points of the triangle edges with the plane."""
    V = np.asarray(vertices, float)
    F = np.asarray(faces, int)
    d = V[:, axis] - height
    pts = []
    for i, j in ((0, 1), (1, 2), (2, 0)):
        a, b = F[:, i], F[:, j]
        cross = (d[a] * d[b] < 0) | ((d[a] == 0) & (d[b] != 0))
        a, b = a[cross], b[cross]
        t = d[a] / (d[a] - d[b])
        pts.append(V[a] + t[:, None] * (V[b] - V[a]))
    pts = np.concatenate(pts) if pts else np.zeros((0, 3))
    return np.delete(pts, axis, axis=1)


def circumference(vertices, faces, height, axis=2, vertex_mask=None):
    """Perimeter (cm) of the convex hull of the mesh slice.

    ``vertex_mask`` restricts the slice to faces whose vertices are all
    selected (e.g. the torso component).
    """
    faces = np.asarray(faces, int)
    if vertex_mask is not None:
        keep = np.all(np.asarray(vertex_mask, bool)[faces], axis=1)
        faces = faces[keep]
    pts = slice_points(vertices, faces, height, axis)
    if len(pts) < 3:
        raise NoSliceError(f"plane at {height} m does not cut the mesh")
    hull = ConvexHull(pts)
    ring = pts[hull.vertices]
    return 100.0 * float(np.sum(np.linalg.norm(ring - np.roll(ring, 1, axis=0), axis=1)))


# ---------------------------------------------------------------- synthetic scenes


def ring_cameras(n, image_size=(128, 96), radius=4.0, height=0.0, focal=None, target=(0, 0, -0.1),
                 start=0.0):
    """``n`` cameras on a horizontal circle looking at ``target``."""
    w, h = image_size
    focal = focal if focal is not None else 0.95 * h * radius / 2.1
    cams = []
    for i in range(n):
        ang = start + 2 * np.pi * i / n
        eye = np.array([radius * np.sin(ang), -radius * np.cos(ang), height])
        cams.append(CameraModel.look_at(eye, target, [0, 0, 1], focal, image_size, name=f"cam{i}"))
    return cams


def base_pose(skeleton, rng=None):
    """A relaxed standing pose with bent elbows and knees."""
    p = skeleton.identity_pose()

    def put(joint, i, value):
        p[skeleton.dof_offsets[skeleton.index(joint)] + i] = value

    put("l_shoulder", 1, 0.9)   # arms lowered
    put("r_shoulder", 1, -0.9)
    put("l_shoulder", 0, 0.3)   # twist
    put("r_shoulder", 0, -0.3)
    put("l_elbow", 0, 0.8)
    put("r_elbow", 0, -0.7)
    put("l_hip", 0, 0.35)
    put("r_hip", 0, 0.15)
    put("l_knee", 0, -0.6)
    put("r_knee", 0, -0.35)
    put("spine", 0, 0.1)
    put("head", 1, 0.2)
    if rng is not None:
        lim = skeleton.joint_limits()[6:]
        p[6:] = np.clip(p[6:] + 0.1 * rng.standard_normal(len(p) - 6), lim[:, 0] + 0.15, lim[:, 1] - 0.15)
    return p


def motion(skeleton, n_frames, rng):
    """Smooth sequence: base pose plus low-frequency joint oscillation and a
    slow root drift."""
    p0 = base_pose(skeleton, rng)
    n = skeleton.n_dofs
    amp = 0.12 * rng.uniform(0.3, 1.0, n)
    phase = rng.uniform(0, 2 * np.pi, n)
    freq = rng.uniform(0.3, 0.8, n)
    t = np.arange(n_frames)[:, None]
    P = p0[None, :] + amp * np.sin(2 * np.pi * freq * t / max(n_frames, 1) + phase) - amp * np.sin(phase)
    drift = rng.uniform(-0.01, 0.01, 3)
    P[:, :3] = p0[:3] + t * drift
    P[:, 3:6] = p0[3:6] + np.array([0.0, 0.0, rng.uniform(-0.3, 0.3)]) + 0.02 * (P[:, 3:6] - p0[3:6])
    lim = skeleton.joint_limits()[6:]
    P[:, 6:] = np.clip(P[:, 6:], lim[:, 0] + 0.1, lim[:, 1] - 0.1)
    return P


@dataclass
class SyntheticScene:
    seed: int
    reference: ActorModel
    space: Optional[ShapeSpace]
    s_true: np.ndarray
    P_true: np.ndarray
    cameras: list
    model: ActorModel = None  # ground-truth shaped model

    def __post_init__(self):
        if self.model is None:
            self.model = self.reference if self.space is None else shaped_model(self.reference, self.space,
                                                                               self.s_true)

    @property
    def n_frames(self):
        return len(self.P_true)

    def posed(self, t):
        return pose_gaussians(self.model, self.P_true[t])

    def joints(self):
        return np.stack([forward_kinematics(self.model.skeleton, p).positions for p in self.P_true])

    def body_height(self):
        """Rest-pose height of the density field's vertical extent."""
        posed = pose_gaussians(self.model, self.model.skeleton.identity_pose())
        z = posed.means_world[:, 2]
        return float((z + 1.5 * posed.std_devs).max() - (z - 1.5 * posed.std_devs).min())

    def silhouettes(self, tau=0.5):
        return [[render_silhouette(self.posed(t), cam, tau) for t in range(self.n_frames)]
                for cam in self.cameras]


def synth_scene(reference: ActorModel, space: Optional[ShapeSpace], seed=0, n_cameras=3, n_frames=10,
                image_size=(128, 96), shape_spread=0.5):
    """Random ground truth: shape ``shape_spread`` std per coefficient,
    smooth motion, ring cameras."""
    rng = np.random.default_rng(seed)
    if space is not None:
        s = shape_spread * space.coeff_std * rng.standard_normal(space.dim)
        s = np.clip(s, -space.coeff_bounds, space.coeff_bounds)
    else:
        s = np.zeros(0)
    P = motion(reference.skeleton, n_frames, rng)
    cams = ring_cameras(n_cameras, image_size, start=rng.uniform(0, 2 * np.pi / n_cameras))
    return SyntheticScene(seed, reference, space, s, P, cams)


def synth_contour_targets(scene: SyntheticScene, gain=1.0, delta_high=0.2, background=None):
    """Target gradient images: clamp(gain * grad B) of the ground truth,
    optionally added to the Sobel response of background images
    (``background[c]``: an RGB image per camera)."""
    out = []
    for c, cam in enumerate(scene.cameras):
        row = []
        for t in range(scene.n_frames):
            g = gain * raycast.render(cam, scene.posed(t)).grad
            if background is not None:
                g = g + image_gradients(background[c], delta_high=np.inf)
            row.append(clamp_magnitude(g, delta_high))
        out.append(row)
    return out


def synth_heat_maps(scene: SyntheticScene, scale=0.5, blur_px=4.0, jitter_px=0.0, distractors=0,
                    distractor_peak=0.8, rng=None) -> HeatMapSet:
    """Per-joint Gaussian bumps at the projected ground-truth joints.

    ``blur_px`` and ``jitter_px`` are camera pixels. Each distractor adds a
    second bump of height ``distractor_peak`` at a random place at least
    5 blur widths from the true one.
    """
    rng = rng if rng is not None else np.random.default_rng(scene.seed + 1)
    J = scene.joints()
    maps = {}
    nj = J.shape[1]
    for c, cam in enumerate(scene.cameras):
        hcam = cam.scaled(scale)
        ys, xs = np.mgrid[0 : hcam.height, 0 : hcam.width].astype(float)
        bw = blur_px * scale
        for t in range(scene.n_frames):
            uv, _ = hcam.project(J[t])
            for j in range(nj):
                centre = uv[j] + jitter_px * scale * rng.standard_normal(2)
                D = np.exp(-((xs - centre[0]) ** 2 + (ys - centre[1]) ** 2) / (2 * bw * bw))
                for _ in range(distractors):
                    for _attempt in range(100):
                        other = rng.uniform([0, 0], [hcam.width - 1, hcam.height - 1])
                        if np.linalg.norm(other - centre) > 5 * bw:
                            break
                    D = np.maximum(D, distractor_peak * np.exp(
                        -((xs - other[0]) ** 2 + (ys - other[1]) ** 2) / (2 * bw * bw)))
                maps[(c, t, j)] = np.clip(D, 0.0, 1.0)
    return HeatMapSet(maps, scale, len(scene.cameras), scene.n_frames, nj)


def synth_images(scene: SyntheticScene, background=(0.55, 0.55, 0.5), texture=None):
    """RGB renders: background * B + sum_q V_q color_q per pixel."""
    colors = scene.model.colors if scene.model.colors is not None else np.full((scene.model.n_gaussians, 3), 0.2)
    out = []
    for c, cam in enumerate(scene.cameras):
        row = []
        for t in range(scene.n_frames):
            posed = scene.posed(t)
            B = raycast.render(cam, posed).background
            V = raycast.render_gaussian_visibility(cam, posed)
            bg = np.broadcast_to(np.asarray(background, float), (cam.height, cam.width, 3)) \
                if texture is None else texture[c]
            img = bg * B[:, :, None] + (V @ colors).reshape(cam.height, cam.width, 3)
            row.append(np.clip(img, 0.0, 1.0))
        out.append(row)
    return out
