"""Procedural human body meshes with a fixed topology.

Stands in for a registered scan database: every instance shares vertex
order and triangles, and is built from a handful of global proportions.
Segments are closed tubes (torso, neck, limbs) or ellipsoids (head,
feet); each tube is a separate connected component of the mesh.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

RINGS = 10
SECTORS = 16


@dataclass(frozen=True)
class BodyParams:
    height: float = 1.0
    arm_length: float = 1.0
    leg_length: float = 1.0
    shoulder_width: float = 1.0
    torso_width: float = 1.0
    torso_depth: float = 1.0
    limb_girth: float = 1.0
    head_size: float = 1.0

    @classmethod
    def random(cls, rng, spread=0.08):
        vals = {f.name: float(1.0 + spread * rng.standard_normal()) for f in fields(cls)}
        vals["height"] = float(1.0 + 0.5 * spread * rng.standard_normal())
        return cls(**vals)

    def as_dict(self):
        return asdict(self)


JOINT_NAMES = (
    "pelvis", "spine", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)
JOINT_PARENTS = (-1, 0, 1, 2, 1, 4, 5, 1, 7, 8, 0, 10, 11, 0, 13, 14)


def joint_positions(p: BodyParams):
    """Rest (T-pose) joint locations, pelvis at the origin, z up, facing +y."""
    h = p.height
    pos = {
        "pelvis": (0.0, 0.0, 0.0),
        "spine": (0.0, 0.0, 0.22 * h),
        "neck": (0.0, 0.0, 0.50 * h),
        "head": (0.0, 0.0, 0.60 * h),
    }
    for side, sx in (("l", 1.0), ("r", -1.0)):
        sh = np.array([sx * 0.18 * h * p.shoulder_width, 0.0, 0.46 * h])
        el = sh + [sx * 0.28 * h * p.arm_length, 0.0, 0.0]
        wr = el + [sx * 0.25 * h * p.arm_length, 0.0, 0.0]
        hip = np.array([sx * 0.09 * h * p.torso_width, 0.0, -0.05 * h])
        kn = hip + [0.0, 0.0, -0.42 * h * p.leg_length]
        an = kn + [0.0, 0.0, -0.40 * h * p.leg_length]
        pos.update({
            f"{side}_shoulder": tuple(sh), f"{side}_elbow": tuple(el), f"{side}_wrist": tuple(wr),
            f"{side}_hip": tuple(hip), f"{side}_knee": tuple(kn), f"{side}_ankle": tuple(an),
        })
    return np.array([pos[n] for n in JOINT_NAMES])


def _frame(axis):
    axis = axis / np.linalg.norm(axis)
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    return axis, e1, e2


def _tube(start, end, radii1, radii2, rings=RINGS, sectors=SECTORS):
    """Closed tube; ``radii*`` are (r_e1, r_e2) profiles sampled per ring."""
    start = np.asarray(start, float)
    end = np.asarray(end, float)
    axis, e1, e2 = _frame(end - start)
    ts = np.linspace(0.0, 1.0, rings)
    ang = np.linspace(0.0, 2 * np.pi, sectors, endpoint=False)
    verts = []
    for i, t in enumerate(ts):
        c = start + t * (end - start)
        for a in ang:
            verts.append(c + radii1[i] * np.cos(a) * e1 + radii2[i] * np.sin(a) * e2)
    # end caps: poles pushed out by a fraction of the radius
    verts.append(start - 0.5 * min(radii1[0], radii2[0]) * axis)
    verts.append(end + 0.5 * min(radii1[-1], radii2[-1]) * axis)
    faces = []
    for i in range(rings - 1):
        for j in range(sectors):
            a = i * sectors + j
            b = i * sectors + (j + 1) % sectors
            c_ = (i + 1) * sectors + j
            d = (i + 1) * sectors + (j + 1) % sectors
            faces += [(a, b, d), (a, d, c_)]
    p0 = rings * sectors
    p1 = p0 + 1
    last = (rings - 1) * sectors
    for j in range(sectors):
        faces.append((p0, (j + 1) % sectors, j))
        faces.append((p1, last + j, last + (j + 1) % sectors))
    return np.array(verts), np.array(faces)


def _ellipsoid(center, radii, rings=RINGS, sectors=SECTORS):
    c = np.asarray(center, float)
    verts = [c + [0, 0, -radii[2]]]
    for i in range(1, rings - 1):
        phi = -np.pi / 2 + np.pi * i / (rings - 1)
        for j in range(sectors):
            a = 2 * np.pi * j / sectors
            verts.append(c + np.array(radii) * [np.cos(phi) * np.cos(a), np.cos(phi) * np.sin(a), np.sin(phi)])
    verts.append(c + [0, 0, radii[2]])
    faces = []
    top = len(verts) - 1
    for j in range(sectors):
        faces.append((0, 1 + (j + 1) % sectors, 1 + j))
    for i in range(rings - 3):
        for j in range(sectors):
            a = 1 + i * sectors + j
            b = 1 + i * sectors + (j + 1) % sectors
            c_ = 1 + (i + 1) * sectors + j
            d = 1 + (i + 1) * sectors + (j + 1) % sectors
            faces += [(a, b, d), (a, d, c_)]
    base = 1 + (rings - 3) * sectors
    for j in range(sectors):
        faces.append((top, base + j, base + (j + 1) % sectors))
    return np.array(verts), np.array(faces)


def _profile(knots, values, n=RINGS):
    return np.interp(np.linspace(0, 1, n), knots, values)


def segments(p: BodyParams):
    """Named body segments as (name, vertices, faces)."""
    h = p.height
    J = dict(zip(JOINT_NAMES, joint_positions(p)))
    g = p.limb_girth * h
    out = []
    tw, td = p.torso_width * h, p.torso_depth * h
    zs = [-0.13 * h, 0.52 * h]
    knots = [0.0, 0.25, 0.5, 0.78, 1.0]
    rx = _profile(knots, [0.15 * tw, 0.16 * tw, 0.13 * tw, 0.16 * tw, 0.13 * tw])
    ry = _profile(knots, [0.10 * td, 0.11 * td, 0.09 * td, 0.11 * td, 0.08 * td])
    # for a +z axis the tube frame is e1 = +y, e2 = -x
    out.append(("torso", *_tube([0, 0, zs[0]], [0, 0, zs[1]], ry, rx)))
    out.append(("neck", *_tube(J["neck"] + [0, 0, 0.01 * h], J["head"] + [0, 0, 0.04 * h],
                              np.full(RINGS, 0.05 * g), np.full(RINGS, 0.05 * g))))
    hs = p.head_size * h
    out.append(("head", *_ellipsoid(J["head"] + [0, 0.01 * h, 0.11 * hs], (0.08 * hs, 0.095 * hs, 0.115 * hs))))
    for side, sx in (("l", 1.0), ("r", -1.0)):
        sh, el, wr = J[f"{side}_shoulder"], J[f"{side}_elbow"], J[f"{side}_wrist"]
        r_up = _profile([0, 1], [0.055 * g, 0.042 * g])
        out.append((f"{side}_upper_arm", *_tube(sh, el, r_up, r_up)))
        r_lo = _profile([0, 1], [0.042 * g, 0.030 * g])
        out.append((f"{side}_forearm", *_tube(el, wr, r_lo, r_lo)))
        tip = wr + [sx * 0.17 * h * p.arm_length, 0, 0]
        out.append((f"{side}_hand", *_tube(wr, tip, np.full(RINGS, 0.045 * g), np.full(RINGS, 0.02 * g))))
        hip, kn, an = J[f"{side}_hip"], J[f"{side}_knee"], J[f"{side}_ankle"]
        r_th = _profile([0, 1], [0.085 * g, 0.055 * g])
        out.append((f"{side}_thigh", *_tube(hip + [0, 0, 0.03 * h], kn, r_th, r_th)))
        r_sh = _profile([0, 0.3, 1], [0.055 * g, 0.052 * g, 0.037 * g])
        out.append((f"{side}_shin", *_tube(kn, an, r_sh, r_sh)))
        out.append((f"{side}_foot", *_ellipsoid(an + [0, 0.06 * h * p.leg_length, -0.05 * h],
                                                 (0.045 * g, 0.12 * h * p.leg_length, 0.04 * h))))
    return out


def body_mesh(p: BodyParams = BodyParams()):
    """Vertices, triangles and a per-vertex segment label array."""
    verts, faces, labels = [], [], []
    names = []
    base = 0
    for k, (name, v, f) in enumerate(segments(p)):
        verts.append(v)
        faces.append(f + base)
        labels.append(np.full(len(v), k))
        names.append(name)
        base += len(v)
    return np.concatenate(verts), np.concatenate(faces), np.concatenate(labels), names


def body_height(vertices):
    return float(vertices[:, 2].max() - vertices[:, 2].min())
