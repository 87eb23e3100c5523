"""Reference actor for the procedural template body.

This is the one-time placement of the skeleton and the Gaussians inside
the reference mesh. ``scripts/make_reference_model.py`` runs it once and
writes ``data/reference_model.json``; library code loads that file.
"""

from __future__ import annotations

import numpy as np

from .model import ActorModel, Joint, Skeleton
from .procedural import JOINT_NAMES, JOINT_PARENTS, BodyParams, body_mesh, joint_positions

X, Y, Z = np.eye(3)

# (axis, min, max) per joint angle; 37 angles in total
DOFS = {
    "pelvis": [],
    "spine": [(X, -0.5, 0.8), (Y, -0.5, 0.5), (Z, -0.7, 0.7)],
    "neck": [(X, -0.6, 0.8), (Y, -0.5, 0.5)],
    "head": [(X, -0.6, 0.6), (Z, -1.0, 1.0)],
    "l_shoulder": [(X, -1.6, 1.6), (Y, -2.0, 2.0), (Z, -2.0, 2.0)],
    "l_elbow": [(Z, -0.1, 2.6), (Y, -0.6, 0.6)],
    "l_wrist": [(Z, -1.2, 1.2), (Y, -0.8, 0.8)],
    "r_shoulder": [(X, -1.6, 1.6), (Y, -2.0, 2.0), (Z, -2.0, 2.0)],
    "r_elbow": [(Z, -2.6, 0.1), (Y, -0.6, 0.6)],
    "r_wrist": [(Z, -1.2, 1.2), (Y, -0.8, 0.8)],
    "l_hip": [(X, -0.6, 2.0), (Y, -0.8, 0.8), (Z, -0.8, 0.8)],
    "l_knee": [(X, -2.5, 0.1), (Y, -0.3, 0.3)],
    "l_ankle": [(X, -0.8, 0.8), (Y, -0.4, 0.4), (Z, -0.5, 0.5)],
    "r_hip": [(X, -0.6, 2.0), (Y, -0.8, 0.8), (Z, -0.8, 0.8)],
    "r_knee": [(X, -2.5, 0.1), (Y, -0.3, 0.3)],
    "r_ankle": [(X, -0.8, 0.8), (Y, -0.4, 0.4), (Z, -0.5, 0.5)],
}
TORSO = ("pelvis", "spine", "neck", "head")
LIMBS = tuple(n for n in JOINT_NAMES if n not in TORSO)

# absorbance of one Gaussian along a ray through its centre
KAPPA = 2.2

SKIN = (0.85, 0.65, 0.52)
SHIRT = (0.2, 0.35, 0.7)
PANTS = (0.25, 0.25, 0.3)
SHOES = (0.1, 0.08, 0.06)


def build_skeleton(p: BodyParams = BodyParams()) -> Skeleton:
    pos = joint_positions(p)
    joints, lengths = [], []
    for k, name in enumerate(JOINT_NAMES):
        parent = JOINT_PARENTS[k]
        if parent < 0:
            direction, length = np.zeros(3), 0.0
        else:
            off = pos[k] - pos[parent]
            length = float(np.linalg.norm(off))
            direction = off / length
        spec = DOFS[name]
        axes = np.array([a for a, _, _ in spec]).reshape(-1, 3)
        limits = np.array([(lo, hi) for _, lo, hi in spec]).reshape(-1, 2)
        joints.append(Joint(name, parent, direction, axes, limits))
        lengths.append(length)
    return Skeleton(joints, np.array(lengths), TORSO, LIMBS)


def _along(start, end, n, sig0, sig1, offset=(0.0, 0.0, 0.0)):
    ts = (np.arange(n) + 0.5) / n
    start = np.asarray(start, float)
    end = np.asarray(end, float)
    pts = start[None] + ts[:, None] * (end - start)[None] + np.asarray(offset)
    return pts, sig0 + ts * (sig1 - sig0)


def placement(p: BodyParams = BodyParams()):
    """World rest-pose (bone, mean, sigma, color) tuples, 91 in total."""
    h = p.height
    J = dict(zip(JOINT_NAMES, joint_positions(p)))
    tw, td = p.torso_width * h, p.torso_depth * h
    g = p.limb_girth * h
    out = []

    def add(bone, pts, sigs, color):
        for x, s in zip(np.atleast_2d(pts), np.atleast_1d(sigs)):
            out.append((bone, np.asarray(x, float), float(s), color))

    # pelvis: two levels of 2x2
    for z in (-0.07 * h, 0.05 * h):
        for sx in (-1, 1):
            for sy in (-1, 1):
                add("pelvis", [[sx * 0.075 * tw, sy * 0.04 * td, z]], [0.058 * h], PANTS)
    # chest and abdomen: three levels of 2x2, plus two shoulder caps
    for z in (0.16 * h, 0.27 * h, 0.38 * h):
        for sx in (-1, 1):
            for sy in (-1, 1):
                add("spine", [[sx * 0.075 * tw, sy * 0.04 * td, z]], [0.058 * h], SHIRT)
    for sx in (-1, 1):
        add("spine", [[sx * 0.11 * tw * p.shoulder_width, 0.0, 0.46 * h]], [0.05 * h], SHIRT)
    nk = J["neck"]
    add("neck", [nk + [0, 0, 0.025 * h], nk + [0, 0, 0.075 * h]], [0.035 * g, 0.035 * g], SKIN)
    hs = p.head_size * h
    hc = J["head"] + [0, 0.01 * h, 0.11 * hs]
    for off in ([0, 0, -0.045], [0, 0, 0.05], [0.035, 0, 0], [-0.035, 0, 0], [0, 0.035, 0], [0, -0.035, 0]):
        add("head", [hc + np.array(off) * hs], [0.05 * hs], SKIN)
    add("head", [hc + np.array([0, 0.092, -0.01]) * hs], [0.018 * hs], SKIN)
    for side, sx in (("l", 1.0), ("r", -1.0)):
        sh, el, wr = J[f"{side}_shoulder"], J[f"{side}_elbow"], J[f"{side}_wrist"]
        add(f"{side}_shoulder", *_along(sh, el, 5, 0.036 * g, 0.03 * g), SHIRT)
        add(f"{side}_elbow", *_along(el, wr, 5, 0.028 * g, 0.022 * g), SKIN)
        tip = wr + [sx * 0.17 * h * p.arm_length, 0, 0]
        add(f"{side}_wrist", *_along(wr, tip, 3, 0.022 * g, 0.018 * g), SKIN)
        hip, kn, an = J[f"{side}_hip"], J[f"{side}_knee"], J[f"{side}_ankle"]
        add(f"{side}_hip", *_along(hip + [0, 0, 0.03 * h], kn, 7, 0.055 * g, 0.038 * g), PANTS)
        add(f"{side}_knee", *_along(kn, an, 6, 0.037 * g, 0.026 * g), PANTS)
        foot0 = an + [0, -0.03 * h * p.leg_length, -0.05 * h]
        foot1 = an + [0, 0.16 * h * p.leg_length, -0.05 * h]
        add(f"{side}_ankle", *_along(foot0, foot1, 4, 0.032 * g, 0.028 * g), SHOES)
    return out


def build_reference_model(p: BodyParams = BodyParams()) -> ActorModel:
    sk = build_skeleton(p)
    rest = joint_positions(p)
    names = list(JOINT_NAMES)
    bones, means, sigmas, colors = [], [], [], []
    for bone, x, s, color in placement(p):
        k = names.index(bone)
        bones.append(k)
        means.append(x - rest[k])
        sigmas.append(s)
        colors.append(color)
    sigmas = np.array(sigmas)
    dens = KAPPA / (np.sqrt(2 * np.pi) * sigmas)
    verts, faces, _, _ = body_mesh(p)
    return ActorModel(sk, np.array(means), sigmas, dens, np.array(bones), np.array(colors),
                      joint_sigma=0.05, mesh_vertices=verts, mesh_faces=faces,
                      meta={"template": p.as_dict()})


def procedural_meshes(n, seed=0, spread=0.08):
    rng = np.random.default_rng(seed)
    return [body_mesh(BodyParams.random(rng, spread))[0] for _ in range(n)]


def procedural_shape_space(model: ActorModel, n=60, seed=0, dim=50, spread=0.08):
    from .shape_space import build_from_meshes

    return build_from_meshes(model, model.mesh_vertices, procedural_meshes(n, seed, spread), dim)
