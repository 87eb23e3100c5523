"""Statistical shape space over Gaussian parameters and bone lengths.

A reference actor (skeleton + Gaussians placed inside a reference mesh)
is transferred to every mesh of a registered database by per-Gaussian
weighted Procrustes alignment. PCA over the stacked per-instance vectors
then gives linear maps from a few coefficients to all Gaussian parameters
and bone lengths. The same density weights drive volumetric skinning of
the reference surface.

Stacked layout (fixed, recorded in saved files)::

    [mu_local (Q x 3, row major), sigma (Q), density (Q), bone_length (J)]
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError, InvalidArgumentError
from .model import ActorModel, forward_kinematics

SIGMA_FLOOR = 1e-4
JOINT_SIGMA = 0.10


class ShapeWarning(UserWarning):
    pass


def layout_string(q, j):
    return f"mu_local[{q},3];sigma[{q}];density[{q}];bone_length[{j}]"


def stack(means_local, sigmas, densities, bone_lengths):
    return np.concatenate([np.ravel(means_local), sigmas, densities, bone_lengths]).astype(float)


def unstack(vec, q):
    vec = np.asarray(vec, dtype=float)
    return vec[: 3 * q].reshape(q, 3), vec[3 * q : 4 * q], vec[4 * q : 5 * q], vec[5 * q :]


@dataclass
class SkinningWeights:
    """Per-vertex normalized weights, stored dense as (V, Q)."""

    weights: np.ndarray

    def as_lists(self):
        return [[(int(q), float(w[q])) for q in np.nonzero(w)[0]] for w in self.weights]

    def column(self, q):
        return self.weights[:, q]


def density_weights(vertices, means, sigmas, densities, rel_threshold=1e-6) -> SkinningWeights:
    """weight(v, q) proportional to c_q exp(-|x_v - mu_q|^2 / (2 sigma_q^2)).

    Entries below ``rel_threshold`` of the vertex's largest weight are
    dropped before normalization.
    """
    vertices = np.asarray(vertices, float)
    means = np.asarray(means, float)
    sigmas = np.asarray(sigmas, float)
    densities = np.asarray(densities, float)
    d2 = np.sum((vertices[:, None, :] - means[None, :, :]) ** 2, axis=2)
    with np.errstate(divide="ignore"):
        logw = np.log(densities)[None, :] - d2 / (2 * sigmas[None, :] ** 2)
    top = logw.max(axis=1, keepdims=True)
    dead = ~np.isfinite(top[:, 0])
    w = np.zeros_like(logw)
    ok = ~dead
    w[ok] = np.exp(logw[ok] - top[ok])
    w[w < rel_threshold] = 0.0
    if np.any(dead):
        warnings.warn(f"{int(dead.sum())} vertices have no Gaussian support; "
                      "assigned to the nearest Gaussian", ShapeWarning, stacklevel=2)
        w[dead, np.argmin(d2[dead], axis=1)] = 1.0
    w /= w.sum(axis=1, keepdims=True)
    return SkinningWeights(w)


@dataclass
class Similarity:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points):
        return self.scale * np.asarray(points, float) @ self.rotation.T + self.translation

    @classmethod
    def identity(cls):
        return cls(1.0, np.eye(3), np.zeros(3))


def procrustes_similarity(source, target, weights=None, name=None) -> Similarity:
    """Weighted least-squares similarity transform mapping source onto target.

    Minimizes sum_i w_i |s R x_i + t - y_i|^2 with a proper rotation.
    """
    x = np.asarray(source, float)
    y = np.asarray(target, float)
    label = f" for {name}" if name is not None else ""
    if x.shape != y.shape or x.ndim != 2 or x.shape[1] != 3:
        raise InvalidArgumentError(f"point sets must both be (N, 3){label}")
    w = np.ones(len(x)) if weights is None else np.asarray(weights, float)
    if np.any(w < 0) or w.sum() <= 0:
        raise DegenerateGeometryError(f"weights must be >= 0 and not all zero{label}")
    if np.count_nonzero(w) < 3:
        raise DegenerateGeometryError(f"need at least 3 weighted points{label}")
    w = w / w.sum()
    mx = w @ x
    my = w @ y
    X = x - mx
    Y = y - my
    cov_x = (X * w[:, None]).T @ X
    ev = np.linalg.eigvalsh(cov_x)
    if ev[-1] <= 1e-20 or ev[-2] <= 1e-10 * ev[-1]:
        raise DegenerateGeometryError(f"source points are coincident or collinear{label}")
    M = (Y * w[:, None]).T @ X
    U, D, Vt = np.linalg.svd(M)
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = (U * S) @ Vt
    s = float(np.sum(D * S) / np.trace(cov_x))
    t = my - s * R @ mx
    return Similarity(s, R, t)


def _weights_for(model: ActorModel, ref_vertices, weights=None):
    if weights is None:
        weights = density_weights(ref_vertices, model.rest_means(), model.sigmas, model.densities)
    return weights


def register_instance(model: ActorModel, ref_vertices, inst_vertices, weights=None):
    """Transfer the reference Gaussians to an instance mesh.

    Returns world-frame rest means (Q, 3), sigmas (Q,), densities (Q,)
    and the per-Gaussian similarity transforms.
    """
    ref_vertices = np.asarray(ref_vertices, float)
    inst_vertices = np.asarray(inst_vertices, float)
    if ref_vertices.shape != inst_vertices.shape:
        raise InvalidArgumentError("instance mesh is not in vertex correspondence with the reference")
    weights = _weights_for(model, ref_vertices, weights)
    ref_means = model.rest_means()
    means = np.empty_like(ref_means)
    sigmas = np.empty(model.n_gaussians)
    transforms = []
    for q in range(model.n_gaussians):
        w = weights.weights[:, q]
        sel = w > 0
        T = procrustes_similarity(ref_vertices[sel], inst_vertices[sel], w[sel], name=f"Gaussian {q}")
        means[q] = T.apply(ref_means[q])
        sigmas[q] = T.scale * model.sigmas[q]
        transforms.append(T)
    return means, sigmas, model.densities.copy(), transforms


def joint_weights(ref_joints, ref_vertices, sigma=JOINT_SIGMA):
    n = len(ref_joints)
    return density_weights(ref_vertices, ref_joints, np.full(n, sigma), np.ones(n))


def register_skeleton(model: ActorModel, ref_vertices, inst_vertices, weights=None):
    """Instance joint positions and bone lengths from joint-centred
    Gaussians (sigma 10 cm) aligned like the volume Gaussians."""
    sk = model.skeleton
    ref_joints = forward_kinematics(sk, sk.identity_pose()).positions
    if weights is None:
        weights = joint_weights(ref_joints, ref_vertices)
    joints = np.empty_like(ref_joints)
    for j in range(sk.n_joints):
        w = weights.weights[:, j]
        sel = w > 0
        T = procrustes_similarity(np.asarray(ref_vertices)[sel], np.asarray(inst_vertices)[sel], w[sel],
                                  name=f"joint {sk.joints[j].name!r}")
        joints[j] = T.apply(ref_joints[j])
    b = np.zeros(sk.n_joints)
    for j in range(1, sk.n_joints):
        b[j] = np.linalg.norm(joints[j] - joints[sk.parents[j]])
    return joints, b


def register_mesh(model: ActorModel, ref_vertices, inst_vertices, gauss_weights=None, joint_w=None):
    """Full per-instance registration: returns the stacked (gamma_i; b_i)."""
    means_w, sigmas, dens, _ = register_instance(model, ref_vertices, inst_vertices, gauss_weights)
    joints, b = register_skeleton(model, ref_vertices, inst_vertices, joint_w)
    sk = model.skeleton.with_bone_lengths(b)
    rest = forward_kinematics(sk, sk.identity_pose()).positions
    # local offsets relative to the instance skeleton posed at the origin
    local = means_w - joints[0] - rest[model.bone_ids]
    return stack(local, sigmas, dens, b)


@dataclass
class ShapeSpace:
    mean: np.ndarray
    basis: np.ndarray  # (n, dim), orthonormal columns
    coeff_bounds: np.ndarray
    coeff_std: np.ndarray
    n_gaussians: int
    n_bones: int
    n_train: int

    @property
    def dim(self):
        return self.basis.shape[1]

    @property
    def layout(self):
        return layout_string(self.n_gaussians, self.n_bones)

    def project(self, stacked):
        return (np.asarray(stacked, float) - self.mean) @ self.basis

    def reconstruct(self, s):
        return self.mean + self.basis @ np.asarray(s, float)

    def zeros(self):
        return np.zeros(self.dim)

    def truncated(self, dim):
        return ShapeSpace(self.mean, self.basis[:, :dim], self.coeff_bounds[:dim], self.coeff_std[:dim],
                          self.n_gaussians, self.n_bones, self.n_train)


def build_shape_space(data, n_gaussians, n_bones, dim=50) -> ShapeSpace:
    """PCA over the rows of ``data`` (one stacked instance per row)."""
    X = np.atleast_2d(np.asarray(data, float))
    n_inst, n = X.shape
    if n_inst < 2:
        raise InvalidArgumentError("need at least 2 instances")
    if n != 5 * n_gaussians + n_bones:
        raise InvalidArgumentError(f"rows must have {5 * n_gaussians + n_bones} entries, got {n}")
    if dim > n_inst - 1:
        warnings.warn(f"requested {dim} components from {n_inst} instances; truncating to {n_inst - 1}",
                      ShapeWarning, stacklevel=2)
        dim = n_inst - 1
    mean = X.mean(axis=0)
    Xc = X - mean
    _, S, Vt = np.linalg.svd(Xc, full_matrices=False)
    basis = Vt[:dim].T.copy()
    # deterministic sign: largest-magnitude entry positive
    flip = np.sign(basis[np.argmax(np.abs(basis), axis=0), np.arange(dim)])
    flip[flip == 0] = 1.0
    basis *= flip
    coeffs = Xc @ basis
    bounds = np.abs(coeffs).max(axis=0)
    std = S[:dim] / np.sqrt(n_inst - 1)
    return ShapeSpace(mean, basis, bounds, std, n_gaussians, n_bones, n_inst)


def evaluate_shape(space: ShapeSpace, s):
    """(means_local, sigmas, densities, bone_lengths) for coefficients s."""
    s = np.asarray(s, float)
    if s.shape != (space.dim,):
        raise InvalidArgumentError(f"expected {space.dim} shape coefficients, got shape {s.shape}")
    mu, sig, dens, b = unstack(space.reconstruct(s), space.n_gaussians)
    if np.any(sig < SIGMA_FLOOR):
        warnings.warn("shape coefficients produce non-physical sigma; clamped", ShapeWarning, stacklevel=2)
        sig = np.maximum(sig, SIGMA_FLOOR)
    return mu, sig, np.maximum(dens, 0.0), np.maximum(b, 0.0)


def shaped_model(model: ActorModel, space: ShapeSpace, s) -> ActorModel:
    return model.with_shape(*evaluate_shape(space, s))


def gaussian_transforms(ref_means, ref_sigmas, target_means, target_sigmas, rotations):
    """Per-Gaussian similarity taking the reference rest Gaussian to the target:
    T_q(x) = mu_t + R_q (sigma_t / sigma_r) (x - mu_r)."""
    scale = np.asarray(target_sigmas, float) / np.asarray(ref_sigmas, float)
    R = np.asarray(rotations, float)
    t = np.asarray(target_means, float) - scale[:, None] * np.einsum("qij,qj->qi", R, ref_means)
    return scale, R, t


def skin_mesh(vertices, weights: SkinningWeights, scales, rotations, translations):
    """Each vertex becomes sum_q w(v, q) T_q(x_v)."""
    W = weights.weights
    x = np.asarray(vertices, float)
    ws = W * np.asarray(scales, float)[None, :]
    return np.einsum("vq,qij,vj->vi", ws, rotations, x) + W @ np.asarray(translations, float)


def posed_mesh(ref_model: ActorModel, model: ActorModel, pose, weights=None):
    """Skin the reference surface to ``model`` (shape) in ``pose``."""
    from .model import pose_gaussians

    if ref_model.mesh_vertices is None:
        raise InvalidArgumentError("reference model carries no surface mesh")
    verts = ref_model.mesh_vertices
    if weights is None:
        weights = density_weights(verts, ref_model.rest_means(), ref_model.sigmas, ref_model.densities)
    kin = forward_kinematics(model.skeleton, pose)
    posed = pose_gaussians(model, pose, kin)
    scale, R, t = gaussian_transforms(ref_model.rest_means(), ref_model.sigmas, posed.means_world,
                                      model.sigmas, kin.rotations[model.bone_ids])
    return skin_mesh(verts, weights, scale, R, t)


def build_from_meshes(model: ActorModel, ref_vertices, meshes, dim=50) -> ShapeSpace:
    """Register the reference to every instance mesh and run PCA."""
    gw = density_weights(ref_vertices, model.rest_means(), model.sigmas, model.densities)
    ref_joints = forward_kinematics(model.skeleton, model.skeleton.identity_pose()).positions
    jw = joint_weights(ref_joints, ref_vertices)
    rows = [register_mesh(model, ref_vertices, m, gw, jw) for m in meshes]
    return build_shape_space(np.array(rows), model.n_gaussians, model.skeleton.n_joints, dim)
