"""Articulated sum-of-Gaussians actor: skeleton, kinematics and posing.

Pose vectors hold 6 root parameters (world translation followed by an
axis-angle rotation) and then the joint angles of every joint in file
order. Every joint angle rotates about a fixed axis of the joint frame;
a joint with several angles composes them left to right. The rest pose is
the T-pose with all joint frames aligned to the world axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidArgumentError

ROOT_DOFS = 6


def skew(v):
    """Cross-product matrix of one or many 3-vectors."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def axis_angle_matrix(omega):
    """Rodrigues' formula."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * K @ K


def axis_rotation(axis, angle):
    axis = np.asarray(axis, dtype=float)
    return axis_angle_matrix(axis * angle)


def left_jacobian(omega):
    """Left Jacobian of SO(3): column i is the world-frame rotation
    velocity produced by d(omega_i), i.e. dR/domega_i @ R.T = skew(J[:, i])."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < 1e-5:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    return (
        np.eye(3)
        + (1.0 - np.cos(theta)) / theta**2 * K
        + (theta - np.sin(theta)) / theta**3 * K @ K
    )


@dataclass(frozen=True)
class Joint:
    name: str
    parent: int
    direction: np.ndarray
    dof_axes: np.ndarray
    limits: np.ndarray

    @property
    def n_dofs(self):
        return len(self.dof_axes)


@dataclass
class Skeleton:
    joints: list
    bone_lengths: np.ndarray
    torso: tuple = ()
    limbs: tuple = ()

    def __post_init__(self):
        self.bone_lengths = np.asarray(self.bone_lengths, dtype=float)
        n = len(self.joints)
        if self.bone_lengths.shape != (n,):
            raise InvalidArgumentError(
                f"expected {n} bone lengths, got shape {self.bone_lengths.shape}"
            )
        if n == 0 or self.joints[0].parent != -1:
            raise InvalidArgumentError("joint 0 must be the root (parent -1)")
        for i, j in enumerate(self.joints[1:], start=1):
            # parent-before-child ordering rules out cycles
            if not 0 <= j.parent < i:
                raise InvalidArgumentError(
                    f"joint {j.name!r}: parent index {j.parent} must precede it"
                )
        if np.any(self.bone_lengths < 0):
            raise InvalidArgumentError("bone lengths must be >= 0")
        for j in self.joints:
            if len(j.limits) != j.n_dofs:
                raise InvalidArgumentError(f"joint {j.name!r}: one limit pair per angle")
            if j.n_dofs and np.any(j.limits[:, 0] > j.limits[:, 1]):
                raise InvalidArgumentError(f"joint {j.name!r}: limit min > max")
        self.parents = np.array([j.parent for j in self.joints])
        counts = [j.n_dofs for j in self.joints]
        self.dof_offsets = ROOT_DOFS + np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(int)
        self.n_dofs = ROOT_DOFS + int(sum(counts))
        anc = np.zeros((n, n), dtype=bool)
        for k in range(n):
            j = k
            while j >= 0:
                anc[k, j] = True
                j = self.parents[j]
        # anc[k, j]: joint j lies on the chain root..k (inclusive)
        self.ancestors = anc
        dof_joint = np.zeros(self.n_dofs, dtype=int)
        for k, j in enumerate(self.joints):
            dof_joint[self.dof_offsets[k] : self.dof_offsets[k] + j.n_dofs] = k
        self.dof_joint = dof_joint

    @property
    def n_joints(self):
        return len(self.joints)

    @property
    def names(self):
        return [j.name for j in self.joints]

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise InvalidArgumentError(f"unknown joint {name!r}") from None

    def joint_limits(self):
        """(n_dofs, 2) table; root parameters are unbounded."""
        lim = np.tile([-np.inf, np.inf], (self.n_dofs, 1))
        for k, j in enumerate(self.joints):
            if j.n_dofs:
                lim[self.dof_offsets[k] : self.dof_offsets[k] + j.n_dofs] = j.limits
        return lim

    def dof_mask(self, joint_names, root=True):
        """Boolean mask over the pose vector for the given joints."""
        mask = np.zeros(self.n_dofs, dtype=bool)
        if root:
            mask[:ROOT_DOFS] = True
        for name in joint_names:
            k = self.index(name)
            mask[self.dof_offsets[k] : self.dof_offsets[k] + self.joints[k].n_dofs] = True
        return mask

    def with_bone_lengths(self, b):
        return replace(self, bone_lengths=np.asarray(b, dtype=float))

    def identity_pose(self):
        return np.zeros(self.n_dofs)


@dataclass
class Kinematics:
    """World-frame result of forward kinematics.

    ``dof_axes``/``dof_pivots`` describe every pose parameter as an
    instantaneous motion: rotation about ``axis`` through ``pivot``, or a
    translation along ``axis`` for the first three root parameters.
    """

    rotations: np.ndarray  # (J, 3, 3)
    positions: np.ndarray  # (J, 3)
    bone_dirs: np.ndarray  # (J, 3): d(position_j)/d(bone_length_j)
    dof_axes: np.ndarray  # (n_dofs, 3)
    dof_pivots: np.ndarray  # (n_dofs, 3)


def forward_kinematics(skeleton: Skeleton, pose) -> Kinematics:
    pose = np.asarray(pose, dtype=float)
    if pose.shape != (skeleton.n_dofs,):
        raise InvalidArgumentError(
            f"pose must have {skeleton.n_dofs} entries, got shape {pose.shape}"
        )
    n = skeleton.n_joints
    R = np.empty((n, 3, 3))
    t = np.empty((n, 3))
    bone_dirs = np.zeros((n, 3))
    axes = np.zeros((skeleton.n_dofs, 3))
    pivots = np.zeros((skeleton.n_dofs, 3))

    omega = pose[3:6]
    R[0] = axis_angle_matrix(omega)
    t[0] = pose[:3]
    axes[:3] = np.eye(3)
    axes[3:6] = left_jacobian(omega).T
    pivots[3:6] = t[0]
    # root's own joint angles (if any) follow the same rule as other joints
    for k, joint in enumerate(skeleton.joints):
        if k == 0:
            Rk = R[0]
        else:
            p = joint.parent
            bone_dirs[k] = R[p] @ joint.direction
            t[k] = t[p] + skeleton.bone_lengths[k] * bone_dirs[k]
            Rk = R[p]
        off = skeleton.dof_offsets[k]
        for i, a in enumerate(joint.dof_axes):
            axes[off + i] = Rk @ a
            pivots[off + i] = t[k]
            Rk = Rk @ axis_rotation(a, pose[off + i])
        R[k] = Rk
    return Kinematics(R, t, bone_dirs, axes, pivots)


@dataclass
class GaussianBlob:
    mean_local: np.ndarray
    std_dev: float
    density: float
    bone_id: int
    color: Optional[np.ndarray] = None


@dataclass
class ActorModel:
    """Skeleton plus the Gaussians rigidly attached to its bones.

    Gaussian data is stored as parallel arrays; ``blobs()`` gives the
    per-element view.
    """

    skeleton: Skeleton
    means_local: np.ndarray  # (Q, 3)
    sigmas: np.ndarray  # (Q,)
    densities: np.ndarray  # (Q,)
    bone_ids: np.ndarray  # (Q,)
    colors: Optional[np.ndarray] = None  # (Q, 3)
    joint_sigma: float = 0.05
    mesh_vertices: Optional[np.ndarray] = None
    mesh_faces: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.means_local = np.asarray(self.means_local, dtype=float).reshape(-1, 3)
        self.sigmas = np.asarray(self.sigmas, dtype=float)
        self.densities = np.asarray(self.densities, dtype=float)
        self.bone_ids = np.asarray(self.bone_ids, dtype=int)
        q = len(self.means_local)
        for name in ("sigmas", "densities", "bone_ids"):
            if getattr(self, name).shape != (q,):
                raise InvalidArgumentError(f"{name} must have {q} entries")
        if q and (self.bone_ids.min() < 0 or self.bone_ids.max() >= self.skeleton.n_joints):
            raise InvalidArgumentError("Gaussian attached to a nonexistent bone")
        if np.any(self.sigmas <= 0):
            raise InvalidArgumentError("std_dev must be > 0")
        if np.any(self.densities < 0):
            raise InvalidArgumentError("density must be >= 0")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=float).reshape(q, 3)

    @property
    def n_gaussians(self):
        return len(self.sigmas)

    def blobs(self):
        return [
            GaussianBlob(
                self.means_local[i],
                float(self.sigmas[i]),
                float(self.densities[i]),
                int(self.bone_ids[i]),
                None if self.colors is None else self.colors[i],
            )
            for i in range(self.n_gaussians)
        ]

    def with_shape(self, means_local, sigmas, densities, bone_lengths):
        return replace(
            self,
            skeleton=self.skeleton.with_bone_lengths(bone_lengths),
            means_local=means_local,
            sigmas=sigmas,
            densities=densities,
        )

    def rest_means(self):
        """World means in the identity pose."""
        return pose_gaussians(self, self.skeleton.identity_pose()).means_world


@dataclass
class PosedGaussians:
    means_world: np.ndarray
    std_devs: np.ndarray
    densities: np.ndarray
    jacobians: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.std_devs)


def pose_gaussians(model: ActorModel, pose, kin: Optional[Kinematics] = None) -> PosedGaussians:
    if kin is None:
        kin = forward_kinematics(model.skeleton, pose)
    R = kin.rotations[model.bone_ids]
    means = np.einsum("qij,qj->qi", R, model.means_local) + kin.positions[model.bone_ids]
    return PosedGaussians(means, model.sigmas.copy(), model.densities.copy())


def point_jacobian(skeleton: Skeleton, kin: Kinematics, bone_ids, points):
    """d(points)/d(pose) for world points rigidly attached to ``bone_ids``.

    Returns an array of shape (N, 3, n_dofs).
    """
    bone_ids = np.asarray(bone_ids)
    points = np.asarray(points, dtype=float)
    owner = skeleton.dof_joint
    # DOF d moves point i iff its joint is an ancestor-or-self of the bone
    active = skeleton.ancestors[bone_ids][:, owner]  # (N, n_dofs)
    active[:, :ROOT_DOFS] = True
    lever = points[:, None, :] - kin.dof_pivots[None, :, :]
    J = np.cross(kin.dof_axes[None, :, :], lever)
    J[:, :3, :] = np.eye(3)[None]
    J *= active[:, :, None]
    return np.transpose(J, (0, 2, 1))


def pose_jacobian(model: ActorModel, pose) -> np.ndarray:
    """Analytic d(mean_world)/d(pose), shape (Q, 3, n_dofs)."""
    kin = forward_kinematics(model.skeleton, pose)
    posed = pose_gaussians(model, pose, kin)
    return point_jacobian(model.skeleton, kin, model.bone_ids, posed.means_world)


def bone_length_jacobian(skeleton: Skeleton, kin: Kinematics, bone_ids):
    """d(points)/d(bone_lengths) for points attached to ``bone_ids``: (N, 3, J)."""
    mask = skeleton.ancestors[np.asarray(bone_ids)].copy()
    mask[:, 0] = False
    return np.einsum("nj,jc->ncj", mask.astype(float), kin.bone_dirs)


def backprop_points(skeleton: Skeleton, kin: Kinematics, bone_ids, points, grad_points):
    """Reverse-mode chain rule from world-point gradients to parameters.

    Given dE/dx_i for points x_i attached to ``bone_ids`` returns
    ``(grad_pose, grad_bone_lengths, grad_local)`` where ``grad_local`` is
    dE/d(local offset) of every point.
    """
    bone_ids = np.asarray(bone_ids)
    g = np.asarray(grad_points, dtype=float)
    n = skeleton.n_joints
    force = np.zeros((n, 3))
    torque = np.zeros((n, 3))
    np.add.at(force, bone_ids, g)
    np.add.at(torque, bone_ids, np.cross(points, g))
    for k in range(n - 1, 0, -1):
        p = skeleton.parents[k]
        force[p] += force[k]
        torque[p] += torque[k]
    owner = skeleton.dof_joint
    f = force[owner]
    tau = torque[owner] - np.cross(kin.dof_pivots, f)
    grad_pose = np.einsum("dc,dc->d", kin.dof_axes, tau)
    grad_pose[:3] = force[0]
    grad_b = np.einsum("jc,jc->j", kin.bone_dirs, force)
    grad_b[0] = 0.0
    grad_local = np.einsum("qji,qj->qi", kin.rotations[bone_ids], g)
    return grad_pose, grad_b, grad_local


def joint_positions(skeleton: Skeleton, pose) -> np.ndarray:
    return forward_kinematics(skeleton, pose).positions
