import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import two_link_skeleton
from volcap.errors import InvalidArgumentError
from volcap.model import (
    ActorModel, axis_angle_matrix, backprop_points, bone_length_jacobian, forward_kinematics,
    left_jacobian, point_jacobian, pose_gaussians, pose_jacobian, skew,
)


def random_pose(sk, rng, scale=0.5):
    p = rng.normal(0, scale, sk.n_dofs)
    p[:3] = rng.normal(0, 1, 3)
    return p


def test_default_skeleton_shape(ref_model):
    sk = ref_model.skeleton
    assert sk.n_joints == 16
    assert sk.n_dofs == 43
    assert ref_model.n_gaussians == 91


def test_identity_pose_is_rest(ref_model):
    sk = ref_model.skeleton
    kin = forward_kinematics(sk, sk.identity_pose())
    assert np.allclose(kin.rotations, np.eye(3))
    # rest joint positions are the sums of bone offsets along the chain
    for k in range(1, sk.n_joints):
        p = sk.parents[k]
        expect = kin.positions[p] + sk.bone_lengths[k] * sk.joints[k].direction
        assert np.allclose(kin.positions[k], expect, atol=1e-15)


def test_root_translation_shifts_everything(ref_model):
    sk = ref_model.skeleton
    rest = forward_kinematics(sk, sk.identity_pose())
    p = sk.identity_pose()
    p[:3] = (1.0, 0.0, 0.0)
    moved = forward_kinematics(sk, p)
    assert np.allclose(moved.positions, rest.positions + [1, 0, 0], atol=1e-15)
    assert np.allclose(moved.rotations, rest.rotations)


def test_two_link_oracle():
    sk = two_link_skeleton()
    theta = np.pi / 2
    kin = forward_kinematics(sk, np.array([0, 0, 0, 0, 0, 0, theta]))
    # hand-rolled planar chain
    c, s = np.cos(theta), np.sin(theta)
    tip = np.array([1.0, 0, 0]) + np.array([c, s, 0.0])
    assert np.allclose(kin.positions[2], tip, atol=1e-12)


def test_two_link_gaussian_follows_oracle():
    sk = two_link_skeleton()
    m = ActorModel(sk, [[0.5, 0.2, 0.0]], [0.1], [1.0], [1])
    theta = np.pi / 2
    posed = pose_gaussians(m, np.array([0, 0, 0, 0, 0, 0, theta]))
    # local (0.5, 0.2) rotated by 90 degrees about z, then offset by joint 1
    assert np.allclose(posed.means_world[0], [1.0 - 0.2, 0.5, 0.0], atol=1e-12)


def test_pose_dimension_mismatch(ref_model):
    with pytest.raises(InvalidArgumentError):
        forward_kinematics(ref_model.skeleton, np.zeros(42))


def test_invalid_bone_reference(ref_model):
    with pytest.raises(InvalidArgumentError):
        ActorModel(ref_model.skeleton, [[0, 0, 0]], [0.1], [1.0], [16])


def test_rodrigues_is_rotation(rng):
    for _ in range(20):
        R = axis_angle_matrix(rng.normal(size=3))
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert np.isclose(np.linalg.det(R), 1.0)


def test_left_jacobian_matches_fd(rng):
    w = rng.normal(size=3)
    J = left_jacobian(w)
    R = axis_angle_matrix(w)
    h = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        dR = (axis_angle_matrix(w + e) - axis_angle_matrix(w - e)) / (2 * h)
        assert np.allclose(dR @ R.T, skew(J[:, i]), atol=1e-8)


def test_rigidity_within_bone(ref_model, rng):
    m = ref_model
    rest = pose_gaussians(m, m.skeleton.identity_pose()).means_world
    posed = pose_gaussians(m, random_pose(m.skeleton, rng)).means_world
    for b in np.unique(m.bone_ids):
        idx = np.flatnonzero(m.bone_ids == b)
        d0 = np.linalg.norm(rest[idx, None] - rest[None, idx], axis=2)
        d1 = np.linalg.norm(posed[idx, None] - posed[None, idx], axis=2)
        assert np.allclose(d0, d1, atol=1e-12)


def test_sigma_and_density_copied(ref_model, rng):
    posed = pose_gaussians(ref_model, random_pose(ref_model.skeleton, rng))
    assert np.array_equal(posed.std_devs, ref_model.sigmas)
    assert np.array_equal(posed.densities, ref_model.densities)


def test_translation_columns_are_unit_axes(ref_model, rng):
    J = pose_jacobian(ref_model, random_pose(ref_model.skeleton, rng))
    assert np.allclose(J[:, :, :3], np.eye(3)[None])


def test_gaussian_on_rotation_axis_has_zero_column(ref_model):
    sk = ref_model.skeleton
    k = sk.index("l_shoulder")
    kin = forward_kinematics(sk, sk.identity_pose())
    # the first shoulder angle turns about the world x axis through the joint
    point = kin.positions[k] + [0.3, 0.0, 0.0]
    J = point_jacobian(sk, kin, [k], point[None])
    assert np.allclose(J[0, :, sk.dof_offsets[k]], 0.0, atol=1e-15)


def _fd_jacobian(model, pose, h=1e-6):
    cols = []
    for d in range(len(pose)):
        e = np.zeros(len(pose))
        e[d] = h
        plus = pose_gaussians(model, pose + e).means_world
        minus = pose_gaussians(model, pose - e).means_world
        cols.append((plus - minus) / (2 * h))
    return np.stack(cols, axis=2)


def test_pose_jacobian_fd_100_draws(ref_model):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        pose = random_pose(ref_model.skeleton, rng)
        A = pose_jacobian(ref_model, pose)
        F = _fd_jacobian(ref_model, pose)
        worst = max(worst, np.abs(A - F).max() / np.abs(F).max())
    assert worst <= 1e-5


def test_backprop_matches_jacobian(ref_model, rng):
    sk = ref_model.skeleton
    pose = random_pose(sk, rng)
    kin = forward_kinematics(sk, pose)
    pts = pose_gaussians(ref_model, pose, kin).means_world
    g = rng.normal(size=pts.shape)
    gp, gb, gl = backprop_points(sk, kin, ref_model.bone_ids, pts, g)
    J = point_jacobian(sk, kin, ref_model.bone_ids, pts)
    assert np.allclose(gp, np.einsum("nc,ncd->d", g, J), atol=1e-10)
    Jb = bone_length_jacobian(sk, kin, ref_model.bone_ids)
    assert np.allclose(gb, np.einsum("nc,ncj->j", g, Jb), atol=1e-10)
    R = kin.rotations[ref_model.bone_ids]
    assert np.allclose(gl, np.einsum("nji,nj->ni", R, g))


def test_bone_length_jacobian_fd(ref_model, rng):
    sk = ref_model.skeleton
    pose = random_pose(sk, rng)
    kin = forward_kinematics(sk, pose)
    Jb = bone_length_jacobian(sk, kin, ref_model.bone_ids)
    h = 1e-6
    for j in (3, 6, 12):
        b = sk.bone_lengths.copy()
        b[j] += h
        plus = pose_gaussians(ref_model.with_shape(ref_model.means_local, ref_model.sigmas,
                                                   ref_model.densities, b), pose).means_world
        b[j] -= 2 * h
        minus = pose_gaussians(ref_model.with_shape(ref_model.means_local, ref_model.sigmas,
                                                    ref_model.densities, b), pose).means_world
        assert np.allclose((plus - minus) / (2 * h), Jb[:, :, j], atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1.0, 1.0), min_size=43, max_size=43))
def test_fk_composition_with_identity(ref_model, values):
    sk = ref_model.skeleton
    p = np.array(values)
    a = forward_kinematics(sk, p)
    b = forward_kinematics(sk, p + sk.identity_pose())
    assert np.array_equal(a.positions, b.positions)
    # every joint frame stays a proper rotation
    for R in a.rotations:
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
