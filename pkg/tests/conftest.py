import numpy as np
import pytest

from volcap.io import load_default_model
from volcap.model import ActorModel, Joint, Skeleton
from volcap.reference import procedural_shape_space
from volcap.shape_space import ShapeSpace


@pytest.fixture(scope="session")
def ref_model():
    return load_default_model()


@pytest.fixture(scope="session")
def shape_space(ref_model):
    return procedural_shape_space(ref_model, n=60, seed=0, dim=50)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def two_link_skeleton():
    """Root at the origin, joint 1 one metre along +x rotating about z,
    tip one metre further along +x."""
    z = np.array([[0.0, 0.0, 1.0]])
    joints = [
        Joint("root", -1, np.zeros(3), np.zeros((0, 3)), np.zeros((0, 2))),
        Joint("j1", 0, np.array([1.0, 0, 0]), z, np.array([[-3.0, 3.0]])),
        Joint("tip", 1, np.array([1.0, 0, 0]), np.zeros((0, 3)), np.zeros((0, 2))),
    ]
    return Skeleton(joints, np.array([0.0, 1.0, 1.0]))


def toy_model(ref_model, n=8, seed=0):
    """The reference skeleton carrying ``n`` Gaussians spread over its bones."""
    rng = np.random.default_rng(seed)
    bones = rng.choice(np.arange(ref_model.skeleton.n_joints), n, replace=False)
    means = rng.normal(0, 0.05, (n, 3))
    sigmas = rng.uniform(0.06, 0.12, n)
    dens = 2.0 / (np.sqrt(2 * np.pi) * sigmas)
    return ActorModel(ref_model.skeleton, means, sigmas, dens, bones)


def random_space(model, dim=50, seed=0, scale=0.01):
    """Random orthonormal shape basis around the model's own parameters."""
    rng = np.random.default_rng(seed)
    q = model.n_gaussians
    mean = np.concatenate([model.means_local.ravel(), model.sigmas, model.densities,
                           model.skeleton.bone_lengths])
    n = len(mean)
    basis, _ = np.linalg.qr(rng.standard_normal((n, dim)))
    # keep the basis orthonormal; shrink coefficient ranges instead
    std = np.full(dim, scale)
    return ShapeSpace(mean, basis, 3 * std, std, q, model.skeleton.n_joints, dim + 1)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
