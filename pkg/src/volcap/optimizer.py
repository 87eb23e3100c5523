"""Conditioned gradient descent and the two-stage solve.

Every parameter gets its own step scale: the inverse of a running RMS of
its gradient (exponential average over accepted iterates, clamped to
[1e-3, 1e3]). A global step length grows after accepted steps and halves
(with rollback) after rejected ones, so the accepted energy sequence
never increases.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .energy import EnergyConfig, FitProblem, HeatMapSet, total_energy
from .errors import InitializationError, InvalidArgumentError, NumericalError
from .model import ROOT_DOFS

log = logging.getLogger(__name__)

COND_MIN, COND_MAX = 1e-3, 1e3
GROW, SHRINK = 1.2, 0.5
RMS_DECAY = 0.9


@dataclass
class SolveState:
    P: np.ndarray
    s: np.ndarray
    cond: Optional[np.ndarray] = None
    step: float = 0.05
    iteration: int = 0
    energy: float = np.inf
    trace: list = field(default_factory=list)
    last_grad: Optional[np.ndarray] = None

    @property
    def theta(self):
        return np.concatenate([self.P.ravel(), self.s])

    def set_theta(self, theta):
        n = self.P.size
        self.P = theta[:n].reshape(self.P.shape).copy()
        self.s = theta[n:].copy()


@dataclass
class StagePlan:
    stage: int
    mask: np.ndarray  # over theta = (P.ravel(), s)
    max_iter: int = 300
    rel_tol: float = 1e-6
    window: int = 10
    grad_tol: float = 1e-12
    label: str = ""

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise InvalidArgumentError(f"stage must be 1 or 2, got {self.stage!r}")
        self.mask = np.asarray(self.mask, bool)


def param_names(skeleton, n_frames, shape_dim):
    per = ["root_tx", "root_ty", "root_tz", "root_rx", "root_ry", "root_rz"]
    for k, j in enumerate(skeleton.joints):
        per += [f"{j.name}[{i}]" for i in range(j.n_dofs)]
    names = [f"frame {t} {p}" for t in range(n_frames) for p in per]
    return names + [f"shape {k}" for k in range(shape_dim)]


def conditioned_gradient_step(theta, grad, cond, step, mask=None):
    """Proposed parameters theta - step * cond * grad on the active mask."""
    delta = -step * cond * grad
    if mask is not None:
        delta = np.where(mask, delta, 0.0)
    return theta + delta


def _check_finite(grad, names):
    bad = np.flatnonzero(~np.isfinite(grad))
    if len(bad):
        which = names[bad[0]] if names is not None else f"parameter {bad[0]}"
        raise NumericalError(f"non-finite gradient for {which}")


def _conditioner(mean_sq):
    return np.clip(1.0 / np.sqrt(np.maximum(mean_sq, 1e-300)), COND_MIN, COND_MAX)


def minimize(fn: Callable, theta0, mask, max_iter=300, rel_tol=1e-6, window=10, step=0.05,
             grad_tol=1e-12, names=None, trace=None, label="", conditioned=True):
    """Conditioned descent on ``fn(theta) -> (energy, grad)``.

    ``conditioned=False`` keeps every scale at 1 (plain adaptive-step
    descent, for comparison).
    Returns (theta, energy, iterations). ``trace`` (a list) receives one
    dict per iteration.
    """
    theta = np.array(theta0, dtype=float)
    mask = np.asarray(mask, bool)
    E, g = fn(theta)
    if not np.isfinite(E):
        raise NumericalError("initial energy is not finite")
    _check_finite(g, names)
    g = np.where(mask, g, 0.0)
    sq = g * g
    cond = _conditioner(sq) if conditioned else np.ones_like(g)
    history = [E]
    it = 0
    if trace is not None:
        trace.append({"phase": label, "iteration": 0, "energy": E, "step": step, "accepted": 1})
    while it < max_iter:
        if np.max(np.abs(g), initial=0.0) <= grad_tol:
            break
        it += 1
        cand = conditioned_gradient_step(theta, g, cond, step, mask)
        E_new, g_new = fn(cand)
        accepted = bool(np.isfinite(E_new) and E_new < E)
        if accepted:
            _check_finite(g_new, names)
            g_new = np.where(mask, g_new, 0.0)
            if conditioned:
                sq = RMS_DECAY * sq + (1.0 - RMS_DECAY) * g_new * g_new
                cond = _conditioner(sq)
            theta, E, g = cand, E_new, g_new
            step *= GROW
        else:
            step *= SHRINK
        history.append(E)
        if trace is not None:
            trace.append({"phase": label, "iteration": it, "energy": E, "step": step,
                          "accepted": int(accepted)})
        if len(history) > window:
            old = history[-1 - window]
            if old - E <= rel_tol * max(abs(old), 1e-300):
                break
        if step < 1e-14:
            break
    return theta, E, it


def save_trace(path, trace):
    keys = ["phase", "iteration", "energy", "step", "accepted"]
    extra = sorted({k for row in trace for k in row} - set(keys))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys + extra)
        for row in trace:
            w.writerow([repr(row[k]) if isinstance(row.get(k), float) else row.get(k, "")
                        for k in keys + extra])


# ---------------------------------------------------------------- stages


@dataclass
class SolverConfig:
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    stage1_iter: int = 300
    stage2_iter: int = 500
    rel_tol: float = 1e-6
    window: int = 10
    step: float = 0.05
    joint_sigmas: tuple = (0.25, 0.12, 0.06)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        energy = EnergyConfig.from_dict(d.pop("energy", {}))
        known = set(cls.__dataclass_fields__) - {"energy"}
        bad = set(d) - known
        if bad:
            raise InvalidArgumentError(f"unknown solver settings: {sorted(bad)}")
        if "joint_sigmas" in d:
            d["joint_sigmas"] = tuple(d["joint_sigmas"])
        return cls(energy=energy, **d)


def _objective(problem, stage, config, shape, heatmaps=None):
    T, n = shape
    views = None

    def fn(theta):
        P = theta[: T * n].reshape(T, n)
        s = theta[T * n :]
        prob = problem if heatmaps is None else _with_maps(problem, heatmaps)
        r = total_energy(prob, P, s, stage, config, views)
        return r.value, np.concatenate([r.grad_P.ravel(), r.grad_s])

    return fn


def _with_maps(problem, heatmaps):
    return FitProblem(problem.model, problem.cameras, problem.space, problem.gradients, heatmaps,
                      problem.n_frames)


def capture_centre(cameras):
    """Least-squares point closest to all optical axes."""
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for cam in cameras:
        d = cam.R[2]
        M = np.eye(3) - np.outer(d, d)
        A += M
        b += M @ cam.center
    # minimum-norm solution when the axes are parallel (e.g. one camera)
    return np.linalg.lstsq(A, b, rcond=None)[0]


def initial_state(problem: FitProblem):
    n = problem.model.skeleton.n_dofs
    P = np.zeros((problem.n_frames, n))
    P[:, :3] = capture_centre(problem.cameras)
    return SolveState(P, np.zeros(problem.shape_dim))


def _subset_maps(hm: HeatMapSet, joints):
    keep = set(joints)
    return HeatMapSet({k: v for k, v in hm.maps.items() if k[2] in keep}, hm.scale, hm.n_cameras,
                      hm.n_frames, hm.n_joints)


def _mask(problem, pose_mask, shape_free):
    T = problem.n_frames
    return np.concatenate([np.tile(pose_mask, T), np.full(problem.shape_dim, bool(shape_free))])


def solve_stage1(problem: FitProblem, config: SolverConfig = None, state: SolveState = None,
                 trace=None):
    """Hierarchical detection fit: root + torso, then limbs, then all
    pose parameters together with shape."""
    config = config or SolverConfig()
    hm = problem.heatmaps
    if hm is None or not hm.maps or all(np.max(m) <= 0 for m in hm.maps.values()):
        raise InitializationError("heat maps are empty; cannot initialize")
    sk = problem.model.skeleton
    nj = sk.n_joints
    missing = [j for j in range(nj) if not any(k[2] == j for k in hm.maps)]
    if missing:
        log.warning("no heat maps for joints %s; they are skipped", [sk.joints[j].name for j in missing])
    state = state or initial_state(problem)
    T, n = state.P.shape
    torso_joints = [sk.index(x) for x in sk.torso]
    # joints placed by root and torso angles alone
    anchored = [j for j in range(nj) if j in torso_joints or sk.parents[j] in torso_joints]
    torso_mask = sk.dof_mask(sk.torso, root=True)
    limb_mask = sk.dof_mask(sk.limbs, root=False)
    plans = [
        (StagePlan(1, _mask(problem, torso_mask, False), config.stage1_iter, config.rel_tol, config.window,
                   label="stage1-torso"), _subset_maps(hm, anchored)),
        (StagePlan(1, _mask(problem, limb_mask, False), config.stage1_iter, config.rel_tol, config.window,
                   label="stage1-limbs"), hm),
        (StagePlan(1, _mask(problem, np.ones(n, bool), True), config.stage1_iter, config.rel_tol,
                   config.window, label="stage1-all"), hm),
    ]
    names = param_names(sk, T, problem.shape_dim)
    for plan, maps in plans:
        for sigma in config.joint_sigmas:
            ecfg = EnergyConfig(**{**config.energy.__dict__, "joint_sigma": sigma})
            fn = _objective(problem, 1, ecfg, (T, n), maps)
            theta, E, it = minimize(fn, state.theta, plan.mask, plan.max_iter, plan.rel_tol, plan.window,
                                    config.step, plan.grad_tol, names, trace, f"{plan.label}@{sigma:g}")
            state.set_theta(theta)
            state.energy = E
            state.iteration += it
            log.info("%s sigma=%g: E=%.6g after %d iterations", plan.label, sigma, E, it)
    return state


def solve_stage2(problem: FitProblem, state: SolveState, config: SolverConfig = None, trace=None,
                 pose_only=False):
    """Joint contour refinement of all pose parameters and shape."""
    config = config or SolverConfig()
    if state is None:
        raise InvalidArgumentError("stage 2 needs a stage-1 result")
    if problem.gradients is None:
        raise InvalidArgumentError("stage 2 needs gradient images")
    T, n = state.P.shape
    names = param_names(problem.model.skeleton, T, problem.shape_dim)
    fn = _objective(problem, 2, config.energy, (T, n))
    mask = _mask(problem, np.ones(n, bool), not pose_only)
    theta, E, it = minimize(fn, state.theta, mask, config.stage2_iter, config.rel_tol, config.window,
                            config.step, names=names, trace=trace, label="stage2")
    state.set_theta(theta)
    state.energy = E
    state.iteration += it
    log.info("stage2: E=%.6g after %d iterations", E, it)
    return state


def solve(problem: FitProblem, config: SolverConfig = None, stages=(1, 2), state=None, trace=None):
    config = config or SolverConfig()
    if 1 in stages:
        state = solve_stage1(problem, config, state, trace)
    if 2 in stages:
        state = solve_stage2(problem, state, config, trace)
    return state


__all__ = [
    "SolveState", "StagePlan", "SolverConfig", "conditioned_gradient_step", "minimize",
    "solve_stage1", "solve_stage2", "solve", "save_trace", "capture_centre", "param_names",
]
