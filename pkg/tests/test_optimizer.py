import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volcap import evaluation as ev
from volcap.energy import EnergyConfig, FitProblem, HeatMapSet, total_energy
from volcap.errors import InitializationError, InvalidArgumentError, NumericalError
from volcap.optimizer import (
    SolverConfig, SolveState, StagePlan, capture_centre, conditioned_gradient_step, initial_state,
    minimize, save_trace, solve_stage1, solve_stage2,
)

from conftest import toy_model


def test_step_formula():
    theta = np.array([1.0, 2.0, 3.0])
    g = np.array([0.5, -1.0, 2.0])
    cond = np.array([2.0, 1.0, 0.5])
    out = conditioned_gradient_step(theta, g, cond, 0.1, np.array([True, True, False]))
    assert np.allclose(out, [1.0 - 0.1, 2.0 + 0.1, 3.0])


def test_scalar_quadratic_converges():
    f = lambda t: (float(t[0] ** 2), 2 * t)
    theta, _, it = minimize(f, np.array([1.0]), np.array([True]), max_iter=200, rel_tol=0.0)
    assert abs(theta[0]) < 1e-6
    assert it <= 200


def test_zero_gradient_leaves_state():
    f = lambda t: (1.0, np.zeros_like(t))
    theta, E, it = minimize(f, np.array([0.3, -2.0]), np.ones(2, bool))
    assert theta.tolist() == [0.3, -2.0]
    assert it == 0


def _iterations_to(target, fn, theta0, conditioned):
    trace = []
    minimize(fn, theta0, np.ones(len(theta0), bool), max_iter=200000, rel_tol=0.0, window=10**9,
             trace=trace, conditioned=conditioned)
    return next(r["iteration"] for r in trace if r["energy"] < target)


def test_conditioning_beats_plain_descent_on_anisotropic_quadratic():
    a = np.array([1.0, 1e4])
    fn = lambda t: (float(0.5 * np.sum(a * t * t)), a * t)
    target = 1e-12
    with_cond = _iterations_to(target, fn, np.ones(2), True)
    plain = _iterations_to(target, fn, np.ones(2), False)
    assert with_cond <= 0.1 * plain


def test_nonfinite_gradient_names_parameter():
    def f(t):
        g = 2 * t
        if t[0] < 0.9:
            g[1] = np.nan
        return float(t @ t), g

    with pytest.raises(NumericalError, match="beta"):
        minimize(f, np.array([1.0, 1.0]), np.ones(2, bool), names=["alpha", "beta"])


def test_masked_parameters_fixed():
    f = lambda t: (float(np.sum((t - 3) ** 2)), 2 * (t - 3))
    theta, _, _ = minimize(f, np.zeros(3), np.array([True, False, True]), max_iter=300)
    assert theta[1] == 0.0
    assert np.allclose(theta[[0, 2]], 3.0, atol=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_accepted_energy_never_increases(seed):
    r = np.random.default_rng(seed)
    A = r.normal(size=(4, 4))
    A = A @ A.T + 0.1 * np.eye(4)
    fn = lambda t: (float(0.5 * t @ A @ t + np.sum(np.cos(3 * t))), A @ t - 3 * np.sin(3 * t))
    trace = []
    minimize(fn, r.normal(size=4), np.ones(4, bool), max_iter=100, trace=trace)
    energies = [row["energy"] for row in trace]
    assert all(b <= a for a, b in zip(energies, energies[1:]))


def test_stage_plan_rejects_bad_stage():
    with pytest.raises(InvalidArgumentError):
        StagePlan(3, np.ones(2))


def test_capture_centre_of_ring():
    cams = ev.ring_cameras(4, (32, 24), target=(0.1, -0.2, 0.3))
    assert np.allclose(capture_centre(cams), [0.1, -0.2, 0.3], atol=1e-9)


def test_trace_csv(tmp_path):
    trace = [{"phase": "a", "iteration": 0, "energy": 1.25, "step": 0.05, "accepted": 1}]
    save_trace(tmp_path / "t.csv", trace)
    rows = list(csv.reader((tmp_path / "t.csv").read_text().splitlines()))
    assert rows[0] == ["phase", "iteration", "energy", "step", "accepted"]
    assert float(rows[1][2]) == 1.25


# ---------------------------------------------------------------- stages on small scenes


@pytest.fixture(scope="module")
def tpose_scene(ref_model):
    cams = ev.ring_cameras(2, (48, 36))
    P = ref_model.skeleton.identity_pose()[None].copy()
    P[0, :3] = capture_centre(cams)
    scene = ev.SyntheticScene(0, ref_model, None, np.zeros(0), P, cams)
    return scene


def test_stage1_at_optimum_barely_moves(tpose_scene, ref_model):
    hm = ev.synth_heat_maps(tpose_scene, scale=1.0, blur_px=2.0)
    prob = FitProblem(ref_model, tpose_scene.cameras, None, None, hm, 1)
    cfg = SolverConfig(stage1_iter=20, joint_sigmas=(0.06,))
    state = solve_stage1(prob, cfg)
    joints = ev.joint_error(state.P, ref_model.skeleton, tpose_scene.joints())
    assert joints[0] < 10.0  # mm


def test_stage1_empty_maps(tpose_scene, ref_model):
    hm = ev.synth_heat_maps(tpose_scene)
    empty = HeatMapSet({k: np.zeros_like(v) for k, v in hm.maps.items()}, hm.scale, 2, 1, hm.n_joints)
    prob = FitProblem(ref_model, tpose_scene.cameras, None, None, empty, 1)
    with pytest.raises(InitializationError):
        solve_stage1(prob)


def test_stage1_survives_one_blind_camera(ref_model):
    rng = np.random.default_rng(3)
    cams = ev.ring_cameras(3, (48, 36))
    P = ev.base_pose(ref_model.skeleton)[None].copy()
    P[0, :3] = capture_centre(cams) + [0.05, -0.05, 0.0]
    scene = ev.SyntheticScene(0, ref_model, None, np.zeros(0), P, cams)
    hm = ev.synth_heat_maps(scene, scale=1.0, blur_px=2.0, rng=rng)
    maps = {k: (np.zeros_like(v) if k[0] == 2 else v) for k, v in hm.maps.items()}
    prob = FitProblem(ref_model, cams, None, None, HeatMapSet(maps, 1.0, 3, 1, hm.n_joints), 1)
    state = solve_stage1(prob, SolverConfig(stage1_iter=60, joint_sigmas=(0.12, 0.06)))
    err = ev.joint_error(state.P, ref_model.skeleton, scene.joints())[0]
    assert err < 0.05 * 1000 * 1.75


def test_stage2_needs_stage1_result(ref_model):
    prob = FitProblem(ref_model, ev.ring_cameras(1, (8, 6)), None, [[np.zeros((6, 8, 2))]], None, 1)
    with pytest.raises(InvalidArgumentError):
        solve_stage2(prob, None)


def test_priors_only_keep_constant_sequence(ref_model):
    model = toy_model(ref_model)
    cams = ev.ring_cameras(1, (8, 6))
    P = np.tile(ev.base_pose(model.skeleton), (3, 1))
    prob = FitProblem(model, cams, None, [[np.zeros((6, 8, 2))] * 3], None, 3)
    cfg = SolverConfig(energy=EnergyConfig(w_data=0.0), stage2_iter=20)
    state = solve_stage2(prob, SolveState(P.copy(), np.zeros(0)), cfg)
    assert np.array_equal(state.P, P)


def test_initial_state_at_capture_centre(ref_model):
    cams = ev.ring_cameras(3, (16, 12))
    prob = FitProblem(ref_model, cams, None, None, None, 2)
    s = initial_state(prob)
    assert s.P.shape == (2, ref_model.skeleton.n_dofs)
    assert np.allclose(s.P[:, :3], capture_centre(cams))
    assert np.all(s.P[:, 3:] == 0)


def test_energy_trace_identical_across_threads(ref_model):
    model = toy_model(ref_model, seed=2)
    cams = ev.ring_cameras(2, (24, 18), radius=2.5)
    P = np.tile(ev.base_pose(model.skeleton), (2, 1))
    P[:, :3] = capture_centre(cams)
    scene = ev.SyntheticScene(0, model, None, np.zeros(0), P, cams)
    targets = ev.synth_contour_targets(scene)
    start = P.copy()
    start[:, 6:] += 0.03
    runs = []
    for threads in (1, 3):
        prob = FitProblem(model, cams, None, targets, None, 2)
        cfg = SolverConfig(energy=EnergyConfig(threads=threads), stage2_iter=15)
        trace = []
        state = solve_stage2(prob, SolveState(start.copy(), np.zeros(0)), cfg, trace)
        runs.append(([r["energy"] for r in trace], state.P))
    assert runs[0][0] == runs[1][0]
    assert np.array_equal(runs[0][1], runs[1][1])
    E0 = total_energy(FitProblem(model, cams, None, targets, None, 2), start, np.zeros(0), 2).value
    assert runs[0][0][-1] < E0
