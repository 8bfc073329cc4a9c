import json

import numpy as np
import pytest

from spidp import autodiff as ad
from spidp.autodiff import Tensor
from spidp.kinematics import JointState, forward_kinematics
from spidp.planner import CartesianGoal, PlannerConfig, PlanProblem, plan
from spidp.program import (OptimizationError, OptimizerConfig, Program, ProgramError, Skill,
                           annulus_probability, annulus_probability_mc, eos_channel, forward,
                           objective_terms, optimize, phi_cyc, phi_path, phi_succ)
from spidp.suite import clearance, load_robot
from spidp.world import Sphere, build_sdf

CHAIN = load_robot("spatial3")
START = np.array([0.0, 0.3, 1.0])
EMPTY = build_sdf([], (-1.0, -1.0, -0.6), 0.1, (21, 21, 19))


def start_pos():
    return forward_kinematics(CHAIN, START).ee_position.data[0]


def p(v, opt=False, lo=None, hi=None):
    return {"value": v, "optimize": opt, "bounds": [lo, hi]}


def linear(dx=0.2, v=0.1, opt=False):
    x, y, z = start_pos() + [dx, 0.0, 0.0]
    return Skill("LinearMove", {"x": p(x, opt, x - 0.05, x + 0.05), "y": p(y, opt, y - 0.05, y + 0.05),
                                "z": z, "velocity": v})


# objectives

def test_phi_cyc_examples():
    assert float(phi_cyc(np.full(5, 1 - 1e-9)).data) == pytest.approx(0.0, abs=1e-7)
    assert float(phi_cyc(np.array([0.5, 0.5])).data) == pytest.approx(2 * np.log(2))
    eos = np.array([0.2, 0.6, 0.9])
    assert float(phi_cyc(eos[:2]).data) < float(phi_cyc(eos).data)


@pytest.mark.parametrize("bad", [0.0, 1.0, np.nan])
def test_probability_channels_rejected_at_bounds(bad):
    with pytest.raises(ValueError):
        phi_cyc(np.array([0.5, bad]))
    with pytest.raises(ValueError):
        phi_succ(np.array([bad]))


def test_phi_path_examples():
    assert float(phi_path(np.array([[0, 0, 0], [1.0, 0, 0]])).data) == 1.0
    assert float(phi_path(np.ones((7, 3))).data) == 0.0
    th = np.linspace(0, np.pi, 1000)
    semi = np.column_stack([np.cos(th), np.sin(th), np.zeros_like(th)])
    # arc-length oracle: chord sum of n equal arcs is 2n sin(pi / 2n)
    assert float(phi_path(semi).data) == pytest.approx(2 * 999 * np.sin(np.pi / (2 * 999)), rel=1e-12)
    assert abs(float(phi_path(semi).data) - np.pi) < 1e-4
    with pytest.raises(ValueError):
        phi_path(np.zeros((1, 3)))


def test_phi_succ_examples():
    assert float(phi_succ(np.array([np.exp(-1)])).data) == pytest.approx(1.0)
    assert float(phi_succ(np.full(4, 1 - 1e-12)).data) == pytest.approx(0.0, abs=1e-10)
    s = np.array([0.3, 0.5, 0.7])
    for i in range(3):
        t = s.copy()
        t[i] += 0.1
        assert float(phi_succ(t).data) < float(phi_succ(s).data)


# forward pass

def test_linear_move_duration_and_eos_crossing():
    prog = Program([linear(0.2, 0.1)])
    tr = forward(prog, prog.x0(), JointState(START), EMPTY, CHAIN)
    assert float(tr.durations[0].data) == pytest.approx(2.0)
    eos = tr.eos.data
    assert np.all(np.diff(eos) >= 0)
    k = int(np.argmin(np.abs(tr.times - 2.0)))
    assert tr.times[k] == pytest.approx(2.0)
    assert eos[k - 1] < 0.5 < eos[k + 1]
    assert eos[k] == pytest.approx(0.5, abs=1e-6)
    assert float(eos_channel(np.array([2.0]), Tensor(2.0), 0.05).data[0]) == pytest.approx(0.5)
    np.testing.assert_allclose(tr.positions.data[-1], start_pos() + [0.2, 0, 0], atol=1e-12)


def test_two_skills_concatenate_with_continuous_seam():
    a = linear(0.1, 0.1)
    b0 = start_pos() + [0.1, 0.1, 0.0]
    b = Skill("LinearMove", {"x": b0[0], "y": b0[1], "z": b0[2], "velocity": 0.05})
    prog = Program([a, b])
    tr = forward(prog, prog.x0(), JointState(START), EMPTY, CHAIN)
    single = [forward(Program([s]), np.zeros(0), JointState(START), EMPTY, CHAIN) for s in (a,)]
    assert len(tr) == len(single[0]) + np.sum(tr.segment == 1)
    assert np.all(tr.seam_gaps() < 1e-6)
    assert np.all(tr.eos.data > 0) and np.all(tr.eos.data < 1)
    assert np.all(tr.succ.data > 0) and np.all(tr.succ.data < 1)


def test_unreachable_hand_over_rejected():
    # a Cartesian move beyond the arm's reach leaves no joint state for the next planned move
    away = start_pos() + [3.0, 0.0, 0.0]
    prog = Program([Skill("LinearMove", {"x": away[0], "y": away[1], "z": away[2], "velocity": 0.5}),
                    Skill("PlanMove", {"x": 0.3, "y": 0.3, "z": 0.0, "velocity": 0.1})])
    with pytest.raises(ProgramError, match="reach"):
        forward(prog, np.zeros(0), JointState(START), EMPTY, CHAIN)


def _post_world():
    target = np.array([0.26, 0.41, -0.15])
    mid = 0.5 * (start_pos() + target)
    return target, [Sphere(mid + [0.0, 0.0, 0.02], 0.05)]


def test_plan_move_delegates_to_planner():
    target, prims = _post_world()
    world = build_sdf(prims, (-1.0, -1.0, -0.6), 0.025, (81, 81, 73))
    prog = Program([Skill("PlanMove", {"x": target[0], "y": target[1], "z": target[2], "velocity": 0.2})])
    tr = forward(prog, np.zeros(0), JointState(START), world, CHAIN)
    direct = plan(PlanProblem(CHAIN, world, JointState(START), CartesianGoal(target)))
    np.testing.assert_array_equal(tr.plans[0].trajectory.states.data, direct.trajectory.states.data)
    assert tr.plans[0].iterations == direct.iterations
    assert tr.collision_free
    assert clearance(CHAIN, prims, direct.trajectory.positions.data).min() >= 0


def test_spiral_probability_matches_monte_carlo():
    for r_in, r_out, off, sigma in [(0.0, 0.004, (0, 0), 0.002), (0.003, 0.008, (0.002, -0.001), 0.002),
                                    (0.001, 0.006, (0.004, 0.0), 0.003)]:
        a = float(annulus_probability(r_in, r_out, np.array(off), sigma).data)
        mc = annulus_probability_mc(r_in, r_out, off, sigma, n=200_000, seed=1)
        assert abs(a - mc) < 0.01
    # centred disc has the closed form 1 - exp(-r^2 / 2 sigma^2)
    assert float(annulus_probability(0.0, 0.004, np.zeros(2), 0.002).data) == pytest.approx(
        1 - np.exp(-2.0), rel=1e-6)


def test_program_round_trip():
    doc = {"skills": [{"kind": "LinearMove", "params": {"x": {"value": 0.1, "optimize": True, "bounds": [0, 0.2]},
                                                        "y": 0.0, "z": 0.3, "velocity": 0.1}},
                      {"kind": "ForcePlace", "params": {"depth": 0.02, "velocity": 0.01, "force": 5.0}}],
           "settings": {"dt": 0.02}}
    prog = Program.from_dict(doc)
    again = Program.from_dict(json.loads(json.dumps(prog.to_dict())))
    assert again.to_dict() == prog.to_dict()
    assert prog.names() == ["0.LinearMove.x"]
    np.testing.assert_array_equal(prog.with_x([0.15]).x0(), [0.15])


@pytest.mark.parametrize("doc,match", [
    ({"kind": "Teleport", "params": {}}, "unknown skill"),
    ({"kind": "LinearMove", "params": {"x": 0, "y": 0, "velocity": 0.1}}, "missing"),
    ({"kind": "LinearMove", "params": {"x": 0, "y": 0, "z": 0, "velocity": -0.1}}, "velocity"),
    ({"kind": "PlanMove", "params": {"x": 0, "y": 0, "z": 0, "velocity": 0.1, "rx": 0}}, "all of"),
])
def test_invalid_skills(doc, match):
    with pytest.raises(ProgramError, match=match):
        Program.from_dict({"skills": [doc]})


def test_out_of_bounds_parameters_rejected():
    prog = Program([linear(0.1, opt=True)])
    with pytest.raises(ProgramError, match="bounds"):
        forward(prog, prog.x0() + 1.0, JointState(START), EMPTY, CHAIN)


# gradients

def _fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _objective(prog, world, cfg, pc=None):
    def f(x, tape=False):
        X = Tensor(x, requires_grad=True) if tape else x
        tr = forward(prog, X, JointState(START), world, CHAIN, None, pc)
        total, _ = objective_terms(tr, cfg)
        if tape:
            return ad.grad(total, [X])[0]
        return float(total.data)
    return f


def skill_program(kind):
    s = start_pos()
    if kind == "LinearMove":
        return Program([Skill("LinearMove", {"x": p(s[0] + 0.13, True, -1, 1), "y": p(s[1] + 0.07, True, -1, 1),
                                             "z": p(s[2] - 0.05, True, -1, 1), "velocity": p(0.11, True, 0.01, 1)})])
    if kind == "SpiralSearch":
        return Program([Skill("SpiralSearch", {"radius_in": p(0.0023, True, 0, 0.01),
                                               "radius_out": p(0.0061, True, 0.001, 0.02),
                                               "velocity": p(0.013, True, 0.001, 1), "force": p(5.0, True, 0, 20)})],
                       settings={"hole": [s[0] + 0.0013, s[1] - 0.0007]})
    if kind == "ForcePlace":
        return Program([Skill("ForcePlace", {"depth": p(0.031, True, 0.001, 0.1), "velocity": p(0.021, True, 0.001, 1),
                                             "force": p(7.3, True, 0, 50)})])
    if kind == "PlanMove":
        t = np.array([0.27, 0.39, -0.13])
        return Program([Skill("PlanMove", {"x": p(t[0], True, -1, 1), "y": p(t[1], True, -1, 1),
                                           "z": p(t[2], True, -1, 1), "velocity": p(0.23, True, 0.01, 1)})])
    raise ValueError(kind)


@pytest.mark.parametrize("kind", ["LinearMove", "SpiralSearch", "ForcePlace", "PlanMove"])
def test_objective_gradient_matches_fd(kind):
    prog = skill_program(kind)
    pc = PlannerConfig(T=16, j_max=5, fixed_iterations=True)
    f = _objective(prog, EMPTY, OptimizerConfig(), pc)
    x0 = prog.x0()
    f(x0)  # fixes the sample horizon
    g = f(x0, tape=True)
    np.testing.assert_allclose(g, _fd(f, x0), rtol=1e-3, atol=1e-6 * np.max(np.abs(g)))


def test_cycle_weight_only_leaves_unrelated_parameters_at_zero_gradient():
    # the spiral's capture probability does not enter the cycle loss
    prog = skill_program("SpiralSearch")
    f = _objective(prog, EMPTY, OptimizerConfig(w_cyc=1.0, w_path=0.0, w_succ=0.0))
    g = f(prog.x0(), tape=True)
    assert g[prog.names().index("0.SpiralSearch.force")] == 0.0
    prog = skill_program("ForcePlace")
    f = _objective(prog, EMPTY, OptimizerConfig(w_cyc=0.0, w_path=0.0, w_succ=1.0))
    assert np.all(f(prog.x0(), tape=True) == 0.0)


# optimizer

def test_linear_target_moves_toward_start():
    s = start_pos()
    prog = Program([Skill("LinearMove", {"x": p(s[0] + 0.02, True, s[0] - 0.1, s[0] + 0.1),
                                         "y": s[1], "z": s[2], "velocity": 0.1})])
    res = optimize(prog, None, JointState(START), EMPTY, CHAIN,
                   OptimizerConfig(lr=1e-3, max_iters=30, w_cyc=0.0, w_path=1.0, w_succ=0.0))
    best = [h["best_objective"] for h in res.history]
    assert np.all(np.diff(best) <= 0)
    assert best[-1] < best[0]
    assert abs(res.x[0] - s[0]) < 0.02
    assert np.all(res.final.seam_gaps() < 1e-6)


def test_stationary_point_leaves_x_unchanged():
    prog = skill_program("ForcePlace")
    res = optimize(prog, None, JointState(START), EMPTY, CHAIN,
                   OptimizerConfig(w_cyc=0.0, w_path=0.0, w_succ=1.0, max_iters=5))
    assert res.status == "stationary"
    assert len(res.history) == 1
    np.testing.assert_array_equal(res.x, prog.x0())


def test_no_free_parameters_single_pass():
    prog = Program([linear(0.1)])
    res = optimize(prog, None, JointState(START), EMPTY, CHAIN, OptimizerConfig(max_iters=10))
    assert len(res.history) == 1 and res.x.size == 0
    assert res.objective_improved


def test_non_finite_gradient_aborts():
    def poison(tr):
        tr.positions = tr.positions * Tensor(np.nan)
        return tr
    prog = skill_program("LinearMove")
    prog.residual = poison
    with pytest.raises((OptimizationError, ValueError)):
        optimize(prog, None, JointState(START), EMPTY, CHAIN, OptimizerConfig(max_iters=3))


def test_optimizer_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(lr=0.0)
    with pytest.raises(ValueError):
        OptimizerConfig(w_cyc=0.0, w_path=0.0, w_succ=0.0)
    with pytest.raises(ValueError):
        OptimizerConfig(w_path=-1.0)


def test_residual_hook_is_applied():
    def shift(tr):
        tr.positions = tr.positions + ad.einsum("k,i->ki", np.ones(len(tr)), np.array([0.0, 0.0, 0.01]))
        return tr
    prog = Program([linear(0.1)])
    base = forward(prog, np.zeros(0), JointState(START), EMPTY, CHAIN)
    prog.residual = shift
    moved = forward(prog, np.zeros(0), JointState(START), EMPTY, CHAIN)
    np.testing.assert_allclose(moved.positions.data - base.positions.data, np.tile([0.0, 0.0, 0.01], (len(base), 1)))


def _placing(seed, use_cache, iters):
    from spidp import scenario as sc
    from importlib import resources
    path = resources.files("spidp") / "data" / "scenarios" / "placing.json"
    scn = sc.load(str(path), seed=seed)
    cfg = OptimizerConfig(**{**scn.optimizer.to_dict(), "max_iters": iters, "use_cache": use_cache})
    return optimize(scn.program, scn.initial_x(), scn.start, scn.world, scn.chain, cfg, scn.planner)


def test_seams_stay_closed_during_optimization():
    res = _placing(0, True, 4)
    assert len(res.history) == 4
    assert np.all(res.final.seam_gaps() < 1e-6)
    assert np.all(np.diff([h["best_objective"] for h in res.history]) <= 0)


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="warm-started plans settle in a different local optimum than cold plans; "
                                        "the stopping tolerance bounds the last step, not the distance between optima")
def test_cache_soundness():
    worst = 0.0
    for seed in range(10):
        a = _placing(seed, True, 6).final.plans[0].trajectory.states.data
        b = _placing(seed, False, 6).final.plans[0].trajectory.states.data
        worst = max(worst, float(np.max(np.abs(a - b))))
    assert worst < 1e-4
