import numpy as np
import pytest

from oracles import _grid_points

from cmesyn.abstraction import Umdp
from cmesyn.cme import Dataset, fit
from cmesyn.errbounds import assemble_budget
from cmesyn.errors import InputError, DomainError
from cmesyn.kernel import KernelParams, gram_entries
from cmesyn.partition import Box, ReachAvoidSpec, build_grid
from cmesyn.rdp import (
    Policy,
    extract_policy,
    optimistic_bound,
    policy_csv,
    policy_from_sweeps,
    refine,
    results_csv,
    robust_value_iteration,
    solve_task,
)
from cmesyn import abstraction


def make_toy_umdp(centers, rhos, eps_table, reach_states, sigma=(1.0, 1.0)):
    """UMDP whose (s, a) ambiguity sets are MMD balls around the
    center-supported reference distributions ``rhos[a][s]``; the avoid
    state is the last one."""
    centers = np.asarray(centers, dtype=float).reshape(len(centers), -1)
    k1 = gram_entries(KernelParams(*sigma), centers)
    n_states = centers.shape[0]
    n_actions = len(rhos)
    betas = {}
    consts = {}
    cross = {}
    for ai in range(n_actions):
        rho = np.asarray(rhos[ai], dtype=float)
        betas[ai] = rho
        cross[ai] = k1
        consts[ai] = np.einsum("si,ij,sj->s", rho, k1, rho)
    return Umdp(
        actions=[float(a) for a in range(n_actions)],
        center_gram=k1,
        cross_grams=cross,
        betas=betas,
        consts=consts,
        eps_table=np.asarray(eps_table, dtype=float),
        reach_states=np.asarray(reach_states, dtype=int),
        avoid_state=n_states - 1,
    )


def grid_dp(umdp, task, sweeps, resolution):
    """Brute-force minimax: the adversary picks the best feasible point of
    a dense barycentric grid at every step."""
    n = umdp.n_states
    pts = _grid_points(n, int(round(1 / resolution)))
    masks = {}
    for s in range(n):
        if s == umdp.avoid_state:
            continue
        for ai in range(umdp.n_actions):
            d = umdp.data(s, ai)
            qs = (
                np.einsum("ms,st,mt->m", pts, d.center_gram, pts)
                - 2.0 * pts @ d.lin
                + d.const
            )
            masks[(s, ai)] = qs <= d.eps**2
    v = np.zeros(n)
    frozen = {umdp.avoid_state}
    if task == "reach-avoid":
        v[umdp.reach_states] = 1.0
        frozen |= {int(s) for s in umdp.reach_states}
    else:
        v[:] = 1.0
        v[umdp.avoid_state] = 0.0
    history = [v.copy()]
    for _ in range(sweeps):
        vals = pts @ v
        v_new = v.copy()
        for s in range(n):
            if s in frozen:
                continue
            v_new[s] = max(
                float(vals[masks[(s, ai)]].min()) for ai in range(umdp.n_actions)
            )
        v = v_new
        history.append(v.copy())
    return v, history


def _three_state_instance():
    centers = [[0.0], [1.0], [2.0]]
    rhos = [
        [[0.3, 0.5, 0.2], [0.2, 0.6, 0.2], [0.0, 0.0, 1.0]],
        [[0.5, 0.3, 0.2], [0.4, 0.3, 0.3], [0.0, 0.0, 1.0]],
    ]
    eps = np.full((3, 2), 0.25)
    return make_toy_umdp(centers, rhos, eps, reach_states=[0])


def test_absorbing_everywhere_gives_reach_indicator():
    # every ambiguity set collapses to "stay put"
    centers = [[0.0], [1.0], [2.0]]
    rhos = [[[1, 0, 0], [0, 1, 0], [0, 0, 1]]]
    eps = np.zeros((3, 1))
    umdp = make_toy_umdp(centers, rhos, eps, reach_states=[0])
    res = robust_value_iteration(umdp, task="reach-avoid", conv_tol=1e-9)
    np.testing.assert_allclose(res.values, [1.0, 0.0, 0.0], atol=1e-9)
    assert res.sweeps <= 3


def test_all_safe_states_reach_gives_ones():
    centers = [[0.0], [1.0], [2.0]]
    rhos = [[[0.5, 0.3, 0.2], [0.1, 0.6, 0.3], [0, 0, 1]]]
    umdp = make_toy_umdp(centers, rhos, np.full((3, 1), 0.3), reach_states=[0, 1])
    res = robust_value_iteration(umdp, task="reach-avoid")
    np.testing.assert_allclose(res.values, [1.0, 1.0, 0.0], atol=0)


def test_monotone_sweeps_and_range():
    umdp = _three_state_instance()
    res = robust_value_iteration(
        umdp, task="reach-avoid", conv_tol=1e-8, store_history=True, tol_obj=1e-8
    )
    hist = np.stack(res.history)
    assert np.all(hist[1:] >= hist[:-1] - 2e-8)
    assert np.all(hist >= 0.0) and np.all(hist <= 1.0)
    assert res.values[umdp.avoid_state] == 0.0


def test_matches_adversary_grid_oracle_reach_avoid():
    umdp = _three_state_instance()
    sweeps = 8
    ref, ref_hist = grid_dp(umdp, "reach-avoid", sweeps, resolution=1e-3)
    res = robust_value_iteration(
        umdp, task="reach-avoid", max_sweeps=sweeps, conv_tol=0.0,
        store_history=True, tol_obj=1e-8,
    )
    for t in range(sweeps + 1):
        np.testing.assert_allclose(res.history[t], ref_hist[t], atol=1e-3)


def test_matches_adversary_grid_oracle_safety():
    umdp = _three_state_instance()
    horizon = 6
    ref, ref_hist = grid_dp(umdp, "safety", horizon, resolution=5e-4)
    res = robust_value_iteration(
        umdp, task="safety", horizon=horizon, store_history=True, tol_obj=1e-8
    )
    for t in range(horizon + 1):
        np.testing.assert_allclose(res.history[t], ref_hist[t], atol=1e-3)


def test_safety_requires_horizon():
    umdp = _three_state_instance()
    with pytest.raises(InputError):
        robust_value_iteration(umdp, task="safety")
    with pytest.raises(InputError):
        robust_value_iteration(umdp, task="nonsense")


def test_singleton_sets_make_bounds_coincide():
    centers = [[0.0], [1.0], [2.0]]
    rhos = [[[0.0, 1.0, 0.0], [0.6, 0.2, 0.2], [0, 0, 1]]]
    umdp = make_toy_umdp(centers, rhos, np.zeros((3, 1)), reach_states=[0])
    bounds, policy = solve_task(umdp, task="reach-avoid", conv_tol=1e-10)
    active = [s for s in range(3) if s != umdp.avoid_state and s not in (0,)]
    for s in active:
        assert bounds.p_upper[s] == pytest.approx(
            bounds.p_lower[s], abs=1e-9 + 1e-10
        )


def test_bracket_and_gap_grows_with_radius():
    centers = [[0.0], [1.0], [2.0]]
    rhos = [
        [[0.3, 0.5, 0.2], [0.2, 0.6, 0.2], [0, 0, 1]],
        [[0.5, 0.3, 0.2], [0.4, 0.3, 0.3], [0, 0, 1]],
    ]
    gaps = []
    conv_tol = 1e-7
    for eps in (0.05, 0.15, 0.3):
        umdp = make_toy_umdp(centers, rhos, np.full((3, 2), eps), reach_states=[0])
        bounds, _ = solve_task(umdp, task="reach-avoid", conv_tol=conv_tol)
        assert np.all(bounds.p_lower <= bounds.p_upper + 2 * conv_tol)
        assert bounds.p_lower[0] == 1.0 and bounds.p_upper[umdp.avoid_state] == 0.0
        gaps.append(float(bounds.p_upper[1] - bounds.p_lower[1]))
    assert gaps[0] <= gaps[1] <= gaps[2]
    assert gaps[2] > gaps[0]


def test_extract_policy_single_action():
    umdp = _three_state_instance()
    res = robust_value_iteration(umdp, task="reach-avoid")
    single = make_toy_umdp(
        [[0.0], [1.0], [2.0]],
        [[[0.3, 0.5, 0.2], [0.2, 0.6, 0.2], [0, 0, 1]]],
        np.full((3, 1), 0.25),
        reach_states=[0],
    )
    res1 = robust_value_iteration(single, task="reach-avoid")
    pol = extract_policy(single, res1.values)
    assert np.all(pol.actions == 0)


def test_extract_policy_prefers_action_leading_to_reach():
    centers = [[0.0], [1.0], [2.0]]
    rhos = [
        [[0.05, 0.75, 0.2], [0.0, 0.0, 0.0], [0, 0, 1]],  # action 0: mostly stay
        [[0.9, 0.0, 0.1], [0.0, 0.0, 0.0], [0, 0, 1]],    # action 1: mostly reach
    ]
    rhos[0][1] = [0.1, 0.7, 0.2]
    rhos[1][1] = [0.8, 0.1, 0.1]
    umdp = make_toy_umdp(centers, rhos, np.full((3, 2), 0.05), reach_states=[0])
    bounds, policy = solve_task(umdp, task="reach-avoid")
    assert policy.actions[1] == 1


def test_extract_policy_tie_break_records_metadata():
    centers = [[0.0], [1.0], [2.0], [3.0]]
    # both actions identical at every state: primary and progress keys tie,
    # the lowest index must win and the event must be recorded
    rho = [[0.3, 0.4, 0.2, 0.1], [0.1, 0.5, 0.3, 0.1], [0.2, 0.3, 0.4, 0.1], [0, 0, 0, 1]]
    umdp = make_toy_umdp(centers, [rho, rho], np.full((4, 2), 0.2), reach_states=[0])
    res = robust_value_iteration(umdp, task="reach-avoid")
    pol = extract_policy(umdp, res.values)
    assert np.all(pol.actions[[1, 2]] == 0)
    tied_states = {t["state"] for t in pol.metadata["tie_breaks"]}
    assert {1, 2} <= tied_states
    for t in pol.metadata["tie_breaks"]:
        assert t["chosen"] == min(t["progress_survivors"])


def test_optimistic_bound_requires_matching_policy_kind():
    umdp = _three_state_instance()
    res = robust_value_iteration(umdp, task="safety", horizon=3)
    pol = policy_from_sweeps(umdp, res.greedy_per_sweep, 3)
    with pytest.raises(InputError):
        optimistic_bound(umdp, pol, task="reach-avoid")
    st = extract_policy(umdp, robust_value_iteration(umdp, task="reach-avoid").values)
    with pytest.raises(InputError):
        optimistic_bound(umdp, st, task="safety", horizon=3)


def test_safety_time_varying_policy_indexing():
    umdp = _three_state_instance()
    horizon = 4
    res = robust_value_iteration(umdp, task="safety", horizon=horizon)
    pol = policy_from_sweeps(umdp, res.greedy_per_sweep, horizon)
    assert pol.table.shape == (horizon, umdp.n_states)
    # step 0 uses the last sweep (horizon steps remaining)
    np.testing.assert_array_equal(pol.table[0], res.greedy_per_sweep[-1])
    np.testing.assert_array_equal(pol.table[-1], res.greedy_per_sweep[0])
    with pytest.raises(InputError):
        policy_from_sweeps(umdp, res.greedy_per_sweep, horizon + 1)


def test_refine_and_csv_outputs(tmp_path):
    rng = np.random.default_rng(3)
    k = KernelParams(1.0, 1.0)
    data = Dataset(
        actions=[0.0, 1.0],
        inputs={u: rng.uniform(0, 1, size=(25, 1)) for u in (0.0, 1.0)},
        successors={u: rng.uniform(0, 1, size=(25, 1)) for u in (0.0, 1.0)},
    )
    model = fit(data, k, 0.005)
    spec = ReachAvoidSpec(Box([0.0], [1.0]), Box([0.0], [1.0]), Box([0.0], [0.25]))
    part = build_grid(spec, 4)
    budget = assemble_budget(model, part, eps1=0.2, eps2_tol=1e-3, eps2_budget=60)
    umdp = abstraction.build(model, part, budget)
    bounds, policy = solve_task(umdp, task="reach-avoid")

    pi = refine(policy, part)
    for s in range(part.n_states - 1):
        assert pi(part.state_centers[s]) == policy.action_value(s)
    assert pi(np.array([0.25])) == policy.action_value(part.locate(np.array([0.25])))
    with pytest.raises(DomainError):
        pi(np.array([2.0]))

    rpath = tmp_path / "results.csv"
    results_csv(rpath, part, bounds, policy)
    lines = rpath.read_text().splitlines()
    assert lines[0] == "region_id,center_0,label,action,p_lower,p_upper"
    assert len(lines) == 1 + part.cell_count + 1
    # reach rows pinned at 1
    for line in lines[1:]:
        fields = line.split(",")
        if fields[2] == "reach":
            assert float(fields[4]) == 1.0

    ppath = tmp_path / "policy.csv"
    policy_csv(ppath, part, policy)
    assert len(ppath.read_text().splitlines()) == 1 + part.cell_count + 1
