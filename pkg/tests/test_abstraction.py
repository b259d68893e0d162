import numpy as np
import pytest

from cmesyn.abstraction import (
    AmbiguityData,
    build,
    member,
    read_umdp,
    write_umdp,
)
from cmesyn.cme import Dataset, coefficients, fit
from cmesyn.errbounds import ErrorBudget, assemble_budget
from cmesyn.errors import InfeasibilityError, InputError
from cmesyn.kernel import FiniteMeasure, KernelParams, gram_entries, mmd
from cmesyn.partition import Box, ReachAvoidSpec, build_grid


def _setup(rng, n=25, actions=(0.0, 1.0), cells=4, lam=0.005):
    k = KernelParams(1.0, 1.0)
    data = Dataset(
        actions=list(actions),
        inputs={u: rng.uniform(0, 1, size=(n, 1)) for u in actions},
        successors={u: rng.uniform(0, 1, size=(n, 1)) for u in actions},
    )
    model = fit(data, k, lam)
    spec = ReachAvoidSpec(Box([0.0], [1.0]), Box([0.0], [1.0]), Box([0.0], [0.25]))
    part = build_grid(spec, cells)
    return model, part


def test_build_shapes_and_pinning():
    rng = np.random.default_rng(1)
    model, part = _setup(rng)
    budget = assemble_budget(model, part, eps1=0.1, eps2_tol=1e-3, eps2_budget=60)
    umdp = build(model, part, budget)
    assert umdp.n_states == part.n_states
    assert umdp.n_actions == 2
    assert umdp.avoid_state == part.avoid_state
    np.testing.assert_array_equal(umdp.reach_states, part.reach_states)
    data = umdp.data(umdp.avoid_state, 0)
    assert data.pinned_vertex == umdp.avoid_state


def test_membership_equals_kernel_module_mmd():
    rng = np.random.default_rng(2)
    model, part = _setup(rng)
    budget = assemble_budget(model, part, eps1=0.2, eps2_tol=1e-3, eps2_budget=60)
    umdp = build(model, part, budget)
    k = model.params
    for s in range(part.n_states - 1):
        d = umdp.data(s, 1)
        mu = FiniteMeasure(model.successors[1.0], d.beta_cs)
        for _ in range(5):
            g = rng.dirichlet(np.ones(part.n_states))
            _, slack = member(d, g)
            ref = d.eps**2 - mmd(k, FiniteMeasure(part.state_centers, g), mu) ** 2
            assert slack == pytest.approx(ref, abs=1e-9)


def test_member_with_generous_radius_accepts_every_vertex():
    rng = np.random.default_rng(3)
    model, part = _setup(rng)
    eps2 = np.zeros((part.n_states, 2))
    budget = ErrorBudget(eps1=100.0, eps2=eps2, eps3=0.0, actions=[0.0, 1.0])
    umdp = build(model, part, budget)
    d = umdp.data(0, 0)
    for j in range(part.n_states):
        ok, slack = member(d, np.eye(part.n_states)[j])
        assert ok and slack > 0


def test_member_snapped_empirical_distribution_is_feasible():
    rng = np.random.default_rng(4)
    model, part = _setup(rng, n=60)
    budget = assemble_budget(model, part, eps1=1.0, eps2_tol=1e-3, eps2_budget=60)
    umdp = build(model, part, budget)
    for s in range(part.n_states - 1):
        center = part.state_centers[s]
        b = coefficients(model, 0.0, center)
        # snap the training successors (weighted by beta) onto states
        g = np.zeros(part.n_states)
        for w, xp in zip(b, model.successors[0.0]):
            g[part.locate(xp)] += w
        g = np.maximum(g, 0.0)
        g /= g.sum()
        ok, _ = member(umdp.data(s, 0), g)
        assert ok


def test_member_rejects_far_vertex_with_tiny_radius():
    k = KernelParams(1.0, 1.0)
    centers = np.array([[0.0], [3.0]])
    k1 = gram_entries(k, centers)
    data = AmbiguityData(center_gram=k1, lin=k1[:, 0], const=k1[0, 0], eps=1e-4)
    ok, slack = member(data, np.array([0.0, 1.0]))
    assert not ok and slack < 0
    ok0, _ = member(data, np.array([1.0, 0.0]))
    assert ok0


def test_member_validates_simplex():
    k1 = gram_entries(KernelParams(1.0, 1.0), np.array([[0.0], [1.0]]))
    data = AmbiguityData(center_gram=k1, lin=np.zeros(2), const=0.0, eps=1.0)
    with pytest.raises(InputError):
        member(data, np.array([0.7, 0.7]))
    with pytest.raises(InputError):
        member(data, np.array([-0.2, 1.2]))
    with pytest.raises(InputError):
        member(data, np.array([1.0]))


def test_avoid_membership_only_accepts_avoid_dirac():
    rng = np.random.default_rng(5)
    model, part = _setup(rng)
    budget = assemble_budget(model, part, eps1=10.0, eps2_tol=1e-3, eps2_budget=60)
    umdp = build(model, part, budget)
    d = umdp.data(umdp.avoid_state, 1)
    e_avoid = np.eye(part.n_states)[umdp.avoid_state]
    ok, slack = member(d, e_avoid)
    assert ok and slack == 0.0
    ok2, slack2 = member(d, np.full(part.n_states, 1.0 / part.n_states))
    assert not ok2 and slack2 < 0


def test_single_region_partition_feasible_when_radius_covers_fit():
    rng = np.random.default_rng(6)
    k = KernelParams(1.0, 1.0)
    data = Dataset(
        actions=[0.0],
        inputs={0.0: rng.uniform(0, 1, size=(20, 1))},
        successors={0.0: rng.uniform(0, 1, size=(20, 1))},
    )
    model = fit(data, k, 0.01)
    spec = ReachAvoidSpec(Box([0.0], [1.0]), Box([0.0], [1.0]))
    part = build_grid(spec, 1)
    center = part.state_centers[0]
    mu = FiniteMeasure(model.successors[0.0], coefficients(model, 0.0, center))
    dist = mmd(k, FiniteMeasure(center.reshape(1, -1), np.ones(1)), mu)
    eps2 = np.zeros((2, 1))
    good = ErrorBudget(eps1=dist + 0.01, eps2=eps2, eps3=0.0, actions=[0.0])
    build(model, part, good)  # no exception


def test_infeasible_abstraction_names_pair():
    rng = np.random.default_rng(7)
    model, part = _setup(rng)
    eps2 = np.zeros((part.n_states, 2))
    bad = ErrorBudget(eps1=1e-6, eps2=eps2, eps3=0.0, actions=[0.0, 1.0])
    with pytest.raises(InfeasibilityError) as err:
        build(model, part, bad)
    assert err.value.context is not None
    assert err.value.gap > 0


def test_action_set_mismatch_rejected():
    rng = np.random.default_rng(8)
    model, part = _setup(rng)
    eps2 = np.zeros((part.n_states, 1))
    budget = ErrorBudget(eps1=1.0, eps2=eps2, eps3=0.0, actions=[0.0])
    with pytest.raises(InputError):
        build(model, part, budget)


def test_serialization_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    model, part = _setup(rng)
    budget = assemble_budget(model, part, eps1=0.3, eps2_tol=1e-3, eps2_budget=60)
    umdp = build(model, part, budget)
    bin_path = tmp_path / "umdp.bin"
    man_path = tmp_path / "umdp.manifest.json"
    manifest = write_umdp(umdp, bin_path, man_path)
    assert man_path.exists()
    assert all("sha256" in blk for blk in manifest["blocks"])

    loaded = read_umdp(bin_path)
    assert loaded.n_states == umdp.n_states
    assert loaded.actions == umdp.actions
    np.testing.assert_array_equal(loaded.center_gram, umdp.center_gram)
    np.testing.assert_array_equal(loaded.eps_table, umdp.eps_table)
    for ai in range(umdp.n_actions):
        np.testing.assert_array_equal(loaded.betas[ai], umdp.betas[ai])
        np.testing.assert_array_equal(loaded.cross_grams[ai], umdp.cross_grams[ai])
        np.testing.assert_array_equal(loaded.consts[ai], umdp.consts[ai])
    # ambiguity data rebuilt from the container matches bit for bit
    d0, d1 = umdp.data(1, 0), loaded.data(1, 0)
    np.testing.assert_array_equal(d0.lin, d1.lin)
    assert d0.const == d1.const and d0.eps == d1.eps

    # deterministic bytes
    bin2 = tmp_path / "umdp2.bin"
    write_umdp(umdp, bin2)
    assert bin_path.read_bytes() == bin2.read_bytes()

    with pytest.raises(InputError):
        read_umdp(man_path)
