"""Robust dynamic programming over the uncertain MDP.

Pessimistic value iteration (max over actions, min over the ambiguity
set), stationary strategy extraction, optimistic re-evaluation of the
fixed strategy (min replaced by max), and refinement of the abstract
strategy to a continuous-state policy.

The adversary is never materialized: it is realized pointwise by the
inner certified solves, whose reported values under-approximate the true
inner minimum (and over-approximate the maximum), so the value iterates
stay sound whatever the inner iteration budgets.

Two tasks are supported: unbounded reach-avoid (reach states pinned to 1,
iterate to a fixed-point residual) and finite-horizon safety (all
non-avoid states start at 1, exactly ``horizon`` sweeps, a time-varying
greedy policy).  The avoid state is absorbing with value 0 in both.

Each sweep is a barrier: all (state, action) inner solves of the sweep
run against the immutable previous iterate and are reduced in fixed state
order, so results are run-to-run deterministic for any worker count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import qclp
from .abstraction import Umdp
from .errors import CmesynError, InputError, NumericsError
from .partition import Partition
from .util import ordered_map, write_csv

TASK_REACH_AVOID = "reach-avoid"
TASK_SAFETY = "safety"


@dataclass
class ValueBounds:
    """Pessimistic and optimistic satisfaction probabilities per state."""

    p_lower: np.ndarray
    p_upper: np.ndarray
    sweeps_lower: int
    sweeps_upper: int
    residual_lower: float
    residual_upper: float


@dataclass
class Policy:
    """Abstract strategy: stationary, or one action map per time step.

    ``actions`` holds action indices per state; ``table`` (safety mode)
    holds one row per runtime step.  ``action_values`` are the concrete
    control values, so the policy is self-contained for simulation.
    """

    kind: str                      # 'stationary' | 'time-varying'
    action_values: list
    actions: np.ndarray | None = None      # (S,) stationary
    table: np.ndarray | None = None        # (H, S) time-varying
    horizon: int | None = None
    default_action: int = 0
    metadata: dict = field(default_factory=dict)

    def action_index(self, state: int, step: int = 0) -> int:
        if self.kind == "stationary":
            return int(self.actions[state])
        t = min(max(step, 0), self.table.shape[0] - 1)
        return int(self.table[t, state])

    def action_value(self, state: int, step: int = 0):
        return self.action_values[self.action_index(state, step)]


@dataclass
class RdpResult:
    values: np.ndarray
    greedy: np.ndarray                 # last sweep's greedy action indices
    greedy_per_sweep: list             # sweep order: 1 step remaining first
    sweeps: int
    residual: float
    history: list = field(default_factory=list)


class _SweepSolver:
    """Batched inner solves with per-(state, action, sense) warm starts."""

    def __init__(self, umdp: Umdp, tol_obj, tol_feas, max_inner, workers):
        self.umdp = umdp
        self.tol_obj = tol_obj
        self.tol_feas = tol_feas
        self.max_inner = max_inner
        self.workers = workers
        self.warm: dict = {}

    def solve_batch(self, pairs, values, sense, sweep=None) -> np.ndarray:
        """Inner bounds for the given (state, action) pairs against the
        immutable value vector; aggregation order is fixed."""

        def one(pair):
            s, ai = pair
            problem = qclp.QclpProblem(
                values=values,
                data=self.umdp.data(s, ai),
                sense=sense,
                tol_obj=self.tol_obj,
                tol_feas=self.tol_feas,
                max_inner=self.max_inner,
                warm=self.warm.get((s, ai, sense)),
            )
            try:
                return qclp.solve(problem)
            except CmesynError as exc:
                raise type(exc)(
                    f"inner solve failed at state={s}, action="
                    f"{self.umdp.actions[ai]!r}, sweep={sweep}: {exc}"
                ) from exc

        solutions = ordered_map(one, pairs, self.workers)
        out = np.empty(len(pairs))
        for i, (pair, sol) in enumerate(zip(pairs, solutions)):
            s, ai = pair
            self.warm[(s, ai, sense)] = (sol.gamma, sol.dual_lambda)
            out[i] = sol.objective
        return out


def _initial_values(umdp: Umdp, task: str) -> tuple[np.ndarray, np.ndarray]:
    """Initial vector and the indices the recursion actually updates."""
    v = np.zeros(umdp.n_states)
    if task == TASK_REACH_AVOID:
        v[umdp.reach_states] = 1.0
        frozen = set(int(s) for s in umdp.reach_states) | {umdp.avoid_state}
    elif task == TASK_SAFETY:
        v[:] = 1.0
        v[umdp.avoid_state] = 0.0
        frozen = {umdp.avoid_state}
    else:
        raise InputError(f"unknown task: {task!r}")
    active = np.array(
        [s for s in range(umdp.n_states) if s not in frozen], dtype=int
    )
    return v, active


def robust_value_iteration(
    umdp: Umdp,
    task: str = TASK_REACH_AVOID,
    horizon: int | None = None,
    conv_tol: float = 1e-6,
    max_sweeps: int = 500,
    tol_obj: float = 1e-6,
    tol_feas: float = 1e-8,
    max_inner: int = 4000,
    workers: int = 1,
    store_history: bool = False,
) -> RdpResult:
    """Pessimistic values: max over actions of the certified inner minimum.

    Unbounded reach-avoid iterates from below until the sup-norm residual
    drops under ``conv_tol`` (the last iterate under-approximates the
    fixed point, so it is sound); safety runs exactly ``horizon`` sweeps
    and records the greedy actions of every sweep.
    """
    if task == TASK_SAFETY and (horizon is None or horizon < 1):
        raise InputError("safety task needs a horizon >= 1")
    solver = _SweepSolver(umdp, tol_obj, tol_feas, max_inner, workers)
    v, active = _initial_values(umdp, task)
    n_actions = umdp.n_actions
    pairs = [(int(s), ai) for s in active for ai in range(n_actions)]
    greedy = np.zeros(umdp.n_states, dtype=int)
    greedy_per_sweep: list = []
    history = [v.copy()] if store_history else []
    sweeps = max_sweeps if task == TASK_REACH_AVOID else horizon
    residual = 0.0
    done = 0
    slack = 10.0 * tol_obj
    for sweep in range(1, sweeps + 1):
        if pairs:
            q = solver.solve_batch(pairs, v, "min", sweep).reshape(
                len(active), n_actions
            )
        else:
            q = np.zeros((0, n_actions))
        v_new = v.copy()
        sweep_greedy = greedy.copy()
        for i, s in enumerate(active):
            v_new[s] = float(np.max(q[i]))
            sweep_greedy[s] = int(np.argmax(q[i]))
        np.clip(v_new, 0.0, 1.0, out=v_new)
        if task == TASK_REACH_AVOID and np.any(v_new < v - slack):
            raise NumericsError(
                f"pessimistic iterate decreased beyond solver slack at sweep {sweep}"
            )
        if task == TASK_SAFETY and np.any(v_new > v + slack):
            raise NumericsError(
                f"safety iterate increased beyond solver slack at sweep {sweep}"
            )
        residual = float(np.max(np.abs(v_new - v))) if v.size else 0.0
        v = v_new
        greedy = sweep_greedy
        greedy_per_sweep.append(sweep_greedy.copy())
        if store_history:
            history.append(v.copy())
        done = sweep
        if task == TASK_REACH_AVOID and residual < conv_tol:
            break
    return RdpResult(
        values=v,
        greedy=greedy,
        greedy_per_sweep=greedy_per_sweep,
        sweeps=done,
        residual=residual,
        history=history,
    )


def extract_policy(
    umdp: Umdp,
    p_lower: np.ndarray,
    tol_obj: float = 1e-6,
    tol_feas: float = 1e-8,
    max_inner: int = 4000,
    tie_tol: float = 1e-9,
    workers: int = 1,
) -> Policy:
    """Stationary greedy strategy under the converged pessimistic values.

    Ties within ``tie_tol`` are broken first by the larger one-sweep
    safety value (a progress key against stalling on zero-value
    plateaus), then by the lowest action index; every invoked tie break
    is recorded in the policy metadata.  Reach states are pinned to the
    lowest-index action (their value is 1 regardless).
    """
    solver = _SweepSolver(umdp, tol_obj, tol_feas, max_inner, workers)
    v, active = _initial_values(umdp, TASK_REACH_AVOID)
    p_lower = np.asarray(p_lower, dtype=float)
    n_actions = umdp.n_actions
    actions = np.zeros(umdp.n_states, dtype=int)
    ties = []
    if len(active):
        pairs = [(int(s), ai) for s in active for ai in range(n_actions)]
        q = solver.solve_batch(pairs, p_lower, "min").reshape(len(active), n_actions)
        keep = np.ones(umdp.n_states)
        keep[umdp.avoid_state] = 0.0
        progress = None
        for i, s in enumerate(active):
            best = float(np.max(q[i]))
            cand = [ai for ai in range(n_actions) if q[i, ai] >= best - tie_tol]
            if len(cand) > 1:
                if progress is None:
                    progress = solver.solve_batch(
                        pairs, keep, "min"
                    ).reshape(len(active), n_actions)
                pbest = max(progress[i, ai] for ai in cand)
                survivors = [
                    ai for ai in cand if progress[i, ai] >= pbest - tie_tol
                ]
                ties.append(
                    {
                        "state": int(s),
                        "candidates": cand,
                        "progress_survivors": survivors,
                        "chosen": int(survivors[0]),
                    }
                )
                actions[s] = survivors[0]
            else:
                actions[s] = cand[0]
    return Policy(
        kind="stationary",
        action_values=list(umdp.actions),
        actions=actions,
        default_action=0,
        metadata={"tie_breaks": ties, "tie_tol": tie_tol},
    )


def policy_from_sweeps(umdp: Umdp, greedy_per_sweep: list, horizon: int) -> Policy:
    """Time-varying safety policy from the per-sweep greedy actions.

    Sweep t computes the value with t steps remaining, so the action at
    runtime step tau (horizon - tau steps to go) comes from sweep
    horizon - tau.
    """
    if len(greedy_per_sweep) != horizon:
        raise InputError(
            f"expected {horizon} sweeps of greedy actions, got {len(greedy_per_sweep)}"
        )
    table = np.stack([greedy_per_sweep[horizon - 1 - tau] for tau in range(horizon)])
    return Policy(
        kind="time-varying",
        action_values=list(umdp.actions),
        table=table,
        horizon=horizon,
        default_action=0,
    )


def optimistic_bound(
    umdp: Umdp,
    policy: Policy,
    task: str = TASK_REACH_AVOID,
    horizon: int | None = None,
    conv_tol: float = 1e-6,
    max_sweeps: int = 500,
    tol_obj: float = 1e-6,
    tol_feas: float = 1e-8,
    max_inner: int = 4000,
    workers: int = 1,
) -> tuple[np.ndarray, int, float]:
    """Optimistic values of the fixed strategy: the inner minimum becomes
    a maximum.

    Returns (p_upper, sweeps, residual).  For the unbounded task the
    final iterate plus the larger of the residual and ``conv_tol`` is
    reported on non-pinned states (a sound cushion for stopping short of
    the fixed point); the finite-horizon value is exact up to the
    certified inner bounds, which already over-approximate.
    """
    solver = _SweepSolver(umdp, tol_obj, tol_feas, max_inner, workers)
    v, active = _initial_values(umdp, task)
    if task == TASK_SAFETY:
        if horizon is None:
            horizon = policy.horizon
        if policy.kind != "time-varying":
            raise InputError("safety task needs the time-varying policy")
        sweeps = horizon
    else:
        if policy.kind != "stationary":
            raise InputError("reach-avoid task needs a stationary policy")
        sweeps = max_sweeps
    residual = 0.0
    done = 0
    for sweep in range(1, sweeps + 1):
        if task == TASK_SAFETY:
            step_actions = policy.table[horizon - sweep]
        else:
            step_actions = policy.actions
        pairs = [(int(s), int(step_actions[s])) for s in active]
        q = solver.solve_batch(pairs, v, "max", sweep) if pairs else np.zeros(0)
        v_new = v.copy()
        for i, s in enumerate(active):
            v_new[s] = q[i]
        np.clip(v_new, 0.0, 1.0, out=v_new)
        residual = float(np.max(np.abs(v_new - v))) if v.size else 0.0
        v = v_new
        done = sweep
        if task == TASK_REACH_AVOID and residual < conv_tol:
            break
    if task == TASK_REACH_AVOID and len(active):
        v[active] = np.minimum(v[active] + max(conv_tol, residual), 1.0)
    return v, done, residual


def solve_task(
    umdp: Umdp,
    task: str,
    horizon: int | None = None,
    conv_tol: float = 1e-6,
    max_sweeps: int = 500,
    tol_obj: float = 1e-6,
    tol_feas: float = 1e-8,
    max_inner: int = 4000,
    workers: int = 1,
) -> tuple[ValueBounds, Policy]:
    """Full synthesis: pessimistic values, strategy, optimistic values."""
    opts = dict(
        tol_obj=tol_obj, tol_feas=tol_feas, max_inner=max_inner, workers=workers
    )
    result = robust_value_iteration(
        umdp, task=task, horizon=horizon, conv_tol=conv_tol,
        max_sweeps=max_sweeps, **opts,
    )
    if task == TASK_SAFETY:
        policy = policy_from_sweeps(umdp, result.greedy_per_sweep, horizon)
    else:
        policy = extract_policy(umdp, result.values, **opts)
    p_upper, up_sweeps, up_residual = optimistic_bound(
        umdp, policy, task=task, horizon=horizon, conv_tol=conv_tol,
        max_sweeps=max_sweeps, **opts,
    )
    bounds = ValueBounds(
        p_lower=result.values,
        p_upper=p_upper,
        sweeps_lower=result.sweeps,
        sweeps_upper=up_sweeps,
        residual_lower=result.residual,
        residual_upper=up_residual,
    )
    return bounds, policy


def refine(policy: Policy, partition: Partition):
    """Continuous-state policy: the region's action at the located state.

    Returns ``pi(x, step=0) -> control value``; raises a domain error
    outside X.  The avoid state uses the designated default action.
    """

    def pi(x, step: int = 0):
        state = partition.locate(x)
        return policy.action_value(state, step)

    return pi


def results_csv(path, partition: Partition, bounds: ValueBounds, policy: Policy) -> None:
    """Rows ``region_id,center_*,label,action,p_lower,p_upper`` per grid
    cell plus the aggregate avoid row (id = cell_count); the action column
    is the step-0 slice for time-varying policies."""
    n = partition.dim
    header = (
        ["region_id"]
        + [f"center_{d}" for d in range(n)]
        + ["label", "action", "p_lower", "p_upper"]
    )
    rows = []
    for rid in range(partition.cell_count + 1):
        if rid == partition.cell_count:
            s = partition.avoid_state
            center = partition.state_centers[s]
            label = partition.state_labels[s]
        else:
            s = int(partition.state_of_cell[rid])
            center = partition.cell_center(rid)
            label = partition.cell_labels[rid]
        rows.append(
            [rid]
            + [float(c) for c in center]
            + [
                label,
                float(policy.action_value(s, 0)),
                float(bounds.p_lower[s]),
                float(bounds.p_upper[s]),
            ]
        )
    write_csv(path, header, rows)


def policy_csv(path, partition: Partition, policy: Policy) -> None:
    """Full policy table, long format ``step,region_id,action`` (stationary
    policies emit a single step-0 block)."""
    header = ["step", "region_id", "action"]
    steps = range(policy.horizon) if policy.kind == "time-varying" else range(1)
    rows = []
    for t in steps:
        for rid in range(partition.cell_count + 1):
            s = (
                partition.avoid_state
                if rid == partition.cell_count
                else int(partition.state_of_cell[rid])
            )
            rows.append([t, rid, float(policy.action_value(s, t))])
    write_csv(path, header, rows)
