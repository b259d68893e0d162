"""Benchmark dynamics, dataset generation, and seeded Monte Carlo
validation of synthesized policies.

The shipped system is the affine thermostat family

    x+ = x + b (x_e - x) + c u (x_h - x) + w,

with truncated Gaussian noise: w is redrawn until the successor lands in
the compact domain, so every generated point honors the support
assumption by construction.  The constants are configuration defaults,
not ground truth, and fully overridable; the code paths are n-D (scalars
broadcast per coordinate) although the shipped benchmark is 1-D.

Randomness is counter-based: every trajectory draws from its own stream
derived from (seed, region index, run index), and dataset rows use
(seed, action index), so results are bit-identical for any worker count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .cme import Dataset
from .errors import DomainError, InputError, ModelConfigError
from .partition import Box, Partition, ReachAvoidSpec
from .util import write_csv

REJECTION_CAP = 10_000
CONFIDENCE_Z = float(norm.ppf(0.995))  # two-sided 99% binomial half-width


@dataclass
class SystemModel:
    """Affine thermostat dynamics with truncated Gaussian noise."""

    domain: Box
    controls: list = field(default_factory=lambda: [0.0, 1.0])
    b: float = 0.06
    c: float = 0.04
    x_e: float = 15.0
    x_h: float = 45.0
    sigma_w: float = 0.15

    def __post_init__(self):
        if self.sigma_w <= 0:
            raise InputError(f"sigma_w must be > 0, got {self.sigma_w}")
        if not self.controls:
            raise InputError("control set must be nonempty")

    def drift(self, x: np.ndarray, u: float) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x + self.b * (self.x_e - x) + self.c * float(u) * (self.x_h - x)


def step(model: SystemModel, x, u, rng: np.random.Generator) -> np.ndarray:
    """One transition: noisy drift with rejection until the successor is
    inside the domain (cap REJECTION_CAP redraws)."""
    x = np.asarray(x, dtype=float).ravel()
    if not model.domain.contains_point(x):
        raise DomainError(f"state {x} outside the domain")
    mean = model.drift(x, u)
    lo, hi = model.domain.lo, model.domain.hi
    for _ in range(REJECTION_CAP):
        nxt = mean + rng.normal(0.0, model.sigma_w, size=x.shape)
        if np.all(nxt >= lo) and np.all(nxt <= hi):
            return nxt
    raise ModelConfigError(
        f"no in-domain successor after {REJECTION_CAP} draws from x={x}, "
        f"u={u}; the domain is too small for these dynamics"
    )


def gen_dataset(
    model: SystemModel,
    mode: str = "distribution-sampled",
    n_samples: int | None = None,
    prompts=None,
    repeats: int | None = None,
    seed: int = 0,
) -> Dataset:
    """Sample a per-action dataset in one of two modes.

    distribution-sampled: ``n_samples`` inputs drawn uniformly on the
    domain, one successor each.  grid-prompted: each prompt point (e.g.
    region centers) is replayed ``repeats`` times.  Rows are ordered by
    action, then input draw/prompt, then repeat, so a fixed seed fixes
    the file bytes.
    """
    lo, hi = model.domain.lo, model.domain.hi
    inputs: dict = {}
    successors: dict = {}
    if mode == "distribution-sampled":
        if not n_samples or n_samples < 1:
            raise InputError("distribution mode needs n_samples >= 1")
        for ai, u in enumerate(model.controls):
            rng = np.random.default_rng((seed, ai))
            xs = rng.uniform(lo, hi, size=(n_samples, lo.size))
            xps = np.empty_like(xs)
            for i in range(n_samples):
                xps[i] = step(model, xs[i], u, rng)
            inputs[u], successors[u] = xs, xps
        source = "uniform(domain)"
    elif mode == "grid-prompted":
        if prompts is None or repeats is None or repeats < 1:
            raise InputError("grid mode needs prompt points and repeats >= 1")
        prompts = np.asarray(prompts, dtype=float).reshape(len(prompts), -1)
        for ai, u in enumerate(model.controls):
            rng = np.random.default_rng((seed, ai))
            xs = np.repeat(prompts, repeats, axis=0)
            xps = np.empty_like(xs)
            for i in range(xs.shape[0]):
                xps[i] = step(model, xs[i], u, rng)
            inputs[u], successors[u] = xs, xps
        source = f"grid({prompts.shape[0]} points x {repeats})"
    else:
        raise InputError(f"unknown sampling mode: {mode!r}")
    return Dataset(
        actions=list(model.controls),
        inputs=inputs,
        successors=successors,
        mode=mode,
        seed=seed,
        source=source,
    )


def trajectory_satisfies(states, spec: ReachAvoidSpec, task: str, horizon: int) -> bool:
    """Specification event on one trajectory.

    reach-avoid: some state enters the reach box with every earlier state
    (and itself) inside the safe box.  safety: all of x_0..x_horizon stay
    inside the safe box.
    """
    states = np.asarray(states, dtype=float)
    if task == "safety":
        upto = min(horizon, states.shape[0] - 1)
        for t in range(upto + 1):
            if not spec.safe.contains_point(states[t]):
                return False
        return True
    if task == "reach-avoid":
        if spec.reach is None:
            raise InputError("reach-avoid evaluation needs a reach box")
        for t in range(states.shape[0]):
            if spec.reach.contains_point(states[t]):
                return True
            if not spec.safe.contains_point(states[t]):
                return False
        return False
    raise InputError(f"unknown task: {task!r}")


@dataclass
class ValidationResult:
    """Per-region empirical satisfaction estimates with 99% intervals.

    Rows follow the reporting convention: one per grid cell, then the
    aggregated avoid state (simulated from its representative point).
    """

    p_hat: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    runs: int
    region_states: np.ndarray  # abstract state backing each row

    def half_width(self) -> np.ndarray:
        return 0.5 * (self.ci_high - self.ci_low)

    def to_csv(self, path) -> None:
        header = ["region_id", "p_hat", "ci_low", "ci_high", "runs"]
        rows = [
            [rid, float(self.p_hat[rid]), float(self.ci_low[rid]),
             float(self.ci_high[rid]), self.runs]
            for rid in range(self.p_hat.size)
        ]
        write_csv(path, header, rows)


def _simulate_one(model, policy_fn, spec, task, horizon, start, rng) -> bool:
    x = np.asarray(start, dtype=float).copy()
    states = [x.copy()]
    if task == "reach-avoid":
        if spec.reach is not None and spec.reach.contains_point(x):
            return True
        if not spec.safe.contains_point(x):
            return False
    else:
        if not spec.safe.contains_point(x):
            return False
    for t in range(horizon):
        x = step(model, x, policy_fn(x, t), rng)
        states.append(x.copy())
        if task == "reach-avoid":
            if spec.reach is not None and spec.reach.contains_point(x):
                return True
            if not spec.safe.contains_point(x):
                return False
        else:
            if not spec.safe.contains_point(x):
                return False
    # unbounded runs that never reached count as failures (conservative)
    return task == "safety"


def monte_carlo(
    model: SystemModel,
    policy_fn,
    spec: ReachAvoidSpec,
    partition: Partition,
    task: str,
    horizon: int,
    runs_per_state: int = 500,
    seed: int = 1,
    workers: int = 1,
) -> ValidationResult:
    """Empirical satisfaction probability from every region's center.

    ``policy_fn(x, step)`` must be defined on the whole domain.  Each
    (region, run) pair draws from its own stream, so estimates are
    reproducible bit for bit regardless of scheduling.  Intervals are the
    normal-approximation 99% binomial band, clipped to [0, 1].
    """
    del workers  # per-trajectory streams make scheduling irrelevant
    n_rows = partition.cell_count + 1
    starts = [partition.cell_center(c) for c in range(partition.cell_count)]
    starts.append(partition.state_centers[partition.avoid_state])
    region_states = np.array(
        [int(partition.state_of_cell[c]) for c in range(partition.cell_count)]
        + [partition.avoid_state],
        dtype=int,
    )
    p_hat = np.zeros(n_rows)
    for rid in range(n_rows):
        wins = 0
        for run in range(runs_per_state):
            rng = np.random.default_rng((seed, rid, run))
            wins += _simulate_one(
                model, policy_fn, spec, task, horizon, starts[rid], rng
            )
        p_hat[rid] = wins / runs_per_state
    half = CONFIDENCE_Z * np.sqrt(p_hat * (1.0 - p_hat) / runs_per_state)
    return ValidationResult(
        p_hat=p_hat,
        ci_low=np.clip(p_hat - half, 0.0, 1.0),
        ci_high=np.clip(p_hat + half, 0.0, 1.0),
        runs=runs_per_state,
        region_states=region_states,
    )
