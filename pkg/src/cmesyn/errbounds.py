"""Certified abstraction error budget: eps = eps1 + eps2 + eps3.

* eps1 — statistical learning error.  Either supplied by the user (the
  general sampling setting gives no computable constant) or, for
  grid-prompted datasets from a Lipschitz vector field, the explicit
  concentration bound with known constants.
* eps2 — shift of the regressed embedding between a region's center and
  its worst interior point, certified per (region, action) by Lipschitz
  global optimization (Piyavskii-Shubert in 1-D, bound-ordered branch and
  bound over sub-boxes otherwise).  The certificate is the maximum of the
  upper envelope, so it over-approximates the true maximum even when the
  probe budget runs out early.
* eps3 — successor-snapping error to region centers, in closed form for
  the Gaussian kernel.

The squared cross term in eps3 uses the factor-2 expansion
k(c,c) + k(y,y) - 2 k(c,y) = ||k(.,c) - k(.,y)||^2, which is what both the
soundness argument and the tightness construction require; the choice is
recorded in the budget notes.

Per-(region, action) optimizations are independent; they are evaluated in
lock-step batches so the O(N^2) coefficient solves amortize across
regions, and results land in per-key slots with no shared mutable state.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .cme import CmeModel, coefficients_many, evaluation_lipschitz
from .errors import InputError
from .kernel import KernelParams
from .partition import Partition
from .util import write_csv

EPS3_NOTE = "eps3 uses the factor-2 cross term k(c,c)+k(y,y)-2k(c,y)"

BUDGET_MODES = ("per-region", "global")


@dataclass
class ErrorBudget:
    """Error components and their provenance for one abstraction.

    ``eps2`` is an (n_states, n_actions) table of certified bounds (zero
    on the avoid row).  In ``per-region`` mode the total for (s, a) is
    eps1 + eps2[s, a] + eps3; ``global`` mode replaces eps2[s, a] by its
    maximum so the radius matches the verbatim single-epsilon definition.
    """

    eps1: float
    eps2: np.ndarray
    eps3: float
    actions: list
    mode: str = "per-region"
    eps1_provenance: str = "user"      # 'user' | 'theorem'
    delta: float | None = None
    lipschitz: float | None = None     # vector-field constant L
    eta: float | None = None           # grid fineness
    grid_points: int | None = None     # M prompt points (theorem mode)
    eps2_certified: np.ndarray | None = None
    eps2_probes: np.ndarray | None = None
    notes: list = field(default_factory=lambda: [EPS3_NOTE])

    def __post_init__(self):
        self.eps2 = np.asarray(self.eps2, dtype=float)
        if self.mode not in BUDGET_MODES:
            raise InputError(f"unknown budget mode: {self.mode!r}")
        if self.eps1 < 0 or self.eps3 < 0 or np.any(self.eps2 < 0):
            raise InputError("error components must be nonnegative")

    def eps2_effective(self) -> np.ndarray:
        if self.mode == "global":
            return np.full_like(self.eps2, float(np.max(self.eps2)))
        return self.eps2

    def total(self, state: int, action_index: int) -> float:
        return float(self.eps1 + self.eps2_effective()[state, action_index] + self.eps3)

    def totals(self) -> np.ndarray:
        return self.eps1 + self.eps2_effective() + self.eps3


def eps1_explicit(
    params: KernelParams, lip: float, eta: float, n: int, m: int, delta: float
) -> float:
    """Explicit concentration bound for grid-prompted datasets.

    ``n`` successors are drawn at each of ``m`` prompt points of a grid of
    fineness ``eta``, for a vector field that is ``lip``-Lipschitz in the
    state.  Natural logarithm throughout.
    """
    if not 0.0 < delta < 1.0:
        raise InputError(f"delta must lie in (0, 1), got {delta}")
    if lip <= 0:
        raise InputError(f"Lipschitz constant must be > 0, got {lip}")
    if eta < 0:
        raise InputError(f"eta must be >= 0, got {eta}")
    if n < 1 or m < 1:
        raise InputError("need at least one sample and one grid point")
    ratio = params.sigma_f / params.sigma_l
    return float(
        ratio * (lip * eta + math.sqrt(1.0 / n) + math.sqrt(2.0 * math.log(m / delta) / n))
    )


def mmd_lipschitz_bound(params: KernelParams, lip: float, eta: float) -> float:
    """MMD shift of the true transition law between inputs ``eta`` apart."""
    if lip <= 0:
        raise InputError(f"Lipschitz constant must be > 0, got {lip}")
    if eta < 0:
        raise InputError(f"eta must be >= 0, got {eta}")
    return float(params.sigma_f / params.sigma_l * lip * eta)


def eps3_bound(
    params: KernelParams, partition: Partition, include_avoid: bool = False
) -> float:
    """Closed-form supremum of the snapping error over the grid regions.

    For radius r the supremum of ||k(.,c) - k(.,y)|| over ||y - c|| <= r is
    sqrt(2 sigma_f^2 (1 - exp(-r^2 / (2 sigma_l^2)))).  The aggregated
    avoid state's own (large) radius is excluded by default: including it
    makes the budget scale with the avoid region's diameter instead of the
    grid fineness, which voids the bounds at any resolution; the flag
    restores the fully conservative variant.
    """
    radii = partition.state_radii
    if not include_avoid:
        radii = radii[np.arange(partition.n_states) != partition.avoid_state]
    if radii.size == 0:
        return 0.0
    r = float(np.max(radii))
    return snapping_error(params, r)


def snapping_error(params: KernelParams, radius: float) -> float:
    """sqrt(2 sigma_f^2 (1 - exp(-r^2 / (2 sigma_l^2)))); bounded by
    sigma_f * sqrt(2)."""
    if radius < 0:
        raise InputError(f"radius must be >= 0, got {radius}")
    t = radius**2 / (2.0 * params.sigma_l**2)
    return float(params.sigma_f * math.sqrt(2.0 * (1.0 - math.exp(-t))))


# -- certified per-region maximization of the embedding shift -----------------


class _Piyavskii1D:
    """Certified maximum of an L-Lipschitz function on [lo, hi].

    Maintains the sawtooth upper envelope; the certificate is its peak,
    which upper-bounds the maximum for any probe budget.
    """

    def __init__(self, lo: float, hi: float, lip: float):
        self.lo, self.hi, self.lip = lo, hi, lip
        self.xs: list = []
        self.fs: list = []
        self.best = 0.0
        self._pending = [lo, 0.5 * (lo + hi), hi] if hi > lo else [lo]
        self.probes = 0

    def proposals(self) -> list:
        if self._pending:
            out, self._pending = self._pending, []
            return out
        if len(self.xs) < 2 or self.lip <= 0:
            return []
        peak, idx = self._peak()
        xi, xj = self.xs[idx], self.xs[idx + 1]
        fi, fj = self.fs[idx], self.fs[idx + 1]
        z = 0.5 * (xi + xj) + (fj - fi) / (2.0 * self.lip)
        return [min(max(z, xi), xj)]

    def feed(self, xs, fs) -> None:
        for x, f in zip(xs, fs):
            self.xs.append(float(np.asarray(x).ravel()[0]))
            self.fs.append(float(f))
            self.probes += 1
        order = np.argsort(self.xs)
        self.xs = [self.xs[i] for i in order]
        self.fs = [self.fs[i] for i in order]
        self.best = max(self.fs)

    def _peak(self) -> tuple:
        best_peak, best_idx = -math.inf, 0
        for i in range(len(self.xs) - 1):
            peak = 0.5 * (self.fs[i] + self.fs[i + 1]) + 0.5 * self.lip * (
                self.xs[i + 1] - self.xs[i]
            )
            if peak > best_peak:
                best_peak, best_idx = peak, i
        return best_peak, best_idx

    def bound(self) -> float:
        if len(self.xs) < 2:
            if not self.xs:
                return self.lip * 0.5 * (self.hi - self.lo)
            return self.best + self.lip * (self.hi - self.lo)
        return max(self._peak()[0], self.best)

    def done(self, tol: float) -> bool:
        if self._pending:
            return False
        if len(self.xs) < 2 or self.lip <= 0:
            return len(self.xs) >= 1
        return self.bound() - self.best <= tol


class _BranchBound:
    """Certified maximum over a box: split the widest dimension, order by
    upper bound f(center) + L * radius, child bounds inherit the parent's."""

    def __init__(self, lo: np.ndarray, hi: np.ndarray, lip: float):
        self.lip = lip
        self.best = 0.0
        self.probes = 0
        self._counter = 0
        self._heap: list = []
        self._waiting: list = [(np.asarray(lo, float), np.asarray(hi, float), math.inf)]

    @staticmethod
    def _radius(lo, hi) -> float:
        return float(np.linalg.norm(0.5 * (hi - lo)))

    def proposals(self) -> list:
        return [0.5 * (lo + hi) for lo, hi, _ in self._waiting]

    def feed(self, xs, fs) -> None:
        waiting, self._waiting = self._waiting, []
        for (lo, hi, parent_ub), f in zip(waiting, fs):
            self.probes += 1
            f = float(f)
            self.best = max(self.best, f)
            ub = min(f + self.lip * self._radius(lo, hi), parent_ub)
            heapq.heappush(self._heap, (-ub, self._counter, lo, hi, f))
            self._counter += 1

    def bound(self) -> float:
        if self._waiting:
            return math.inf
        if not self._heap:
            return self.best
        return max(-self._heap[0][0], self.best)

    def done(self, tol: float) -> bool:
        return not self._waiting and self.bound() - self.best <= tol

    def expand(self) -> None:
        """Split the current best box and queue its children for probing."""
        if not self._heap:
            return
        neg_ub, _, lo, hi, _ = heapq.heappop(self._heap)
        widths = hi - lo
        d = int(np.argmax(widths))
        if widths[d] <= 0:
            heapq.heappush(self._heap, (neg_ub, self._counter, lo, hi, 0.0))
            self._counter += 1
            return
        mid = 0.5 * (lo[d] + hi[d])
        hi_left = hi.copy()
        hi_left[d] = mid
        lo_right = lo.copy()
        lo_right[d] = mid
        self._waiting = [(lo, hi_left, -neg_ub), (lo_right, hi, -neg_ub)]


def _shift_evaluator(model: CmeModel, action, partition: Partition):
    """Batched evaluator of the center-shift objective g_s(x).

    g_s(x)^2 = (beta(x) - beta(c_s))' K3 (beta(x) - beta(c_s)); evaluating
    many (s, x) pairs at once turns both the coefficient solve and the
    successor-Gram product into single BLAS-3 calls.
    """
    kpp = model.successor_gram(action)
    beta_centers = coefficients_many(model, action, partition.state_centers)

    def evaluate(states, xs) -> np.ndarray:
        b = coefficients_many(model, action, np.asarray(xs, dtype=float))
        d = b - beta_centers[:, states]
        vals_sq = np.einsum("nq,nq->q", d, kpp @ d)
        return np.sqrt(np.clip(vals_sq, 0.0, None))

    return evaluate


def eps2_bounds(
    model: CmeModel,
    partition: Partition,
    action,
    tol: float = 1e-3,
    budget: int = 200,
    workers: int = 1,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Certified upper bounds on the embedding shift per region.

    Returns (bounds, certified, probes) over abstract states.  ``bounds``
    over-approximates max over the region of g_s whatever the budget;
    ``certified[s]`` records whether the bound is within ``tol`` of the
    best probe.  Regions that exhaust ``budget`` keep their (sound)
    envelope bound and are flagged uncertified.  The avoid state is
    pinned absorbing, so its entry is zero.
    """
    del workers  # parallelism comes from batched BLAS; order is fixed anyway
    if tol <= 0:
        raise InputError(f"tol must be > 0, got {tol}")
    if budget < 3:
        raise InputError(f"probe budget must allow the initial probes, got {budget}")
    n_states = partition.n_states
    avoid = partition.avoid_state
    lip = evaluation_lipschitz(model, action)
    evaluate = _shift_evaluator(model, action, partition)

    opts: dict = {}
    for cell in range(partition.cell_count):
        s = int(partition.state_of_cell[cell])
        if s == avoid or s in opts:
            continue
        box = partition.cell_box(cell)
        if box.radius == 0.0:
            continue
        if partition.dim == 1:
            opts[s] = _Piyavskii1D(float(box.lo[0]), float(box.hi[0]), lip)
        else:
            opts[s] = _BranchBound(box.lo, box.hi, lip)

    active = set(opts)
    while active:
        batch_states: list = []
        batch_xs: list = []
        spans: list = []
        for s in sorted(active):
            opt = opts[s]
            if isinstance(opt, _BranchBound) and not opt.proposals():
                opt.expand()
            props = opt.proposals()
            spans.append((s, len(props)))
            for x in props:
                batch_states.append(s)
                batch_xs.append(np.atleast_1d(x))
        if not batch_xs:
            break
        vals = evaluate(np.array(batch_states), np.vstack(batch_xs))
        pos = 0
        for s, count in spans:
            opts[s].feed(batch_xs[pos : pos + count], vals[pos : pos + count])
            pos += count
        for s in list(active):
            opt = opts[s]
            if opt.done(tol) or opt.probes >= budget:
                active.discard(s)

    bounds = np.zeros(n_states)
    certified = np.ones(n_states, dtype=bool)
    probes = np.zeros(n_states, dtype=int)
    for s, opt in opts.items():
        bounds[s] = opt.bound()
        certified[s] = opt.done(tol)
        probes[s] = opt.probes
    return bounds, certified, probes


def assemble_budget(
    model: CmeModel,
    partition: Partition,
    *,
    eps1: float | None = None,
    theorem: dict | None = None,
    eps2_tol: float = 1e-3,
    eps2_budget: int = 200,
    mode: str = "per-region",
    eps3_include_avoid: bool = False,
    workers: int = 1,
) -> ErrorBudget:
    """Compute the full budget for a fitted model over a partition.

    Exactly one of ``eps1`` (user-supplied) or ``theorem`` (dict with
    keys ``lipschitz``, ``delta``, ``n``, ``m``, and optionally ``eta``
    defaulting to the largest grid-cell radius) must be given.
    """
    if (eps1 is None) == (theorem is None):
        raise InputError("provide exactly one of eps1 or theorem parameters")
    if theorem is not None:
        eta = theorem.get("eta")
        if eta is None:
            radii = partition.state_radii[
                np.arange(partition.n_states) != partition.avoid_state
            ]
            eta = float(np.max(radii)) if radii.size else 0.0
        eps1_val = eps1_explicit(
            model.params,
            theorem["lipschitz"],
            eta,
            theorem["n"],
            theorem["m"],
            theorem["delta"],
        )
        provenance = "theorem"
        delta = theorem["delta"]
        lipschitz = theorem["lipschitz"]
        grid_points = theorem["m"]
    else:
        eps1_val = float(eps1)
        provenance = "user"
        delta = eta = lipschitz = grid_points = None

    eps2 = np.zeros((partition.n_states, len(model.actions)))
    certified = np.ones_like(eps2, dtype=bool)
    probes = np.zeros_like(eps2, dtype=int)
    for ai, u in enumerate(model.actions):
        b, c, p = eps2_bounds(
            model, partition, u, tol=eps2_tol, budget=eps2_budget, workers=workers
        )
        eps2[:, ai] = b
        certified[:, ai] = c
        probes[:, ai] = p

    return ErrorBudget(
        eps1=eps1_val,
        eps2=eps2,
        eps3=eps3_bound(model.params, partition, include_avoid=eps3_include_avoid),
        actions=list(model.actions),
        mode=mode,
        eps1_provenance=provenance,
        delta=delta,
        lipschitz=lipschitz,
        eta=eta,
        grid_points=grid_points,
        eps2_certified=certified,
        eps2_probes=probes,
    )


def budget_csv(budget: ErrorBudget, partition: Partition, path) -> None:
    """Rows ``region_id,action,eps1,eps2,eps3,eps_total,certified`` per
    grid cell and action, plus the aggregate avoid rows."""
    header = ["region_id", "action", "eps1", "eps2", "eps3", "eps_total", "certified"]
    eff = budget.eps2_effective()
    cert = (
        budget.eps2_certified
        if budget.eps2_certified is not None
        else np.ones_like(eff, dtype=bool)
    )
    rows = []
    ids = list(range(partition.cell_count)) + [partition.cell_count]
    for rid in ids:
        s = (
            partition.avoid_state
            if rid == partition.cell_count
            else int(partition.state_of_cell[rid])
        )
        for ai, u in enumerate(budget.actions):
            if s == partition.avoid_state:
                rows.append([rid, float(u), 0.0, 0.0, 0.0, 0.0, True])
            else:
                rows.append(
                    [
                        rid,
                        float(u),
                        budget.eps1,
                        float(eff[s, ai]),
                        budget.eps3,
                        budget.total(s, ai),
                        bool(cert[s, ai]),
                    ]
                )
    write_csv(path, header, rows)
