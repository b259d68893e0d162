"""Conservative grid partition of the compact domain with reach/avoid labels.

The grid covers the whole domain.  Cells are labeled conservatively: a
cell counts as *reach* only if it lies entirely inside the reach box, as
*safe* only if it lies entirely inside the safe box, and otherwise it is
*avoid*.  A box boundary within SNAP_TOL of a cell edge is treated as
aligned, so exactly-aligned specifications do not lose cells to roundoff.

All avoid-labeled cells collapse into a single aggregated abstract state
(the abstraction makes it absorbing regardless of geometry), represented
by one designated point: the center of the bounding box of the avoid
cells.  Two id spaces coexist and both are exposed:

* cell ids 0..cell_count-1 (plus ``cell_count`` for the aggregate avoid
  row) — used by every exported CSV so reports keep per-cell geometry;
* state ids 0..n_states-1 — the abstract states (non-avoid cells in cell
  order, then the aggregated avoid state last), used by the solver.

Immutable after construction; concurrent reads are safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .errors import DomainError, InputError
from .util import write_csv

SNAP_TOL = 1e-9

LABEL_REACH = "reach"
LABEL_SAFE = "safe"
LABEL_AVOID = "avoid"


@dataclass(frozen=True)
class Box:
    """Axis-aligned box [lo, hi] in R^n."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float).ravel()
        hi = np.asarray(self.hi, dtype=float).ravel()
        if lo.shape != hi.shape or lo.size == 0:
            raise InputError("box needs matching nonempty lo/hi vectors")
        if np.any(hi < lo):
            raise InputError(f"box has hi < lo: {lo} .. {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def radius(self) -> float:
        """Largest distance from the center to any point of the box."""
        return float(np.linalg.norm(0.5 * (self.hi - self.lo)))

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    def contains_point(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float).ravel()
        return bool(np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol))

    def contains_box(self, other: "Box", tol: float = SNAP_TOL) -> bool:
        return bool(
            np.all(other.lo >= self.lo - tol) and np.all(other.hi <= self.hi + tol)
        )


@dataclass(frozen=True)
class ReachAvoidSpec:
    """Domain, safe and reach boxes; the avoid set is the complement of the
    safe box (represented implicitly).  ``reach=None`` describes a pure
    safety requirement."""

    domain: Box
    safe: Box
    reach: Box | None = None

    def __post_init__(self):
        if not self.domain.contains_box(self.safe):
            raise InputError("safe box must be contained in the domain")
        if self.reach is not None and not self.safe.contains_box(self.reach):
            raise InputError("reach box must be contained in the safe box")

    @property
    def dim(self) -> int:
        return self.domain.dim


@dataclass
class Partition:
    """Uniform grid over the domain plus the aggregated avoid state."""

    spec: ReachAvoidSpec
    cells_per_dim: np.ndarray          # (n,) ints
    cell_labels: list                   # per cell id
    state_of_cell: np.ndarray           # (cell_count,) -> state id
    state_centers: np.ndarray           # (n_states, n); avoid representative last
    state_radii: np.ndarray             # (n_states,)
    state_labels: list                  # per state id
    avoid_bbox: Box | None = None       # bounding box of avoid cells, if any
    _widths: np.ndarray = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.spec.dim

    @property
    def cell_count(self) -> int:
        return int(np.prod(self.cells_per_dim))

    @property
    def n_states(self) -> int:
        return self.state_centers.shape[0]

    @property
    def avoid_state(self) -> int:
        return self.n_states - 1

    @property
    def reach_states(self) -> np.ndarray:
        return np.array(
            [s for s, lab in enumerate(self.state_labels) if lab == LABEL_REACH],
            dtype=int,
        )

    @property
    def widths(self) -> np.ndarray:
        return self._widths

    # -- cell geometry ----------------------------------------------------

    def _multi_index(self, cell: int) -> tuple:
        return np.unravel_index(cell, tuple(self.cells_per_dim))

    def cell_box(self, cell: int) -> Box:
        idx = np.array(self._multi_index(cell), dtype=float)
        lo = self.spec.domain.lo + idx * self._widths
        return Box(lo, lo + self._widths)

    def cell_center(self, cell: int) -> np.ndarray:
        return self.cell_box(cell).center

    def cell_index(self, x) -> int:
        """Grid cell containing ``x``; points on a shared face resolve to
        the lexicographically smallest adjacent cell."""
        x = np.asarray(x, dtype=float).ravel()
        dom = self.spec.domain
        if x.shape != dom.lo.shape:
            raise InputError(f"point dimension {x.shape} != domain {dom.lo.shape}")
        if not dom.contains_point(x):
            raise DomainError(f"point {x} outside the domain")
        rel = (x - dom.lo) / self._widths
        idx = np.floor(rel).astype(int)
        on_edge = (rel == idx) & (idx >= 1)
        idx[on_edge] -= 1
        idx = np.minimum(idx, self.cells_per_dim - 1)
        return int(np.ravel_multi_index(tuple(idx), tuple(self.cells_per_dim)))

    def locate(self, x) -> int:
        """Abstract state containing ``x`` (avoid cells map to the
        aggregated avoid state)."""
        return int(self.state_of_cell[self.cell_index(x)])

    def state_label(self, state: int) -> str:
        return self.state_labels[state]

    # -- export -----------------------------------------------------------

    def to_csv(self, path) -> None:
        """Rows per grid cell plus one aggregate avoid row.

        ``region_id`` is the cell id; the final row (id = cell_count) is
        the aggregated avoid state with its bounding box and
        representative point.
        """
        n = self.dim
        header = (
            ["region_id", "label"]
            + [f"lo_{d}" for d in range(n)]
            + [f"hi_{d}" for d in range(n)]
            + [f"center_{d}" for d in range(n)]
        )
        rows = []
        for c in range(self.cell_count):
            box = self.cell_box(c)
            rows.append(
                [c, self.cell_labels[c]]
                + [float(v) for v in box.lo]
                + [float(v) for v in box.hi]
                + [float(v) for v in box.center]
            )
        bbox = self.avoid_bbox if self.avoid_bbox is not None else self.spec.domain
        rows.append(
            [self.cell_count, LABEL_AVOID]
            + [float(v) for v in bbox.lo]
            + [float(v) for v in bbox.hi]
            + [float(v) for v in self.state_centers[self.avoid_state]]
        )
        write_csv(path, header, rows)


def build_grid(spec: ReachAvoidSpec, cells_per_dim) -> Partition:
    """Uniform grid over the domain with conservative labels.

    A cell is reach only if it is a subset of the reach box, avoid as soon
    as it overlaps the complement of the safe box with positive volume
    (those cells are merged into the aggregated avoid state), safe
    otherwise.
    """
    cells = np.atleast_1d(np.asarray(cells_per_dim, dtype=int))
    if cells.size == 1 and spec.dim > 1:
        cells = np.full(spec.dim, int(cells[0]))
    if cells.size != spec.dim:
        raise InputError(
            f"cells_per_dim has {cells.size} entries for a {spec.dim}-D domain"
        )
    if np.any(cells < 1):
        raise InputError("cells_per_dim must be >= 1 in every dimension")

    dom = spec.domain
    widths = (dom.hi - dom.lo) / cells
    cell_count = int(np.prod(cells))

    cell_labels = []
    boxes = []
    for multi in product(*(range(c) for c in cells)):
        lo = dom.lo + np.array(multi, dtype=float) * widths
        box = Box(lo, lo + widths)
        boxes.append(box)
        if spec.reach is not None and spec.reach.contains_box(box):
            cell_labels.append(LABEL_REACH)
        elif spec.safe.contains_box(box):
            cell_labels.append(LABEL_SAFE)
        else:
            cell_labels.append(LABEL_AVOID)

    state_of_cell = np.full(cell_count, -1, dtype=int)
    centers = []
    radii = []
    state_labels = []
    for c in range(cell_count):
        if cell_labels[c] != LABEL_AVOID:
            state_of_cell[c] = len(centers)
            centers.append(boxes[c].center)
            radii.append(boxes[c].radius)
            state_labels.append(cell_labels[c])

    avoid_cells = [c for c in range(cell_count) if cell_labels[c] == LABEL_AVOID]
    if avoid_cells:
        lo = np.min([boxes[c].lo for c in avoid_cells], axis=0)
        hi = np.max([boxes[c].hi for c in avoid_cells], axis=0)
        bbox = Box(lo, hi)
        rep = bbox.center
        radius = max(
            float(
                np.linalg.norm(
                    np.maximum(np.abs(boxes[c].lo - rep), np.abs(boxes[c].hi - rep))
                )
            )
            for c in avoid_cells
        )
    else:
        bbox = None
        rep = dom.center
        radius = 0.0
    avoid_state = len(centers)
    state_of_cell[state_of_cell == -1] = avoid_state
    centers.append(rep)
    radii.append(radius)
    state_labels.append(LABEL_AVOID)

    return Partition(
        spec=spec,
        cells_per_dim=cells,
        cell_labels=cell_labels,
        state_of_cell=state_of_cell,
        state_centers=np.array(centers),
        state_radii=np.array(radii),
        state_labels=state_labels,
        avoid_bbox=bbox,
        _widths=widths,
    )
