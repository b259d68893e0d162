"""Finite uncertain-MDP assembly from a fitted model and a partition.

States come from the partition (non-avoid cells plus the aggregated avoid
state), actions from the dataset's control set.  Per (state, action) the
ambiguity set is the simplex intersected with an MMD ball around the
regressed successor embedding at the region center; it is stored through
the three Gram blocks of the membership quadratic

    q(gamma) = gamma' K1 gamma - 2 gamma' (K2 beta) + beta' K3 beta,

where K1 is the Gram over state centers (computed once and shared by all
(s, a)), K2 the centers-by-successors block and K3 the successor Gram for
the action.  Only K1, the per-(s, a) linear term K2 beta and the constant
beta' K3 beta are kept per problem, so memory is O(S^2 + S N + N^2) per
action, dominated by the successor Gram.

The avoid state's weight enters the constraint through an atom at the
partition's designated representative point (the avoid cells' bounding-box
center); it is pinned absorbing, so no ambiguity set is solved there.

The build parallelizes over actions/states; the resulting Umdp is
immutable and shared read-only by the solver.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import qclp
from .cme import CmeModel, coefficients_many
from .errbounds import ErrorBudget
from .errors import InfeasibilityError, InputError
from .kernel import gram_entries
from .partition import LABEL_AVOID, LABEL_REACH, Partition
from .util import ordered_map

SIMPLEX_TOL = 1e-9


@dataclass
class AmbiguityData:
    """Membership data for one (state, action) ambiguity set.

    ``center_gram`` is shared across all (s, a); ``lin = K2 @ beta_cs`` and
    ``const = beta_cs' K3 beta_cs`` fold the action blocks into the only
    quantities the quadratic needs.  ``pinned_vertex`` marks degenerate
    sets that contain exactly one Dirac (the absorbing avoid state).
    """

    center_gram: np.ndarray
    lin: np.ndarray
    const: float
    eps: float
    beta_cs: np.ndarray | None = None
    state: int = -1
    action_index: int = -1
    pinned_vertex: int | None = None
    k1_top_eig: float = None  # Lipschitz constant of grad q is 2x this
    feas_cache: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        self.center_gram = np.asarray(self.center_gram, dtype=float)
        self.lin = np.asarray(self.lin, dtype=float).ravel()
        if self.center_gram.shape != (self.lin.size, self.lin.size):
            raise InputError("center_gram / lin shape mismatch")
        if self.eps < 0:
            raise InputError(f"eps must be >= 0, got {self.eps}")
        if self.k1_top_eig is None:
            self.k1_top_eig = float(np.linalg.eigvalsh(self.center_gram)[-1])

    @property
    def n_states(self) -> int:
        return self.lin.size


def member(data: AmbiguityData, gamma) -> tuple[bool, float]:
    """Ambiguity-set membership test with signed slack eps^2 - q(gamma).

    ``gamma`` must lie on the simplex within SIMPLEX_TOL.  For the pinned
    avoid state only the avoid Dirac is accepted.
    """
    g = np.asarray(gamma, dtype=float).ravel()
    if g.size != data.n_states:
        raise InputError(f"gamma length {g.size} != {data.n_states} states")
    if np.min(g) < -SIMPLEX_TOL or abs(float(np.sum(g)) - 1.0) > SIMPLEX_TOL:
        raise InputError("gamma is off the probability simplex beyond tolerance")
    if data.pinned_vertex is not None:
        expected = np.zeros(data.n_states)
        expected[data.pinned_vertex] = 1.0
        dev = float(np.max(np.abs(g - expected)))
        return dev <= SIMPLEX_TOL, -dev
    slack = data.eps**2 - qclp.quadratic_value(data, g)
    return slack >= -SIMPLEX_TOL, float(slack)


@dataclass
class Umdp:
    """Finite uncertain MDP with per-(state, action) MMD-ball ambiguity sets."""

    actions: list
    center_gram: np.ndarray           # (S, S), shared
    cross_grams: dict                 # action index -> (S, N_a)
    betas: dict                       # action index -> (S, N_a) coefficient rows
    consts: dict                      # action index -> (S,) constant terms
    eps_table: np.ndarray             # (S, A)
    reach_states: np.ndarray
    avoid_state: int
    partition: Partition | None = None
    metadata: dict = field(default_factory=dict)
    k1_top_eig: float = None
    _data_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.k1_top_eig is None:
            self.k1_top_eig = float(np.linalg.eigvalsh(self.center_gram)[-1])

    @property
    def n_states(self) -> int:
        return self.center_gram.shape[0]

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    def data(self, state: int, action_index: int) -> AmbiguityData:
        key = (state, action_index)
        if key not in self._data_cache:
            if state == self.avoid_state:
                self._data_cache[key] = AmbiguityData(
                    center_gram=self.center_gram,
                    lin=np.zeros(self.n_states),
                    const=0.0,
                    eps=0.0,
                    state=state,
                    action_index=action_index,
                    pinned_vertex=self.avoid_state,
                    k1_top_eig=self.k1_top_eig,
                )
            else:
                self._data_cache[key] = AmbiguityData(
                    center_gram=self.center_gram,
                    lin=self.cross_grams[action_index] @ self.betas[action_index][state],
                    const=float(self.consts[action_index][state]),
                    eps=float(self.eps_table[state, action_index]),
                    beta_cs=self.betas[action_index][state],
                    state=state,
                    action_index=action_index,
                    k1_top_eig=self.k1_top_eig,
                )
        return self._data_cache[key]


def build(
    model: CmeModel,
    partition: Partition,
    budget: ErrorBudget,
    feasibility_check: bool = True,
    workers: int = 1,
) -> Umdp:
    """Assemble the uncertain MDP.

    Precomputes the center Gram once, the action blocks once per action
    and the coefficient vectors at every region center.  With
    ``feasibility_check`` each non-avoid (s, a) is verified to admit at
    least one feasible distribution before synthesis starts.
    """
    if list(model.actions) != list(budget.actions):
        raise InputError("model and budget describe different action sets")
    centers = partition.state_centers
    n_states = partition.n_states
    avoid = partition.avoid_state
    k1 = gram_entries(model.params, centers)
    k1_top = float(np.linalg.eigvalsh(k1)[-1])

    cross_grams = {}
    betas = {}
    consts = {}
    for ai, u in enumerate(model.actions):
        k2 = gram_entries(model.params, centers, model.successors[u])
        beta = coefficients_many(model, u, centers).T  # (S, N)
        kpp = model.successor_gram(u)
        consts[ai] = np.einsum("sn,nm,sm->s", beta, kpp, beta)
        cross_grams[ai] = k2
        betas[ai] = beta

    eps_table = budget.totals()
    if eps_table.shape != (n_states, len(model.actions)):
        raise InputError(
            f"budget table shape {eps_table.shape} does not match "
            f"({n_states}, {len(model.actions)})"
        )

    umdp = Umdp(
        actions=list(model.actions),
        center_gram=k1,
        cross_grams=cross_grams,
        betas=betas,
        consts=consts,
        eps_table=eps_table,
        reach_states=partition.reach_states,
        avoid_state=avoid,
        partition=partition,
        k1_top_eig=k1_top,
        metadata={
            "avoid_representative": [float(v) for v in centers[avoid]],
            "avoid_radius": float(partition.state_radii[avoid]),
            "budget_mode": budget.mode,
            "eps1_provenance": budget.eps1_provenance,
        },
    )

    if feasibility_check:
        pairs = [
            (s, ai)
            for s in range(n_states)
            if s != avoid
            for ai in range(len(model.actions))
        ]

        def check(pair):
            s, ai = pair
            data = umdp.data(s, ai)
            value, _, lower = qclp._min_quadratic(data)
            return s, ai, value, lower

        for s, ai, value, lower in ordered_map(check, pairs, workers):
            eps_sq = float(eps_table[s, ai]) ** 2
            if lower > eps_sq + 1e-12:
                raise InfeasibilityError(
                    f"ambiguity set for (state={s}, action={model.actions[ai]!r}) "
                    f"is empty: min quadratic {lower:.6g} > eps^2 {eps_sq:.6g}; "
                    "increase the error budget or refine the data",
                    gap=lower - eps_sq,
                    context=(s, ai),
                )
    return umdp


# -- binary container ---------------------------------------------------------

_MAGIC = b"UMDPBIN\n"
_VERSION = 1


def _pack_array(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def write_umdp(umdp: Umdp, path, manifest_path=None) -> dict:
    """Serialize to a little-endian binary container plus a JSON sidecar
    manifest of shapes and checksums.

    Layout: magic, u32 version, u32 header length, JSON header (shapes,
    actions, state sets, metadata), then the raw float64 blocks in header
    order.
    """
    blocks = [("center_gram", umdp.center_gram), ("eps_table", umdp.eps_table)]
    for ai in range(umdp.n_actions):
        blocks.append((f"cross_gram_{ai}", umdp.cross_grams[ai]))
        blocks.append((f"beta_{ai}", umdp.betas[ai]))
        blocks.append((f"const_{ai}", umdp.consts[ai]))
    header = {
        "version": _VERSION,
        "n_states": umdp.n_states,
        "actions": [float(a) for a in umdp.actions],
        "reach_states": [int(s) for s in umdp.reach_states],
        "avoid_state": int(umdp.avoid_state),
        "metadata": umdp.metadata,
        "blocks": [{"name": name, "shape": list(arr.shape)} for name, arr in blocks],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    manifest = {"version": _VERSION, "blocks": []}
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for name, arr in blocks:
            raw = _pack_array(arr)
            fh.write(raw)
            manifest["blocks"].append(
                {
                    "name": name,
                    "shape": list(np.asarray(arr).shape),
                    "bytes": len(raw),
                    "sha256": hashlib.sha256(raw).hexdigest(),
                }
            )
    if manifest_path is not None:
        with open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return manifest


def read_umdp(path) -> Umdp:
    """Load a container written by :func:`write_umdp`."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise InputError(f"{path} is not an UMDP container")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise InputError(f"unsupported container version {version}")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        arrays = {}
        for blk in header["blocks"]:
            shape = tuple(blk["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            arrays[blk["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    n_actions = len(header["actions"])
    return Umdp(
        actions=[float(a) for a in header["actions"]],
        center_gram=arrays["center_gram"],
        cross_grams={ai: arrays[f"cross_gram_{ai}"] for ai in range(n_actions)},
        betas={ai: arrays[f"beta_{ai}"] for ai in range(n_actions)},
        consts={ai: arrays[f"const_{ai}"] for ai in range(n_actions)},
        eps_table=arrays["eps_table"],
        reach_states=np.array(header["reach_states"], dtype=int),
        avoid_state=int(header["avoid_state"]),
        metadata=header.get("metadata", {}),
    )
