"""Kernel ridge regression of the transition law, one regressor per control.

Fitting stores a Cholesky factor of the regularized input Gram matrix per
action; every later query (coefficient vectors, embeddings, norms) is a
back-substitution against that factor.  The factorization is computed once
because coefficient vectors are requested at every region center and at
every probe of the per-region error optimization, so refactorizing would
dominate the whole pipeline.

Models are immutable after :func:`fit`; concurrent read-only queries are
safe.  The successor Gram matrix is cached lazily per action (it is needed
by both the error-bound optimizer and the abstraction builder and costs
O(N^2) memory, which dominates sizing at large N).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import InputError, RegularizationError
from .kernel import FiniteMeasure, KernelParams, as_points, gram_entries
from .util import fmt

DATASET_MODES = ("grid-prompted", "distribution-sampled")


@dataclass
class Dataset:
    """Per-action (state, next-state) sample pairs with generation metadata.

    ``inputs[u]`` and ``successors[u]`` are (N_u, n) arrays; every action
    needs at least one sample and all points share one dimension.
    """

    actions: list
    inputs: dict
    successors: dict
    mode: str = "distribution-sampled"
    seed: int | None = None
    source: str = ""

    def __post_init__(self):
        if not self.actions:
            raise InputError("dataset needs at least one action")
        if self.mode not in DATASET_MODES:
            raise InputError(f"unknown dataset mode: {self.mode!r}")
        dim = None
        for u in self.actions:
            if u not in self.inputs or u not in self.successors:
                raise InputError(f"action {u!r} has no samples")
            x = as_points(self.inputs[u], "inputs")
            xp = as_points(self.successors[u], "successors")
            if x.shape != xp.shape:
                raise InputError(
                    f"action {u!r}: inputs {x.shape} vs successors {xp.shape}"
                )
            if dim is None:
                dim = x.shape[1]
            elif x.shape[1] != dim:
                raise InputError("actions have inconsistent state dimension")
            self.inputs[u] = x
            self.successors[u] = xp

    @property
    def dim(self) -> int:
        return self.inputs[self.actions[0]].shape[1]

    def n_samples(self, action) -> int:
        return self.inputs[action].shape[0]

    def save_csv(self, path) -> None:
        """One sample per row: ``action,x_0..x_{n-1},xnext_0..xnext_{n-1}``."""
        n = self.dim
        header = (
            ["action"]
            + [f"x_{i}" for i in range(n)]
            + [f"xnext_{i}" for i in range(n)]
        )
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for u in self.actions:
                for x, xp in zip(self.inputs[u], self.successors[u]):
                    writer.writerow(
                        [fmt(float(u))] + [fmt(float(v)) for v in x]
                        + [fmt(float(v)) for v in xp]
                    )

    @staticmethod
    def load_csv(path, mode="distribution-sampled", seed=None, source="") -> "Dataset":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if not header or header[0] != "action" or (len(header) - 1) % 2 != 0:
                raise InputError(f"malformed dataset header in {path}")
            n = (len(header) - 1) // 2
            actions: list = []
            xs: dict = {}
            xps: dict = {}
            for row in reader:
                if not row:
                    continue
                u = float(row[0])
                if u not in xs:
                    actions.append(u)
                    xs[u] = []
                    xps[u] = []
                vals = [float(v) for v in row[1:]]
                xs[u].append(vals[:n])
                xps[u].append(vals[n:])
        return Dataset(
            actions=actions,
            inputs={u: np.array(v) for u, v in xs.items()},
            successors={u: np.array(v) for u, v in xps.items()},
            mode=mode,
            seed=seed,
            source=source,
        )


@dataclass
class CmeModel:
    """Fitted per-action regressor of the transition embedding.

    Holds, per action, the training points and the Cholesky factor of
    (K + N*lambda*I); coefficient queries and norms derive from these.
    """

    params: KernelParams
    lam: float
    actions: list
    inputs: dict
    successors: dict
    _chol: dict = field(repr=False)
    _succ_gram: dict = field(default_factory=dict, repr=False)
    _norm: dict = field(default_factory=dict, repr=False)

    @property
    def dim(self) -> int:
        return self.inputs[self.actions[0]].shape[1]

    def n_samples(self, action) -> int:
        return self.inputs[action].shape[0]

    def _require(self, action):
        if action not in self._chol:
            raise InputError(f"unknown action: {action!r}")

    def successor_gram(self, action) -> np.ndarray:
        """Gram matrix over training successors, cached per action."""
        self._require(action)
        if action not in self._succ_gram:
            self._succ_gram[action] = gram_entries(
                self.params, self.successors[action]
            )
        return self._succ_gram[action]

    def release_caches(self) -> None:
        """Drop cached successor Grams (O(N^2) each) after abstraction."""
        self._succ_gram.clear()


def fit(data: Dataset, params: KernelParams, lam: float) -> CmeModel:
    """Factor the regularized Gram system for every action.

    ``lam`` >= 0; with lam = 0 the raw Gram matrix must be positive
    definite (distinct inputs), otherwise a regularization error tells the
    caller to pick lam > 0.  No silent jitter is added on failure: the
    statistical error budget is tied to the declared lam.
    """
    if lam < 0:
        raise InputError(f"lambda must be >= 0, got {lam}")
    chol = {}
    for u in data.actions:
        x = data.inputs[u]
        n = x.shape[0]
        a = gram_entries(params, x)
        a[np.diag_indices_from(a)] += n * lam
        try:
            chol[u] = sla.cho_factor(a, lower=True, overwrite_a=True)
        except np.linalg.LinAlgError as exc:
            if lam == 0:
                raise RegularizationError(
                    f"Gram matrix for action {u!r} is singular with lambda=0; "
                    "refit with lambda > 0"
                ) from exc
            raise RegularizationError(
                f"(K + N*lambda*I) for action {u!r} is not positive definite "
                f"at lambda={lam}"
            ) from exc
    return CmeModel(
        params=params,
        lam=lam,
        actions=list(data.actions),
        inputs={u: data.inputs[u] for u in data.actions},
        successors={u: data.successors[u] for u in data.actions},
        _chol=chol,
    )


def coefficients_many(model: CmeModel, action, points) -> np.ndarray:
    """Coefficient vectors for a batch of query points.

    Returns an (N, q) array whose column j solves
    (K + N*lambda*I) beta = k_xhat(points[j]).
    """
    model._require(action)
    pts = as_points(points, "query points")
    if pts.shape[1] != model.dim:
        raise InputError(f"query dimension {pts.shape[1]} != model dim {model.dim}")
    kvec = gram_entries(model.params, model.inputs[action], pts)
    return sla.cho_solve(model._chol[action], kvec)


def coefficients(model: CmeModel, action, x) -> np.ndarray:
    """Coefficient vector beta(x) of length N for one query point.

    Weights may be negative and need not sum to one.
    """
    x = np.asarray(x, dtype=float).reshape(1, -1)
    return coefficients_many(model, action, x)[:, 0]


def embed_at(model: CmeModel, action, x) -> FiniteMeasure:
    """Predicted successor embedding at ``x``: training successors weighted
    by the coefficient vector."""
    w = coefficients(model, action, x)
    return FiniteMeasure(model.successors[action], w)


def vrkhs_norm(model: CmeModel, action) -> float:
    """Norm of the fitted regressor in the vector-valued RKHS.

    With W = (K + N*lambda*I)^{-1} and Kp the successor Gram matrix, the
    squared norm is sum_ij (W K W)_ij (Kp)_ij.  Using W K W = W - N*lambda*W^2
    this reduces to tr(W Kp) - N*lambda*tr(W (W Kp)), two triangular solves
    and one matmul.  Used downstream as a Lipschitz constant, so it is
    cached per action.
    """
    model._require(action)
    if action in model._norm:
        return model._norm[action]
    n = model.n_samples(action)
    w = sla.cho_solve(model._chol[action], np.eye(n))
    f = w @ model.successor_gram(action)
    norm_sq = float(np.trace(f)) - n * model.lam * float(np.sum(w * f.T))
    value = float(np.sqrt(max(norm_sq, 0.0)))
    model._norm[action] = value
    return value


def evaluation_lipschitz(model: CmeModel, action) -> float:
    """Lipschitz constant of x -> embedding(x) in MMD: norm * sigma_f / sigma_l."""
    return vrkhs_norm(model, action) * model.params.sigma_f / model.params.sigma_l
