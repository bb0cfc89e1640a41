"""PCA reduction of embedding sets to 2-D/3-D plot data.

Only two or three components are ever needed, so the fit uses power
iteration with deflation on the sample covariance instead of a full
eigendecomposition. Convergence is declared when the iterate stops moving
(per-step change <= 1e-10); after deflating a large leading eigenvalue the
matrix residual has a noise floor proportional to that eigenvalue, so the
iterate-change residual is the meaningful one.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractViolationError, InvalidInputError, NumericalError, StorageError

ITERATION_CAP = 10_000
ITERATE_TOL = 1e-10
ORTHONORMALITY_TOL = 1e-8
EIGENVALUE_FLOOR = -1e-10

_START_SEED = 0x5EED  # fixed start vectors keep fits reproducible


@dataclass(frozen=True, eq=False)
class PcaModel:
    """Mean vector, orthonormal components (columns), descending eigenvalues."""

    mean: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray

    def __post_init__(self):
        mean = np.ascontiguousarray(self.mean, dtype=np.float64)
        comps = np.ascontiguousarray(self.components, dtype=np.float64)
        eigs = np.ascontiguousarray(self.eigenvalues, dtype=np.float64)
        if comps.ndim != 2 or comps.shape[0] != mean.size or comps.shape[1] != eigs.size:
            raise InvalidInputError("inconsistent model shapes")
        gram = comps.T @ comps
        if np.abs(gram - np.eye(comps.shape[1])).max() > ORTHONORMALITY_TOL:
            raise InvalidInputError("components are not orthonormal")
        if np.any(np.diff(eigs) > 0):
            raise InvalidInputError("eigenvalues must be sorted descending")
        if np.any(eigs < EIGENVALUE_FLOOR):
            raise InvalidInputError("eigenvalues must be non-negative")
        for array in (mean, comps, eigs):
            array.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "eigenvalues", eigs)

    @property
    def dim(self) -> int:
        return int(self.mean.size)

    @property
    def n_components(self) -> int:
        return int(self.eigenvalues.size)


def _fix_sign(v: np.ndarray) -> np.ndarray:
    # largest-magnitude entry positive, so fits are comparable across runs
    i = int(np.argmax(np.abs(v)))
    return -v if v[i] < 0 else v


def fit_pca(embeddings, d: int) -> PcaModel:
    """Fit the top-d principal components of a row matrix.

    Mean-centers, forms the sample covariance (divisor m - 1), and extracts
    components one at a time by power iteration, deflating each converged
    eigenpair. Raises :class:`NumericalError` if an iteration exhausts the
    cap without the iterate settling.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    if d not in (2, 3):
        raise InvalidInputError("d must be 2 or 3")
    if X.ndim != 2:
        raise InvalidInputError("embeddings must be a 2-D matrix")
    m, dim = X.shape
    if m < d + 1:
        raise InvalidInputError(f"need at least {d + 1} rows to fit {d} components, got {m}")
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("embeddings contain non-finite values")

    mean = X.mean(axis=0)
    centered = X - mean
    remaining = (centered.T @ centered) / (m - 1)

    rng = np.random.default_rng(_START_SEED)
    components: list[np.ndarray] = []
    eigenvalues: list[float] = []
    for _ in range(d):
        v = rng.standard_normal(dim)
        for c in components:
            v -= (v @ c) * c
        v /= np.linalg.norm(v)
        eigenvalue = 0.0
        converged = False
        for _ in range(ITERATION_CAP):
            w = remaining @ v
            for c in components:
                w -= (w @ c) * c
            norm_w = float(np.linalg.norm(w))
            if norm_w < 1e-30:
                # deflated operator is numerically zero along v: eigenvalue 0
                eigenvalue = 0.0
                converged = True
                break
            v_next = w / norm_w
            step = float(np.linalg.norm(v_next - v))
            v = v_next
            eigenvalue = float(v @ (remaining @ v))
            if step <= ITERATE_TOL:
                converged = True
                break
        if not converged:
            raise NumericalError(
                f"power iteration did not settle within {ITERATION_CAP} iterations "
                f"(last step {step:.3e}, tolerance {ITERATE_TOL:.0e})"
            )
        v = _fix_sign(v)
        components.append(v)
        eigenvalues.append(max(eigenvalue, 0.0))
        remaining = remaining - eigenvalues[-1] * np.outer(v, v)

    order = np.argsort(-np.asarray(eigenvalues), kind="stable")
    comps = np.column_stack([components[i] for i in order])
    eigs = np.asarray([eigenvalues[i] for i in order])
    return PcaModel(mean, comps, eigs)


def project(embeddings, model: PcaModel) -> np.ndarray:
    """Center rows on the model mean and project onto the components."""
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.dim:
        raise ContractViolationError(
            f"embedding dim {X.shape[1]} does not match model dim {model.dim}"
        )
    return (X - model.mean) @ model.components


def export_plot_data(points, labels, path) -> int:
    """Write projected points as CSV (header ``agent,x,y[,z]``), 9 significant digits."""
    P = np.asarray(points, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] not in (2, 3):
        raise InvalidInputError("points must be an m x 2 or m x 3 matrix")
    labels = list(labels)
    if len(labels) != P.shape[0]:
        raise InvalidInputError(f"{len(labels)} labels for {P.shape[0]} points")
    header = ["agent", "x", "y"] + (["z"] if P.shape[1] == 3 else [])
    try:
        with Path(path).open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(header)
            for label, row in zip(labels, P):
                writer.writerow([label] + [f"{value:.9g}" for value in row])
    except OSError as exc:
        raise StorageError(f"cannot write plot data to {path}: {exc}") from exc
    return P.shape[0]
