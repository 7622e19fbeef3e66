"""Gaussian kernels, Nystrom landmarks and kernel-PCA coordinates."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import InvalidSpecError

LENGTHSCALE_GRID = (0.5, 0.75, 1.0, 1.25, 1.5, 2.0)
EIGEN_FLOOR = 1e-12
DEFAULT_LANDMARKS = 2000
_CHUNK = 4096


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian kernel ``exp(-|x - y|^2 / (2 lengthscale^2))``.

    ``selection`` records how ``lengthscale`` was (or will be) chosen:
    ``"fixed"`` uses it as given, ``"median"`` multiplies it by the median
    pairwise distance of the standardised training inputs, and ``"cv"``
    picks a multiplier from ``grid`` by held-out validation.
    """

    lengthscale: float = 1.0
    selection: str = "fixed"
    family: str = "gaussian"
    grid: tuple = LENGTHSCALE_GRID

    def __post_init__(self):
        if self.family != "gaussian":
            raise InvalidSpecError(f"unsupported kernel family {self.family!r}")
        if not self.lengthscale > 0:
            raise InvalidSpecError("kernel lengthscale must be positive")
        if self.selection not in ("fixed", "median", "cv"):
            raise InvalidSpecError(f"unknown lengthscale selection rule {self.selection!r}")

    def to_dict(self):
        return {"lengthscale": self.lengthscale, "selection": self.selection,
                "family": self.family, "grid": list(self.grid)}


def gram(X, Y, spec: KernelSpec | float):
    lengthscale = spec.lengthscale if isinstance(spec, KernelSpec) else float(spec)
    if not lengthscale > 0:
        raise InvalidSpecError("kernel lengthscale must be positive")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[1] != Y.shape[1]:
        raise InvalidSpecError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    d2 = cdist(X, Y, "sqeuclidean")
    return np.exp(-d2 / (2.0 * lengthscale ** 2))


def median_heuristic(X, max_points=2000, rng=None):
    """Median pairwise Euclidean distance over at most ``max_points`` rows."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] < 2:
        raise InvalidSpecError("median heuristic needs at least two points")
    if X.shape[0] > max_points:
        rng = np.random.default_rng(0) if rng is None else rng
        X = X[rng.choice(X.shape[0], max_points, replace=False)]
    gamma = float(np.median(pdist(X)))
    if gamma == 0.0:
        raise InvalidSpecError("all points identical; median heuristic gives zero bandwidth")
    return gamma


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X):
        X = np.asarray(X, dtype=float)
        scale = X.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        return cls(X.mean(axis=0), scale)

    @classmethod
    def identity(cls, dim):
        return cls(np.zeros(dim), np.ones(dim))

    def __call__(self, X):
        return (np.asarray(X, dtype=float) - self.mean) / self.scale


@dataclass(frozen=True)
class NystromBasis:
    """Kernel-PCA coordinates computed from a landmark subset.

    ``coords(x) = projection @ (k(x, landmarks) - offset)`` where ``offset``
    is the landmark Gram row mean (zero when uncentred).  The projection
    rows are orthonormal under the centred landmark Gram metric.
    """

    landmarks: np.ndarray  # standardised
    kernel: KernelSpec
    projection: np.ndarray
    eigenvalues: np.ndarray
    offset: np.ndarray
    standardizer: Standardizer
    centered: bool = True

    @property
    def dim(self) -> int:
        return self.projection.shape[0]

    @property
    def n_landmark(self) -> int:
        return self.landmarks.shape[0]

    def kernel_vectors(self, X):
        return gram(self.standardizer(np.atleast_2d(X)), self.landmarks, self.kernel)


def fit_nystrom_pca(X, n_landmark, d, spec: KernelSpec, rng=None, *, center=True, strict=False,
                    standardize=True) -> NystromBasis:
    """Kernel PCA on a uniformly drawn landmark subset of ``X``.

    Landmarks are the first ``n_landmark`` rows of a random permutation, so
    smaller landmark sets drawn with the same generator state are nested.
    If the (centred) landmark Gram has numerical rank below ``d``, ``d`` is
    reduced with a warning, or :class:`InvalidSpecError` is raised when
    ``strict``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    if not (1 <= d <= n_landmark <= n):
        raise InvalidSpecError(f"need 1 <= d ({d}) <= n_landmark ({n_landmark}) <= n ({n})")
    rng = np.random.default_rng(0) if rng is None else rng
    std = Standardizer.fit(X) if standardize else Standardizer.identity(X.shape[1])
    idx = np.sort(rng.permutation(n)[:n_landmark]) if n_landmark < n else np.arange(n)
    L = std(X[idx])
    K = gram(L, L, spec)
    if center:
        row_mean = K.mean(axis=0)
        Kc = K - row_mean[None, :] - row_mean[:, None] + row_mean.mean()
    else:
        row_mean = np.zeros(n_landmark)
        Kc = K
    Kc = 0.5 * (Kc + Kc.T)
    evals, evecs = np.linalg.eigh(Kc)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    tol = max(EIGEN_FLOOR, 1e-10 * max(evals[0], 0.0))
    rank = int(np.sum(evals > tol))
    if rank < d:
        msg = f"landmark Gram has numerical rank {rank} < requested dimension {d}"
        if strict:
            raise InvalidSpecError(msg)
        warnings.warn(msg + "; reducing dimension", RuntimeWarning, stacklevel=2)
        d = max(rank, 1)
    lam = np.maximum(evals[:d], EIGEN_FLOOR)
    vecs = evecs[:, :d]
    # fix eigenvector signs so the largest-magnitude entry is positive
    signs = np.sign(vecs[np.argmax(np.abs(vecs), axis=0), np.arange(d)])
    vecs = vecs * np.where(signs == 0, 1.0, signs)
    projection = vecs.T / np.sqrt(lam)[:, None]
    offset = row_mean if center else np.zeros(n_landmark)
    return NystromBasis(L, spec, projection, lam, offset, std, center)


def project(basis: NystromBasis, X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    out = np.empty((X.shape[0], basis.dim))
    for start in range(0, X.shape[0], _CHUNK):
        kv = basis.kernel_vectors(X[start:start + _CHUNK])
        out[start:start + _CHUNK] = (kv - basis.offset) @ basis.projection.T
    return out


def nystrom_reconstruction_error(X, landmarks, spec: KernelSpec):
    """Relative Frobenius error of ``K_nl K_ll^+ K_ln`` against the full Gram."""
    K = gram(X, X, spec)
    Knl = gram(X, landmarks, spec)
    Kll = gram(landmarks, landmarks, spec)
    approx = Knl @ np.linalg.pinv(Kll, hermitian=True, rcond=1e-12) @ Knl.T
    return float(np.linalg.norm(K - approx) / np.linalg.norm(K))


def resolve_lengthscale(X, spec: KernelSpec, rng=None, max_points=2000) -> KernelSpec:
    """Turn a ``median`` spec into a fixed one on standardised ``X``."""
    if spec.selection != "median":
        return spec
    scale = median_heuristic(Standardizer.fit(X)(X), max_points=max_points, rng=rng)
    return KernelSpec(spec.lengthscale * scale, "fixed", spec.family, spec.grid)
