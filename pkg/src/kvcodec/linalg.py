"""Dense matrix helpers: SVD (exact and randomized), PCA, Procrustes.

Matrices are plain 2-D ``float64`` numpy arrays. Everything here is a pure
function of its inputs; returned arrays are marked read-only where they end
up inside an immutable model.

Practical limits: ``exact_svd`` is LAPACK ``gesdd`` and is meant for
oracle-sized inputs (min dimension up to a few thousand). For calibration
matrices with tens of thousands of features use ``randomized_svd`` with a
target rank well below ``min(n, p)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRow, InvalidInput, NumericalFailure

DEFAULT_POWER_ITERATIONS = 8
DEFAULT_OVERSAMPLE = 10


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and widen ``a`` to a finite 2-D float64 array."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInput(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} contains non-finite entries")
    return arr


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``a ~= u @ diag(sigma) @ v.T`` with ``sigma`` descending."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    @property
    def rank(self) -> int:
        return self.sigma.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


@dataclass(frozen=True)
class PcaModel:
    """Mean and truncated orthonormal basis of a centered data matrix."""

    mean: np.ndarray
    basis: np.ndarray
    sigma: np.ndarray
    sample_count: int

    def __post_init__(self):
        mean = _frozen(np.asarray(self.mean).reshape(-1))
        basis = _frozen(np.asarray(self.basis).reshape(mean.shape[0], -1))
        sigma = _frozen(np.asarray(self.sigma).reshape(-1))
        if sigma.shape[0] != basis.shape[1]:
            raise InvalidInput("sigma length must equal basis column count")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "sigma", sigma)

    @property
    def feature_count(self) -> int:
        return self.basis.shape[0]

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    def truncate(self, rank: int) -> "PcaModel":
        if not 0 <= rank <= self.rank:
            raise InvalidInput(f"cannot truncate rank {self.rank} model to {rank}")
        return PcaModel(self.mean, self.basis[:, :rank], self.sigma[:rank], self.sample_count)


def _sorted_svd(u, s, vt) -> SvdResult:
    # LAPACK already returns descending values; clip tiny negatives from roundoff.
    order = np.argsort(-s, kind="stable")
    return SvdResult(u[:, order], np.maximum(s[order], 0.0), vt[order].T)


def exact_svd(a) -> SvdResult:
    """Full-rank thin SVD, r = min(rows, cols)."""
    a = as_matrix(a)
    if min(a.shape) < 1:
        raise InvalidInput(f"empty matrix {a.shape}")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"SVD did not converge: {exc}") from exc
    return _sorted_svd(u, s, vt)


def _orthonormalize(y: np.ndarray) -> np.ndarray:
    q, _ = np.linalg.qr(y, mode="reduced")
    return q


def randomized_svd(
    a,
    target_rank: int,
    power_iterations: int = DEFAULT_POWER_ITERATIONS,
    oversample: int = DEFAULT_OVERSAMPLE,
    seed: int = 0,
) -> SvdResult:
    """Halko-Martinsson-Tropp randomized SVD with subspace power iterations.

    The sketch uses a Gaussian test matrix drawn from a Philox generator
    seeded with ``seed``; the range basis is re-orthonormalized after every
    multiplication so high iteration counts stay stable.
    """
    a = as_matrix(a)
    m, n = a.shape
    if target_rank < 0 or target_rank > min(m, n):
        raise InvalidInput(f"target_rank {target_rank} outside [0, {min(m, n)}]")
    if power_iterations < 0 or oversample < 0:
        raise InvalidInput("power_iterations and oversample must be non-negative")
    if target_rank == 0:
        return SvdResult(np.zeros((m, 0)), np.zeros(0), np.zeros((n, 0)))

    width = min(target_rank + oversample, m, n)
    rng = np.random.Generator(np.random.Philox(seed))
    omega = rng.standard_normal((n, width))
    try:
        q = _orthonormalize(a @ omega)
        for _ in range(power_iterations):
            z = _orthonormalize(a.T @ q)
            q = _orthonormalize(a @ z)
        b = q.T @ a
        ub, s, vt = np.linalg.svd(b, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"randomized SVD failed: {exc}") from exc
    res = _sorted_svd(q @ ub, s, vt)
    k = target_rank
    return SvdResult(res.u[:, :k], res.sigma[:k], res.v[:, :k])


def fit_pca(
    samples,
    rank: int,
    method: str = "exact",
    power_iterations: int = DEFAULT_POWER_ITERATIONS,
    oversample: int = DEFAULT_OVERSAMPLE,
    seed: int = 0,
) -> PcaModel:
    """Fit mean and top-``rank`` principal directions of ``samples`` (n x p)."""
    x = as_matrix(samples, "samples")
    n, p = x.shape
    if n < 2:
        raise InvalidInput("PCA needs at least two samples")
    if not 0 <= rank <= min(n, p):
        raise InvalidInput(f"rank {rank} outside [0, {min(n, p)}]")
    mean = x.mean(axis=0)
    centered = x - mean
    if method == "exact":
        svd = exact_svd(centered)
        basis, sigma = svd.v[:, :rank], svd.sigma[:rank]
    elif method == "randomized":
        svd = randomized_svd(centered, rank, power_iterations, oversample, seed)
        basis, sigma = svd.v, svd.sigma
    else:
        raise InvalidInput(f"unknown PCA method {method!r}")
    return PcaModel(mean, basis, sigma, n)


def project(model: PcaModel, x) -> np.ndarray:
    """Decorrelated coordinates ``(x - mean) @ basis``."""
    x = as_matrix(x, "x")
    if x.shape[1] != model.feature_count:
        raise InvalidInput(f"x has {x.shape[1]} columns, model expects {model.feature_count}")
    return (x - model.mean) @ model.basis


def reconstruct(model: PcaModel, d, features: slice | None = None) -> np.ndarray:
    """Map coordinates back: ``d @ basis.T + mean``.

    ``features`` restricts the output to a contiguous feature range, using
    only the matching rows of the basis (layer-by-layer decoding).
    """
    d = as_matrix(d, "d")
    if d.shape[1] != model.rank:
        raise InvalidInput(f"d has {d.shape[1]} columns, model rank is {model.rank}")
    basis, mean = model.basis, model.mean
    if features is not None:
        basis, mean = basis[features], mean[features]
    return d @ basis.T + mean


def procrustes_align(a, b) -> np.ndarray:
    """Orthogonal ``R`` minimizing ``||a - b @ R||_F``."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape != b.shape:
        raise InvalidInput(f"shape mismatch {a.shape} vs {b.shape}")
    svd = exact_svd(b.T @ a)
    return svd.u @ svd.v.T


def mean_token_cosine(a, b) -> float:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape != b.shape:
        raise InvalidInput(f"shape mismatch {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateRow("cosine undefined for zero-norm rows")
    cos = np.einsum("ij,ij->i", a, b) / (na * nb)
    return float(np.clip(cos, -1.0, 1.0).mean())


def orthonormalize_columns(v) -> np.ndarray:
    """Nearest-in-spirit orthonormal basis to ``v`` via sign-fixed QR.

    Used after reading a basis stored at reduced precision; column order
    and orientation are preserved.
    """
    v = as_matrix(v, "basis")
    if v.shape[1] == 0:
        return v.copy()
    q, r = np.linalg.qr(v, mode="reduced")
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    return q * signs
