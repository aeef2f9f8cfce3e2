"""Stationary covariance kernels, Gram-matrix assembly, and structured test matrices.

All kernels are of the form k(x, x') = variance * kappa(u) where u is the
lengthscale-weighted Euclidean distance between x and x' and kappa is one of
the supported radial profiles.  Lengthscales are per-dimension (ARD).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

__all__ = [
    "Family",
    "Kernel",
    "DecayEnvelope",
    "eval_kernel",
    "gram",
    "gram_gradients",
    "kms_matrix",
    "decay_envelope",
]

_SQRT3 = math.sqrt(3.0)
_SQRT5 = math.sqrt(5.0)

# row-chunk size for pairwise-distance assembly, keeps temporaries ~tens of MB
_CHUNK = 1 << 22


class Family(str, Enum):
    SQUARED_EXPONENTIAL = "SquaredExponential"
    MATERN12 = "Matern12"
    MATERN32 = "Matern32"
    MATERN52 = "Matern52"


def _profile(family: Family, u: np.ndarray) -> np.ndarray:
    """Radial profile kappa(u) with kappa(0) = 1, nonincreasing on [0, inf)."""
    if family == Family.SQUARED_EXPONENTIAL:
        return np.exp(-0.5 * u * u)
    if family == Family.MATERN12:
        return np.exp(-u)
    if family == Family.MATERN32:
        su = _SQRT3 * u
        return (1.0 + su) * np.exp(-su)
    if family == Family.MATERN52:
        su = _SQRT5 * u
        return (1.0 + su + su * su / 3.0) * np.exp(-su)
    raise ValueError(f"unknown kernel family {family!r}")


def _profile_radial_factor(family: Family, u: np.ndarray) -> np.ndarray:
    """g(u) such that d kappa / d ls_l = g(u) * diff_l^2 / ls_l^3.

    Writing kappa as a function of u = sqrt(sum_l (diff_l/ls_l)^2), the chain
    rule gives d kappa/d ls_l = -kappa'(u)/u * diff_l^2/ls_l^3, so
    g(u) = -kappa'(u)/u.  For every family except Matern12 the ratio is
    analytic at u = 0; the Matern12 diagonal (u = 0 forces diff = 0) is 0.
    """
    if family == Family.SQUARED_EXPONENTIAL:
        return np.exp(-0.5 * u * u)
    if family == Family.MATERN12:
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.where(u > 0.0, np.exp(-u) / np.where(u > 0.0, u, 1.0), 0.0)
        return g
    if family == Family.MATERN32:
        return 3.0 * np.exp(-_SQRT3 * u)
    if family == Family.MATERN52:
        su = _SQRT5 * u
        return (5.0 / 3.0) * (1.0 + su) * np.exp(-su)
    raise ValueError(f"unknown kernel family {family!r}")


@dataclass(frozen=True)
class Kernel:
    """Stationary covariance function with ARD lengthscales."""

    family: Family
    variance: float
    lengthscales: np.ndarray

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ls)
        if not np.isfinite(self.variance) or self.variance <= 0.0:
            raise ValueError("kernel variance must be positive")
        if ls.ndim != 1 or ls.size == 0 or not np.all(np.isfinite(ls)) or np.any(ls <= 0.0):
            raise ValueError("lengthscales must be a nonempty vector of positive reals")
        object.__setattr__(self, "family", Family(self.family))

    @property
    def dim(self) -> int:
        return self.lengthscales.size

    def to_json(self) -> dict:
        return {
            "family": self.family.value,
            "variance": float(self.variance),
            "lengthscales": [float(v) for v in self.lengthscales],
        }

    @staticmethod
    def from_json(obj) -> "Kernel":
        if isinstance(obj, (str, bytes)):
            obj = json.loads(obj)
        return Kernel(Family(obj["family"]), float(obj["variance"]), np.asarray(obj["lengthscales"], dtype=float))


@dataclass(frozen=True)
class DecayEnvelope:
    """Radial dominating function psi with |k(x, x')| <= psi(||x - x'||).

    For ARD kernels psi uses the largest lengthscale, which makes it a valid
    (looser) envelope in every direction since the profiles are nonincreasing.
    """

    family: Family
    variance: float
    ls_env: float

    def __call__(self, m) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        with np.errstate(over="ignore", invalid="ignore"):
            out = self.variance * _profile(self.family, m / self.ls_env)
            out = np.where(np.isinf(m), 0.0, out)
        return out

    # alias so report code can spell the field name from the type contract
    def psi(self, m) -> np.ndarray:
        return self(m)


def decay_envelope(k: Kernel) -> DecayEnvelope:
    return DecayEnvelope(k.family, float(k.variance), float(np.max(k.lengthscales)))


def _check_points(X: np.ndarray, dim: int, name: str) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[1] != dim:
        raise ValueError(f"{name} has dimension {X.shape[-1] if X.ndim else '?'}, kernel expects {dim}")
    return X


def eval_kernel(k: Kernel, x, xp) -> float:
    """Evaluate k(x, x') for a single pair of points."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    xp = np.atleast_1d(np.asarray(xp, dtype=float))
    if x.shape != xp.shape or x.size != k.dim:
        raise ValueError(f"point dimensions {x.size}/{xp.size} do not match kernel dimension {k.dim}")
    u = math.sqrt(float(np.sum(((x - xp) / k.lengthscales) ** 2)))
    return float(k.variance * _profile(k.family, np.asarray(u)))


def _scaled_dists(A: np.ndarray, B: np.ndarray, ls: np.ndarray) -> np.ndarray:
    """Lengthscale-weighted pairwise distances, assembled in row chunks."""
    n, m = A.shape[0], B.shape[0]
    out = np.empty((n, m), dtype=float)
    rows = max(1, _CHUNK // max(1, m))
    for start in range(0, n, rows):
        stop = min(n, start + rows)
        acc = np.zeros((stop - start, m), dtype=float)
        for l in range(A.shape[1]):
            diff = (A[start:stop, l, None] - B[None, :, l]) / ls[l]
            acc += diff * diff
        out[start:stop] = np.sqrt(acc)
    return out


def gram(k: Kernel, A, B=None) -> np.ndarray:
    """Kernel matrix between point sets A (n x d) and B (m x d).

    With B omitted (or identical to A) the result is exactly symmetric: only
    the upper triangle is assembled and then mirrored.
    """
    A = _check_points(A, k.dim, "A")
    if B is None or B is A:
        U = _scaled_dists(A, A, k.lengthscales)
        K = k.variance * _profile(k.family, U)
        K = np.triu(K) + np.triu(K, 1).T
        return K
    B = _check_points(B, k.dim, "B")
    U = _scaled_dists(A, B, k.lengthscales)
    return k.variance * _profile(k.family, U)


def gram_gradients(k: Kernel, A, B=None):
    """Kernel matrix plus analytic derivatives w.r.t. variance and lengthscales.

    Returns (K, dK_dvariance, dK_dls) where dK_dls is a list of one matrix per
    input dimension.  Symmetric matrices are mirrored exactly like gram().
    """
    A = _check_points(A, k.dim, "A")
    symmetric = B is None or B is A
    B = A if symmetric else _check_points(B, k.dim, "B")
    U = _scaled_dists(A, B, k.lengthscales)
    K = k.variance * _profile(k.family, U)
    G = k.variance * _profile_radial_factor(k.family, U)
    dK_dls = []
    for l in range(k.dim):
        diff2 = (A[:, l, None] - B[None, :, l]) ** 2
        dK_dls.append(G * diff2 / k.lengthscales[l] ** 3)
    dK_dv = K / k.variance
    if symmetric:
        K = np.triu(K) + np.triu(K, 1).T
        dK_dv = np.triu(dK_dv) + np.triu(dK_dv, 1).T
        dK_dls = [np.triu(D) + np.triu(D, 1).T for D in dK_dls]
    return K, dK_dv, dK_dls


def kms_matrix(rho: float, n: int) -> np.ndarray:
    """Kac-Murdock-Szego matrix with entries rho^{|i-j|}."""
    if not 0.0 < rho < 1.0:
        raise ValueError(f"rho must lie in (0, 1), got {rho}")
    if n < 1:
        raise ValueError("n must be >= 1")
    idx = np.arange(n)
    return rho ** np.abs(idx[:, None] - idx[None, :]).astype(float)
