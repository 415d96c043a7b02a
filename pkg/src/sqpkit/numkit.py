"""Dense linear-algebra kernels shared by the QP and least-squares solvers.

Everything here is plain numpy at desk scale (n up to a few hundred):
LDL^T factorization of symmetric positive definite matrices, Fletcher-Powell
style rank-one modification of the factors, the R/q pair used by the
least-squares subproblem, orthonormal elimination of linear equality systems,
and exact condition numbers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Diagonal pivots below this fraction of the largest pivot are clamped and the
# result flagged as regularized.
PIVOT_FLOOR_REL = 1e-14

RANK_TOL_REL = 1e-12


class IndefiniteDowndateError(RuntimeError):
    """A rank-one downdate would make the factored matrix indefinite."""

    def __init__(self, pivot_index: int, pivot_value: float):
        super().__init__(
            f"indefinite downdate: pivot {pivot_index} would become {pivot_value:.3e}"
        )
        self.pivot_index = pivot_index
        self.pivot_value = pivot_value


class InconsistentEqualitiesError(RuntimeError):
    """The equality system has no solution (rhs outside the column space)."""


@dataclass(frozen=True)
class LdltFactors:
    """Unit lower-triangular L and positive diagonal D with L D L^T = B."""

    lower: np.ndarray
    diag: np.ndarray
    regularized: bool = False

    @property
    def n(self) -> int:
        return self.diag.shape[0]

    @classmethod
    def identity(cls, n: int) -> "LdltFactors":
        return cls(np.eye(n), np.ones(n))

    def is_identity(self, tol: float = 0.0) -> bool:
        return (
            np.array_equal(self.lower, np.eye(self.n))
            and np.array_equal(self.diag, np.ones(self.n))
            if tol == 0.0
            else bool(
                np.allclose(self.lower, np.eye(self.n), atol=tol)
                and np.allclose(self.diag, 1.0, atol=tol)
            )
        )

    def reconstruct(self) -> np.ndarray:
        """Return the dense matrix L D L^T."""
        return (self.lower * self.diag) @ self.lower.T

    def multiply(self, v: np.ndarray) -> np.ndarray:
        """Return (L D L^T) v without forming the dense matrix."""
        return self.lower @ (self.diag * (self.lower.T @ v))


@dataclass(frozen=True)
class OrthoElimination:
    """Particular solution plus orthonormal null-space basis of A x = rhs."""

    particular_solution: np.ndarray
    basis: np.ndarray  # shape (n, n - rank), columns orthonormal, A @ basis = 0
    rank: int


def _as_matrix(mat) -> np.ndarray:
    out = np.asarray(mat, dtype=float)
    if out.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={out.ndim}")
    return out


def ldlt_factor(mat) -> LdltFactors:
    """Factor a symmetric positive definite matrix as L D L^T.

    Pivots below ``PIVOT_FLOOR_REL`` times the largest diagonal entry are
    clamped to that floor and the result is flagged ``regularized``.
    """
    a = _as_matrix(mat)
    n, m = a.shape
    if n != m:
        raise ValueError(f"matrix must be square, got {a.shape}")
    if n and not np.allclose(a, a.T, rtol=0.0, atol=1e-10 * max(1.0, np.abs(a).max())):
        raise ValueError("matrix must be symmetric")

    floor = PIVOT_FLOOR_REL * max(1e-300, float(np.abs(np.diag(a)).max(initial=0.0)))
    lower = np.eye(n)
    diag = np.zeros(n)
    regularized = False
    for j in range(n):
        d = a[j, j] - np.dot(lower[j, :j] ** 2, diag[:j])
        if d < floor:
            d = floor
            regularized = True
        diag[j] = d
        if j + 1 < n:
            col = a[j + 1 :, j] - lower[j + 1 :, :j] @ (lower[j, :j] * diag[:j])
            lower[j + 1 :, j] = col / d
    return LdltFactors(lower, diag, regularized)


def ldlt_rank_one_update(factors: LdltFactors, sigma: float, z) -> LdltFactors:
    """Return factors of L D L^T + sigma * z z^T (Fletcher-Powell recurrence).

    Raises :class:`IndefiniteDowndateError` if a downdate (sigma < 0) drives a
    pivot nonpositive; pivots that stay positive but fall under the floor are
    clamped and flagged.
    """
    if sigma == 0.0:
        raise ValueError("sigma must be nonzero")
    z = np.asarray(z, dtype=float)
    n = factors.n
    if z.shape != (n,):
        raise ValueError(f"z must have shape ({n},), got {z.shape}")

    lower = factors.lower.copy()
    diag = factors.diag.copy()
    regularized = factors.regularized
    floor = PIVOT_FLOOR_REL * max(1.0, float(diag.max(initial=0.0)))

    w = z.copy()
    a = float(sigma)
    for j in range(n):
        p = w[j]
        d_old = diag[j]
        d_new = d_old + a * p * p
        if d_new <= 0.0:
            raise IndefiniteDowndateError(j, d_new)
        if d_new < floor:
            d_new = floor
            regularized = True
        beta = p * a / d_new
        a = d_old * a / d_new
        diag[j] = d_new
        if j + 1 < n:
            w[j + 1 :] -= p * lower[j + 1 :, j]
            lower[j + 1 :, j] += beta * w[j + 1 :]
    return LdltFactors(lower, diag, regularized)


def form_R_q(factors: LdltFactors, grad_f) -> tuple[np.ndarray, np.ndarray]:
    """Build R = D^(1/2) L^T and solve R^T q = -grad_f by substitution.

    R is upper triangular with R^T R equal to the factored matrix.
    """
    grad = np.asarray(grad_f, dtype=float)
    if np.any(factors.diag <= 0.0):
        raise ValueError("factors carry a nonpositive pivot")
    sqrt_d = np.sqrt(factors.diag)
    r = sqrt_d[:, None] * factors.lower.T
    # R^T is lower triangular; forward substitution via the general solver is
    # exact enough at this scale.
    q = np.linalg.solve(r.T, -grad) if factors.n else np.zeros(0)
    return r, q


def eliminate_equalities(a_eq, rhs) -> OrthoElimination:
    """Solve the linear equality system and return its null-space geometry.

    The particular solution is the minimum-norm point with ``a_eq @ x = rhs``;
    the basis columns are an orthonormal span of the null space. Raises
    :class:`InconsistentEqualitiesError` when the rhs is unreachable.
    """
    a = _as_matrix(a_eq)
    rhs = np.asarray(rhs, dtype=float)
    m, n = a.shape
    if m > n:
        raise ValueError(f"system has more rows ({m}) than columns ({n})")
    if rhs.shape != (m,):
        raise ValueError(f"rhs must have shape ({m},), got {rhs.shape}")
    if m == 0:
        return OrthoElimination(np.zeros(n), np.eye(n), 0)

    u, s, vt = np.linalg.svd(a, full_matrices=True)
    smax = float(s[0]) if s.size else 0.0
    rank = int(np.count_nonzero(s > RANK_TOL_REL * smax)) if smax > 0.0 else 0
    if rank:
        coeff = (u[:, :rank].T @ rhs) / s[:rank]
        x_p = vt[:rank].T @ coeff
    else:
        x_p = np.zeros(n)
    residual = np.linalg.norm(a @ x_p - rhs)
    if residual > 1e-10 * (1.0 + np.linalg.norm(rhs)):
        raise InconsistentEqualitiesError(
            f"inconsistent equalities: residual {residual:.3e} at rank {rank}"
        )
    basis = vt[rank:].T
    return OrthoElimination(x_p, basis, rank)


def condition_number(mat) -> float:
    """Exact 2-norm condition number; ``inf`` when the smallest singular
    value underflows to zero."""
    a = _as_matrix(mat)
    if a.size == 0:
        raise ValueError("matrix must be nonempty")
    s = np.linalg.svd(a, compute_uv=False)
    smin = float(s[-1])
    if smin == 0.0:
        return float("inf")
    return float(s[0]) / smin
