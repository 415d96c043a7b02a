"""Primal active-set solver for strictly convex quadratic programs.

Solves

    min  0.5 d^T B d + c^T d
    s.t. eq_jacobian @ d + eq_values = 0
         ineq_jacobian @ d + ineq_values >= 0
         lower <= d <= upper            (optional)

with B symmetric positive definite. Infeasibility is detected by a phase-1
minimum-infeasibility subproblem run through the same active-set loop; ties in
the ratio test are broken toward the smallest constraint index to avoid
cycling.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numkit import condition_number

_STEP_TOL = 1e-11
_MULT_TOL = 1e-10
_TIE_TOL = 1e-12


class QpStalledError(RuntimeError):
    """The active-set loop exceeded its iteration budget (distinct from
    infeasibility)."""


@dataclass(frozen=True)
class QpData:
    hessian: np.ndarray
    linear_term: np.ndarray
    eq_jacobian: np.ndarray | None = None
    eq_values: np.ndarray | None = None
    ineq_jacobian: np.ndarray | None = None
    ineq_values: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    @classmethod
    def from_factored(cls, r_factor: np.ndarray, **kwargs) -> "QpData":
        """Build with hessian = R^T R from an upper-triangular factor."""
        r = np.asarray(r_factor, dtype=float)
        return cls(hessian=r.T @ r, **kwargs)

    @property
    def n(self) -> int:
        return np.asarray(self.linear_term).shape[0]

    @property
    def m_eq(self) -> int:
        return 0 if self.eq_values is None else np.asarray(self.eq_values).shape[0]

    @property
    def m_ineq(self) -> int:
        return 0 if self.ineq_values is None else np.asarray(self.ineq_values).shape[0]


@dataclass(frozen=True)
class QpSolution:
    direction: np.ndarray
    eq_multipliers: np.ndarray
    ineq_multipliers: np.ndarray
    active_set: tuple[int, ...]
    objective_value: float
    active_condition: float
    lower_multipliers: np.ndarray | None = None
    upper_multipliers: np.ndarray | None = None


@dataclass(frozen=True)
class QpInfeasible:
    """Verdict carrying the worst constraint at the minimum-violation point."""

    worst_kind: str  # "eq" | "ineq" | "lower" | "upper"
    worst_index: int
    violation: float
    point: np.ndarray


def _rows(data: QpData):
    """Internal canonical rows: E x = e and I x >= f, bounds appended to I.

    Returns (E, e, I, f, origins) where origins tags every inequality row
    with its source ("ineq", i) / ("lower", i) / ("upper", i).
    """
    n = data.n
    if data.m_eq:
        eqj = np.asarray(data.eq_jacobian, dtype=float).reshape(data.m_eq, n)
        e = -np.asarray(data.eq_values, dtype=float)
    else:
        eqj = np.zeros((0, n))
        e = np.zeros(0)
    rows = []
    rhs = []
    origins: list[tuple[str, int]] = []
    if data.m_ineq:
        inj = np.asarray(data.ineq_jacobian, dtype=float).reshape(data.m_ineq, n)
        for i in range(data.m_ineq):
            rows.append(inj[i])
            rhs.append(-float(np.asarray(data.ineq_values)[i]))
            origins.append(("ineq", i))
    if data.lower is not None:
        lo = np.asarray(data.lower, dtype=float)
        for i in range(n):
            if np.isfinite(lo[i]):
                row = np.zeros(n)
                row[i] = 1.0
                rows.append(row)
                rhs.append(lo[i])
                origins.append(("lower", i))
    if data.upper is not None:
        up = np.asarray(data.upper, dtype=float)
        for i in range(n):
            if np.isfinite(up[i]):
                row = np.zeros(n)
                row[i] = -1.0
                rows.append(row)
                rhs.append(-up[i])
                origins.append(("upper", i))
    imat = np.array(rows).reshape(len(rows), n) if rows else np.zeros((0, n))
    return eqj, e, imat, np.asarray(rhs, dtype=float), origins


def _kkt_step(B, grad, a_work):
    """Solve the equality-constrained step on the working set.

    Returns (p, nu) minimizing the model with a_work p = resid correction.
    """
    n = B.shape[0]
    m = a_work.shape[0]
    if m == 0:
        return np.linalg.solve(B, -grad), np.zeros(0)
    kkt = np.block([[B, -a_work.T], [a_work, np.zeros((m, m))]])
    rhs = np.concatenate([-grad, np.zeros(m)])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    return sol[:n], sol[n:]


def _active_set_minimize(B, c, eqj, e, imat, f, x0, working, max_iter):
    """Core primal active-set loop from a feasible point.

    ``working`` is a set of inequality-row indices; equality rows are always
    active. Returns (x, eq_mult, ineq_mult_by_row, working).
    """
    x = np.asarray(x0, dtype=float).copy()
    m_eq = eqj.shape[0]
    work = sorted(working)
    for _ in range(max_iter):
        grad = B @ x + c
        a_work = np.vstack([eqj, imat[work]]) if (m_eq or work) else np.zeros((0, x.size))
        p, nu = _kkt_step(B, grad, a_work)
        scale = 1.0 + float(np.abs(x).max(initial=0.0))
        if np.abs(p).max(initial=0.0) <= _STEP_TOL * scale:
            ineq_nu = nu[m_eq:]
            if ineq_nu.size == 0 or ineq_nu.min(initial=0.0) >= -_MULT_TOL * (
                1.0 + np.abs(nu).max(initial=0.0)
            ):
                mult_rows = np.zeros(imat.shape[0])
                for idx, row in enumerate(work):
                    mult_rows[row] = max(0.0, ineq_nu[idx])
                return x, nu[:m_eq], mult_rows, work
            # Drop the most negative multiplier; ties toward smallest index.
            drop_pos = int(np.argmin(ineq_nu))
            work.pop(drop_pos)
            continue
        # Ratio test over rows not in the working set.
        alpha = 1.0
        blocker = -1
        for row in range(imat.shape[0]):
            if row in work:
                continue
            slope = float(imat[row] @ p)
            if slope >= -1e-14 * (1.0 + abs(slope)):
                continue
            gap = float(imat[row] @ x - f[row])
            ratio = max(0.0, gap / (-slope))
            if ratio < alpha - _TIE_TOL:
                alpha = ratio
                blocker = row
            elif abs(ratio - alpha) <= _TIE_TOL and blocker != -1 and row < blocker:
                blocker = row
        x = x + alpha * p
        if blocker != -1 and alpha < 1.0:
            work.append(blocker)
            work.sort()
    raise QpStalledError(f"active-set loop stalled after {max_iter} iterations")


def _phase1(eqj, e, imat, f, n, max_iter):
    """Minimum-infeasibility subproblem; returns a feasible x or None plus
    the elastic optimum used for the infeasibility certificate."""
    m_eq = eqj.shape[0]
    m_in = imat.shape[0]
    m = m_eq + m_in
    nt = n + m
    scale = max(
        1.0,
        float(np.abs(e).max(initial=0.0)),
        float(np.abs(f).max(initial=0.0)),
    )
    eps = 1e-8 * scale
    B = np.eye(nt) * eps
    c = np.concatenate([np.zeros(n), np.ones(m)])
    rows = []
    rhs = []
    for i in range(m_eq):  # |E_i x - e_i| <= t_i as two rows
        row = np.zeros(nt)
        row[:n] = eqj[i]
        row[n + i] = 1.0
        rows.append(row)
        rhs.append(e[i])
        row2 = np.zeros(nt)
        row2[:n] = -eqj[i]
        row2[n + i] = 1.0
        rows.append(row2)
        rhs.append(-e[i])
    for j in range(m_in):
        row = np.zeros(nt)
        row[:n] = imat[j]
        row[n + m_eq + j] = 1.0
        rows.append(row)
        rhs.append(f[j])
    for k in range(m):  # t >= 0
        row = np.zeros(nt)
        row[n + k] = 1.0
        rows.append(row)
        rhs.append(0.0)
    amat = np.array(rows)
    arhs = np.asarray(rhs)
    x0 = np.zeros(nt)
    x0[n : n + m_eq] = np.abs(e)
    x0[n + m_eq :] = np.maximum(0.0, f)
    x, _, _, _ = _active_set_minimize(
        B, c, np.zeros((0, nt)), np.zeros(0), amat, arhs, x0, set(), max_iter
    )
    return x[:n]


def solve_qp(
    data: QpData,
    start: np.ndarray | None = None,
    warm_active: tuple[int, ...] | None = None,
    feas_tol: float = 1e-9,
):
    """Solve the QP; returns a :class:`QpSolution` or a :class:`QpInfeasible`
    verdict. A caller-supplied feasible ``start`` skips phase 1; ``warm_active``
    optionally seeds the working set (cold start is the default).
    """
    B = np.asarray(data.hessian, dtype=float)
    c = np.asarray(data.linear_term, dtype=float)
    n = data.n
    if B.shape != (n, n):
        raise ValueError(f"hessian shape {B.shape} inconsistent with n={n}")
    eqj, e, imat, f, origins = _rows(data)
    scale = 1.0 + max(
        float(np.abs(e).max(initial=0.0)), float(np.abs(f).max(initial=0.0))
    )
    tol = feas_tol * scale
    max_iter = 50 * (n + eqj.shape[0] + imat.shape[0] + 1)

    def _violations(x):
        v_eq = np.abs(eqj @ x - e) if eqj.size else np.zeros(eqj.shape[0])
        v_in = np.maximum(0.0, f - imat @ x) if imat.size else np.zeros(imat.shape[0])
        return v_eq, v_in

    x0 = None
    if start is not None:
        cand = np.asarray(start, dtype=float)
        v_eq, v_in = _violations(cand)
        if max(v_eq.max(initial=0.0), v_in.max(initial=0.0)) <= tol:
            x0 = cand
    if x0 is None:
        # Cheap candidates before the elastic phase-1 solve.
        for cand in _start_candidates(eqj, e, imat, f, n):
            v_eq, v_in = _violations(cand)
            if max(v_eq.max(initial=0.0), v_in.max(initial=0.0)) <= tol:
                x0 = cand
                break
    if x0 is None:
        best = _phase1(eqj, e, imat, f, n, max_iter)
        v_eq, v_in = _violations(best)
        worst = max(v_eq.max(initial=0.0), v_in.max(initial=0.0))
        if worst > tol:
            if v_eq.max(initial=0.0) >= v_in.max(initial=0.0):
                kind, idx = "eq", int(np.argmax(v_eq))
                viol = float(v_eq[idx])
            else:
                row = int(np.argmax(v_in))
                kind, idx = origins[row]
                viol = float(v_in[row])
            return QpInfeasible(kind, idx, viol, best)
        x0 = best

    working = set()
    if warm_active is not None:
        for row in warm_active:
            if 0 <= row < imat.shape[0] and abs(imat[row] @ x0 - f[row]) <= tol:
                working.add(row)
    else:
        v = imat @ x0 - f if imat.size else np.zeros(0)
        working = {int(i) for i in np.flatnonzero(np.abs(v) <= tol)} if v.size else set()
    # Keep the seed working set linearly safe: limit to n - m_eq rows.
    working = set(sorted(working)[: max(0, n - eqj.shape[0])])

    x, lam, mult_rows, work = _active_set_minimize(
        B, c, eqj, e, imat, f, x0, working, max_iter
    )

    m_ineq = data.m_ineq
    mu = np.zeros(m_ineq)
    lo_mult = np.zeros(n)
    up_mult = np.zeros(n)
    active_ineq: list[int] = []
    active_rows: list[np.ndarray] = [eqj[i] for i in range(eqj.shape[0])]
    for row in range(imat.shape[0]):
        kind, idx = origins[row]
        val = mult_rows[row]
        is_active = row in work or abs(imat[row] @ x - f[row]) <= tol
        if kind == "ineq":
            mu[idx] = val
            if is_active:
                active_ineq.append(idx)
        elif kind == "lower":
            lo_mult[idx] = val
        else:
            up_mult[idx] = val
        if is_active:
            active_rows.append(imat[row])
    if active_rows:
        kappa = condition_number(np.vstack(active_rows))
    else:
        kappa = 1.0
    obj = float(0.5 * x @ B @ x + c @ x)
    return QpSolution(
        direction=x,
        eq_multipliers=lam,
        ineq_multipliers=mu,
        active_set=tuple(sorted(set(active_ineq))),
        objective_value=obj,
        active_condition=kappa,
        lower_multipliers=lo_mult if data.lower is not None else None,
        upper_multipliers=up_mult if data.upper is not None else None,
    )


def _start_candidates(eqj, e, imat, f, n):
    yield np.zeros(n)
    if eqj.shape[0]:
        sol, *_ = np.linalg.lstsq(eqj, e, rcond=None)
        yield sol


def kkt_residuals(data: QpData, sol: QpSolution):
    """Max-norm residuals of the stationarity, feasibility and complementarity
    blocks; the test oracle for :class:`QpSolution`."""
    B = np.asarray(data.hessian, dtype=float)
    c = np.asarray(data.linear_term, dtype=float)
    d = sol.direction
    stat = B @ d + c
    feas_terms = [0.0]
    comp_terms = [0.0]
    if data.m_eq:
        eqj = np.asarray(data.eq_jacobian, dtype=float)
        h = np.asarray(data.eq_values, dtype=float)
        stat = stat - eqj.T @ sol.eq_multipliers
        feas_terms.append(float(np.abs(eqj @ d + h).max(initial=0.0)))
    if data.m_ineq:
        inj = np.asarray(data.ineq_jacobian, dtype=float)
        g = np.asarray(data.ineq_values, dtype=float)
        stat = stat - inj.T @ sol.ineq_multipliers
        slack = inj @ d + g
        feas_terms.append(float(np.maximum(0.0, -slack).max(initial=0.0)))
        comp_terms.append(float(np.abs(sol.ineq_multipliers * slack).max(initial=0.0)))
    if data.lower is not None and sol.lower_multipliers is not None:
        lo = np.asarray(data.lower, dtype=float)
        mask = np.isfinite(lo)
        stat = stat - sol.lower_multipliers
        feas_terms.append(float(np.maximum(0.0, (lo - d)[mask]).max(initial=0.0)))
        comp_terms.append(
            float(np.abs((sol.lower_multipliers * (d - lo))[mask]).max(initial=0.0))
        )
    if data.upper is not None and sol.upper_multipliers is not None:
        up = np.asarray(data.upper, dtype=float)
        mask = np.isfinite(up)
        stat = stat + sol.upper_multipliers
        feas_terms.append(float(np.maximum(0.0, (d - up)[mask]).max(initial=0.0)))
        comp_terms.append(
            float(np.abs((sol.upper_multipliers * (up - d))[mask]).max(initial=0.0))
        )
    return (
        float(np.abs(stat).max(initial=0.0)),
        max(feas_terms),
        max(comp_terms),
    )
