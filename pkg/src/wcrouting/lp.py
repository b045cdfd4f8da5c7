"""Dense two-phase simplex with Bland's pivoting rule.

Small and deterministic rather than fast: the LPs built by the nucleolus,
allocation-realisation and deviation searches have at most a few thousand
rows. Bland's rule (lowest-index entering and leaving variables) rules out
cycling, so identical inputs always follow the identical pivot sequence.
"""

from __future__ import annotations

import enum
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalBreakdown

LE, EQ, GE = "<=", "=", ">="


class LpStatus(enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"


@dataclass
class LpProblem:
    """``min``/``max`` of ``objective @ x`` subject to row constraints and bounds.

    ``lower`` defaults to zero and may be ``-inf``; ``upper`` defaults to
    ``+inf``.
    """

    objective: np.ndarray
    A: np.ndarray
    relations: list
    b: np.ndarray
    sense: str = "min"
    lower: np.ndarray = None
    upper: np.ndarray = None

    def __post_init__(self):
        self.objective = np.asarray(self.objective, dtype=float)
        n = self.objective.size
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n)
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        self.relations = list(self.relations)
        self.lower = np.zeros(n) if self.lower is None else np.asarray(self.lower, dtype=float)
        self.upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float)
        m = self.A.shape[0]
        if self.b.size != m or len(self.relations) != m:
            raise ValueError("A, b and relations disagree on the row count")
        if self.lower.size != n or self.upper.size != n:
            raise ValueError("bounds must have one entry per variable")
        if any(r not in (LE, EQ, GE) for r in self.relations):
            raise ValueError(f"relations must be one of {LE!r}, {EQ!r}, {GE!r}")
        if self.sense not in ("min", "max"):
            raise ValueError("sense must be 'min' or 'max'")
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.b))
                and np.all(np.isfinite(self.objective))):
            raise ValueError("coefficients must be finite")
        if np.any(self.lower == np.inf) or np.any(self.upper == -np.inf) or np.any(self.lower > self.upper):
            raise ValueError("inconsistent variable bounds")

    @property
    def shape(self) -> tuple[int, int]:
        return self.A.shape

    def dump(self) -> str:
        """Plain-text table of the problem, one row per constraint."""
        out = io.StringIO()
        n = self.objective.size
        head = "".join(f"{'x' + str(j):>12}" for j in range(n))
        out.write(f"{'':>8}{head}\n")
        out.write(f"{self.sense:>8}" + "".join(f"{v:>12.6g}" for v in self.objective) + "\n")
        for i in range(self.A.shape[0]):
            out.write(f"{'r' + str(i):>8}" + "".join(f"{v:>12.6g}" for v in self.A[i])
                      + f"  {self.relations[i]:>2} {self.b[i]:.17g}\n")
        out.write(f"{'lower':>8}" + "".join(f"{v:>12.6g}" for v in self.lower) + "\n")
        out.write(f"{'upper':>8}" + "".join(f"{v:>12.6g}" for v in self.upper) + "\n")
        return out.getvalue()


@dataclass
class LpSolution:
    status: LpStatus
    x: np.ndarray = None
    objective: float = float("nan")
    activity: np.ndarray = None
    iterations: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status is LpStatus.OPTIMAL


class _Tableau:
    # rebuild B^-1 [A | b] from the original rows this often to stop error build-up
    REFACTOR_EVERY = 50

    def __init__(self, A, b, basis, tol):
        m, n = A.shape
        self.A, self.b = A, b
        self.rows = list(range(m))
        self.T = np.zeros((m + 1, n + 1))
        self.T[:m, :n] = A
        self.T[:m, n] = b
        self.basis = list(basis)
        self.tol = tol
        self.iterations = 0
        self.cost = np.zeros(n)

    def refactor(self):
        A, b = self.A[self.rows], self.b[self.rows]
        B = A[:, self.basis]
        try:
            self.T[:self.m, :-1] = np.linalg.solve(B, A)
            self.T[:self.m, -1] = np.linalg.solve(B, b)
        except np.linalg.LinAlgError:
            return
        self.set_objective(self.cost)

    @property
    def m(self):
        return self.T.shape[0] - 1

    def set_objective(self, cost):
        # reduced costs: c_j - c_B B^-1 a_j, tableau rows already hold B^-1 A
        n = self.T.shape[1] - 1
        self.cost = cost
        row = np.zeros(n + 1)
        row[:n] = cost
        cb = cost[self.basis]
        row -= cb @ self.T[:self.m]
        self.T[-1] = row

    def pivot(self, r, j):
        T = self.T
        T[r] /= T[r, j]
        col = T[:, j].copy()
        col[r] = 0.0
        T -= np.outer(col, T[r])
        self.basis[r] = j
        self.iterations += 1

    def run(self, allowed, max_iter):
        """Minimise the current objective row; returns False when unbounded."""
        T, tol = self.T, self.tol
        n = T.shape[1] - 1
        while True:
            if self.iterations >= max_iter:
                raise NumericalBreakdown(f"simplex exceeded {max_iter} pivots")
            red = T[-1, :n]
            candidates = np.flatnonzero((red < -tol) & allowed)
            if candidates.size == 0:
                return True
            j = int(candidates[0])
            col = T[:self.m, j]
            rhs = T[:self.m, n]
            pos = col > tol
            if not pos.any():
                return False
            ratios = np.full(self.m, np.inf)
            ratios[pos] = np.maximum(rhs[pos], 0.0) / col[pos]
            best = ratios.min()
            ties = np.flatnonzero(ratios <= best + tol * max(1.0, abs(best)))
            r = min(ties, key=lambda i: self.basis[i])
            self.pivot(int(r), j)
            if self.iterations % self.REFACTOR_EVERY == 0:
                self.refactor()


def _standard_form(p: LpProblem):
    """Rewrite as ``A x = b, x >= 0`` with ``b >= 0``; returns a recovery map."""
    n = p.objective.size
    cols = []          # (orig var, sign) per standard column
    offset = np.zeros(n)
    extra_rows = []    # upper-bound rows in standard columns
    for j in range(n):
        lo, hi = p.lower[j], p.upper[j]
        if np.isfinite(lo):
            offset[j] = lo
            cols.append((j, 1.0))
            if np.isfinite(hi):
                extra_rows.append((len(cols) - 1, hi - lo))
        elif np.isfinite(hi):
            offset[j] = hi
            cols.append((j, -1.0))
        else:
            cols.append((j, 1.0))
            cols.append((j, -1.0))
    k = len(cols)
    M = np.zeros((n, k))
    for s, (j, sign) in enumerate(cols):
        M[j, s] = sign
    A = p.A @ M
    b = p.b - p.A @ offset
    rel = list(p.relations)
    if extra_rows:
        U = np.zeros((len(extra_rows), k))
        for r, (s, ub) in enumerate(extra_rows):
            U[r, s] = 1.0
        A = np.vstack([A, U])
        b = np.concatenate([b, [ub for _, ub in extra_rows]])
        rel += [LE] * len(extra_rows)
    c = (p.objective @ M) * (1.0 if p.sense == "min" else -1.0)
    return A, b, rel, c, M, offset


def solve_lp(problem: LpProblem, tol: float = 1e-9, max_iter: int = 50_000) -> LpSolution:
    """Solve ``problem`` exactly as posed.

    Raises :class:`NumericalBreakdown` when the final basis fails the
    feasibility check by more than ``1e-8`` (scaled), or when the pivot
    budget is exhausted.
    """
    A, b, rel, c, M, offset = _standard_form(problem)
    m, k = A.shape
    flip = b < 0
    A[flip] *= -1
    b[flip] *= -1
    rel = [({LE: GE, GE: LE}.get(r, r) if f else r) for r, f in zip(rel, flip)]

    n_slack = sum(r != EQ for r in rel)
    n_art = sum(r != LE for r in rel)
    width = k + n_slack + n_art
    full = np.zeros((m, width))
    full[:, :k] = A
    basis = [0] * m
    s_col, a_col = k, k + n_slack
    art_cols = []
    art_row = {}
    for i, r in enumerate(rel):
        if r == LE:
            full[i, s_col] = 1.0
            basis[i] = s_col
            s_col += 1
        else:
            if r == GE:
                full[i, s_col] = -1.0
                s_col += 1
            full[i, a_col] = 1.0
            basis[i] = a_col
            art_cols.append(a_col)
            art_row[a_col] = i
            a_col += 1

    tab = _Tableau(full, b, basis, tol)
    n_real = k + n_slack
    allowed = np.ones(width, dtype=bool)
    if art_cols:
        phase1 = np.zeros(width)
        phase1[art_cols] = 1.0
        tab.set_objective(phase1)
        tab.run(allowed, max_iter)
        infeas = -tab.T[-1, -1]
        if infeas > tol * max(1.0, float(np.abs(b).max(initial=0.0))) * 10:
            return LpSolution(LpStatus.INFEASIBLE, iterations=tab.iterations)
        # drive remaining artificials out of the basis or drop redundant rows
        # a zero row with artificial e_q basic is a combination involving
        # original row q, so q is the redundant one
        keep, redundant = [], set()
        for i in range(tab.m):
            if tab.basis[i] >= n_real:
                row = np.abs(tab.T[i, :n_real])
                row[[j for j in tab.basis if j < n_real]] = 0.0
                j = int(np.argmax(row))
                if row[j] > 1e3 * tol:
                    tab.pivot(i, j)
                    keep.append(i)
                else:
                    redundant.add(art_row[tab.basis[i]])
            else:
                keep.append(i)
        if len(keep) < tab.m:
            tab.T = np.vstack([tab.T[keep], tab.T[-1:]])
            tab.basis = [tab.basis[i] for i in keep]
            tab.rows = [q for q in tab.rows if q not in redundant]
        tab.refactor()
        allowed[n_real:] = False

    cost = np.zeros(width)
    cost[:k] = c
    tab.set_objective(cost)
    if not tab.run(allowed, max_iter):
        return LpSolution(LpStatus.UNBOUNDED, iterations=tab.iterations)

    # recompute the basic solution from the original rows for accuracy
    basis = tab.basis
    B = full[:, basis]
    try:
        xb = np.linalg.lstsq(B, b, rcond=None)[0]
    except np.linalg.LinAlgError as exc:
        raise NumericalBreakdown(f"singular final basis: {exc}") from exc
    z = np.zeros(width)
    z[basis] = xb
    # degenerate basics come back as tiny negatives; the row check below still applies
    scale = max(1.0, float(np.abs(z).max(initial=0.0)))
    z = np.where(np.abs(z) < tol * scale, 0.0, z)
    z = np.where((z < 0) & (z > -1e-6 * scale), 0.0, z)
    x = M @ z[:k] + offset

    activity = problem.A @ x
    _verify(problem, x, activity, z, tol)
    obj = float(problem.objective @ x)
    return LpSolution(LpStatus.OPTIMAL, x, obj, activity, tab.iterations)


def _verify(p: LpProblem, x, activity, z, tol):
    scale = 1.0 + np.abs(p.A).sum(axis=1) * max(1.0, float(np.abs(x).max(initial=0.0)))
    slack = 1e-8 * scale
    bad = []
    for i, r in enumerate(p.relations):
        gap = activity[i] - p.b[i]
        if (r == LE and gap > slack[i]) or (r == GE and gap < -slack[i]) or (r == EQ and abs(gap) > slack[i]):
            bad.append((i, gap))
    if np.any(z < -1e-8 * max(1.0, float(np.abs(z).max(initial=0.0)))):
        bad.append(("nonnegativity", float(z.min())))
    if bad:
        raise NumericalBreakdown(f"final basis violates constraints: {bad[:3]}")
