"""In-repo LP / mixed-integer solver.

A dense two-phase primal simplex with native variable bounds (nonbasic
variables sit at either bound) drives a best-first branch-and-bound over
binary variables, with SOS1-group branching when groups are declared.
Scope is desk-scale pricing models: dense tableaus, no presolve, no cuts.
Determinism is a hard requirement for the experiment harness, so every
tie breaks toward the lowest index and node order is fixed.
"""

from __future__ import annotations

import heapq
import subprocess
import time
from dataclasses import dataclass

import numpy as np

FEAS_TOL = 1e-9
PIVOT_TOL = 1e-10
INT_TOL = 1e-7
INF = float("inf")


class SolverError(Exception):
    pass


class NumericalInstabilityError(SolverError):
    """Pivot-count bound exceeded without convergence."""


class BudgetExhaustedError(SolverError):
    """Search budget ran out with no incumbent and no warm start."""


@dataclass(frozen=True)
class LinearProgram:
    """max c.x  s.t.  A x (<=,=,>=) b,  lower <= x <= upper.

    The constraint matrix is given in sparse triplet form; the simplex
    densifies it, which is fine at the scales this repo solves.
    """

    n_vars: int
    objective: np.ndarray
    row_idx: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray
    senses: tuple[str, ...]
    rhs: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.objective, dtype=float)
        if c.shape != (self.n_vars,):
            raise ValueError("objective length != n_vars")
        m = len(self.senses)
        rhs = np.asarray(self.rhs, dtype=float)
        if rhs.shape != (m,) or not np.all(np.isfinite(rhs)):
            raise ValueError("rhs must be finite, one per row")
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != (self.n_vars,) or hi.shape != (self.n_vars,):
            raise ValueError("bounds length != n_vars")
        if np.any(lo > hi):
            raise ValueError("lower bound above upper bound")
        ri = np.asarray(self.row_idx, dtype=int)
        ci = np.asarray(self.col_idx, dtype=int)
        vv = np.asarray(self.values, dtype=float)
        if not (len(ri) == len(ci) == len(vv)):
            raise ValueError("triplet arrays must share a length")
        if len(ri) and (ri.max() >= m or ci.max() >= self.n_vars):
            raise ValueError("triplet index out of range")
        if any(s not in ("<=", "=", ">=") for s in self.senses):
            raise ValueError("row sense must be <=, = or >=")
        for name, arr in (
            ("objective", c), ("rhs", rhs), ("lower", lo), ("upper", hi),
            ("row_idx", ri), ("col_idx", ci), ("values", vv),
        ):
            object.__setattr__(self, name, arr)

    @property
    def n_rows(self) -> int:
        return len(self.senses)

    def dense_matrix(self) -> np.ndarray:
        a = np.zeros((self.n_rows, self.n_vars))
        np.add.at(a, (self.row_idx, self.col_idx), self.values)
        return a

    def constraint_violation(self, x: np.ndarray) -> float:
        """Largest violation of rows and bounds at x (0 means feasible)."""
        ax = self.dense_matrix() @ x
        worst = 0.0
        for i, s in enumerate(self.senses):
            r = ax[i] - self.rhs[i]
            if s == "<=":
                worst = max(worst, r)
            elif s == ">=":
                worst = max(worst, -r)
            else:
                worst = max(worst, abs(r))
        worst = max(worst, float(np.max(self.lower - x, initial=0.0)))
        worst = max(worst, float(np.max(x - self.upper, initial=0.0)))
        return worst


class LPBuilder:
    """Incremental triplet construction for LinearProgram."""

    def __init__(self):
        self._lo: list[float] = []
        self._hi: list[float] = []
        self._obj: list[float] = []
        self._rows: list[int] = []
        self._cols: list[int] = []
        self._vals: list[float] = []
        self._senses: list[str] = []
        self._rhs: list[float] = []

    def add_var(self, lower=0.0, upper=INF, objective=0.0) -> int:
        self._lo.append(lower)
        self._hi.append(upper)
        self._obj.append(objective)
        return len(self._lo) - 1

    def add_row(self, coeffs: dict[int, float], sense: str, rhs: float) -> int:
        r = len(self._senses)
        for j, v in coeffs.items():
            self._rows.append(r)
            self._cols.append(j)
            self._vals.append(v)
        self._senses.append(sense)
        self._rhs.append(rhs)
        return r

    def set_objective(self, j: int, coeff: float) -> None:
        self._obj[j] = coeff

    def build(self) -> LinearProgram:
        return LinearProgram(
            n_vars=len(self._lo),
            objective=np.array(self._obj, dtype=float),
            row_idx=np.array(self._rows, dtype=int),
            col_idx=np.array(self._cols, dtype=int),
            values=np.array(self._vals, dtype=float),
            senses=tuple(self._senses),
            rhs=np.array(self._rhs, dtype=float),
            lower=np.array(self._lo, dtype=float),
            upper=np.array(self._hi, dtype=float),
        )


@dataclass
class LPSolution:
    status: str  # optimal | infeasible | unbounded
    x: np.ndarray | None = None
    objective: float | None = None
    iterations: int = 0


# nonbasic statuses
_AT_LOWER, _AT_UPPER, _FREE, _BASIC = 0, 1, 2, 3


class _Simplex:
    """Two-phase bounded-variable primal simplex on a dense tableau.

    Slacks convert rows to equalities; rows whose slack start violates its
    bounds get an artificial variable, and phase 1 drives the artificial
    sum to zero. Dantzig pricing with a Bland's-rule fallback after a
    non-improvement streak guards against cycling.
    """

    def __init__(self, lp: LinearProgram, lower: np.ndarray, upper: np.ndarray):
        m, n = lp.n_rows, lp.n_vars
        self.m, self.n_struct = m, n
        a = lp.dense_matrix()

        # slack bounds by sense: <= gives s>=0, = fixes s=0, >= gives s<=0
        slack_lo = np.empty(m)
        slack_hi = np.empty(m)
        for i, s in enumerate(lp.senses):
            if s == "<=":
                slack_lo[i], slack_hi[i] = 0.0, INF
            elif s == "=":
                slack_lo[i], slack_hi[i] = 0.0, 0.0
            else:
                slack_lo[i], slack_hi[i] = -INF, 0.0

        self.lo = np.concatenate([lower, slack_lo])
        self.hi = np.concatenate([upper, slack_hi])
        ncols = n + m
        self.T = np.concatenate([a, np.eye(m)], axis=1)
        self.b = lp.rhs.copy()

        # nonbasic start values: finite lower, else finite upper, else 0
        self.status = np.full(ncols, _AT_LOWER, dtype=int)
        vals = np.where(np.isfinite(self.lo), self.lo, 0.0)
        use_hi = ~np.isfinite(self.lo) & np.isfinite(self.hi)
        vals[use_hi] = self.hi[use_hi]
        self.status[use_hi] = _AT_UPPER
        free = ~np.isfinite(self.lo) & ~np.isfinite(self.hi)
        self.status[free] = _FREE
        self.vals = vals

        # crash basis: slacks; add artificials where the slack start is infeasible
        resid = self.b - self.T[:, :n] @ vals[:n]
        self.basis = np.arange(n, n + m)
        art_cols = []
        for i in range(m):
            if slack_lo[i] - FEAS_TOL <= resid[i] <= slack_hi[i] + FEAS_TOL:
                continue
            # park the slack at its nearest finite bound, cover with an artificial
            s_val = slack_lo[i] if np.isfinite(slack_lo[i]) else slack_hi[i]
            if abs(resid[i] - s_val) <= FEAS_TOL:
                continue
            self.status[n + i] = _AT_LOWER if s_val == slack_lo[i] else _AT_UPPER
            self.vals[n + i] = s_val
            art_cols.append((i, 1.0 if resid[i] - s_val > 0 else -1.0))
        self.n_art = len(art_cols)
        if self.n_art:
            art = np.zeros((m, self.n_art))
            for k, (i, sgn) in enumerate(art_cols):
                art[:, k] = 0.0
                art[i, k] = sgn
            self.T = np.concatenate([self.T, art], axis=1)
            self.lo = np.concatenate([self.lo, np.zeros(self.n_art)])
            self.hi = np.concatenate([self.hi, np.full(self.n_art, INF)])
            self.vals = np.concatenate([self.vals, np.zeros(self.n_art)])
            self.status = np.concatenate(
                [self.status, np.full(self.n_art, _AT_LOWER, dtype=int)]
            )
            for k, (i, _) in enumerate(art_cols):
                self.status[n + i] = self.status[n + i]  # slack already parked
                self.basis[i] = ncols + k
        self.ncols = self.T.shape[1]
        self.art_start = ncols
        self.status[self.basis] = _BASIC
        self.iterations = 0

        # reduce to the basis: artificial rows only need sign fix; slack rows identity
        for i in range(m):
            j = self.basis[i]
            if j >= self.art_start and self.T[i, j] < 0:
                self.T[i] *= -1
                self.b[i] *= -1
        self.beta = self.b - self.T @ np.where(self.status == _BASIC, 0.0, self.vals)

    def _reduced_costs(self, c: np.ndarray) -> np.ndarray:
        y = c[self.basis] @ self.T
        return c - y

    def _iterate(self, c: np.ndarray, phase: int, max_iter: int) -> str:
        """Run pivots until optimal/unbounded for objective c (maximize)."""
        bland_after = max_iter // 2
        while True:
            self.iterations += 1
            if self.iterations > max_iter:
                raise NumericalInstabilityError(
                    f"simplex exceeded {max_iter} pivots"
                )
            bland = self.iterations > bland_after
            z = self._reduced_costs(c)
            fixed = self.lo == self.hi
            can_up = (
                ((self.status == _AT_LOWER) | (self.status == _FREE))
                & ~fixed & (z > FEAS_TOL)
            )
            can_dn = (
                ((self.status == _AT_UPPER) | (self.status == _FREE))
                & ~fixed & (z < -FEAS_TOL)
            )
            cand = np.flatnonzero(can_up | can_dn)
            if len(cand) == 0:
                return "optimal"
            if bland:
                e = int(cand[0])
            else:
                e = int(cand[np.argmax(np.abs(z[cand]))])
            sigma = 1.0 if can_up[e] else -1.0
            d = sigma * self.T[:, e]

            # ratio test: basics blocked at a bound, plus the entering bound flip
            lo_b, hi_b = self.lo[self.basis], self.hi[self.basis]
            limit = INF
            leave_row = -1
            pos = d > PIVOT_TOL
            neg = d < -PIVOT_TOL
            ratios = np.full(self.m, INF)
            with np.errstate(invalid="ignore", divide="ignore"):
                ratios[pos] = (self.beta[pos] - lo_b[pos]) / d[pos]
                ratios[neg] = (self.beta[neg] - hi_b[neg]) / d[neg]
            ratios[pos & ~np.isfinite(lo_b)] = INF
            ratios[neg & ~np.isfinite(hi_b)] = INF
            if np.any(np.isfinite(ratios)):
                rmin = float(np.min(ratios))
                rows = np.flatnonzero(ratios <= rmin + FEAS_TOL)
                # lowest basic-variable index among minimal ratios (Bland-safe)
                leave_row = int(rows[np.argmin(self.basis[rows])])
                limit = max(rmin, 0.0)
            flip = self.hi[e] - self.lo[e]
            if flip < limit - FEAS_TOL:
                # bound flip, no basis change
                if not np.isfinite(flip):
                    return "unbounded"
                self.beta -= d * flip
                self.vals[e] = self.hi[e] if sigma > 0 else self.lo[e]
                self.status[e] = _AT_UPPER if sigma > 0 else _AT_LOWER
                continue
            if leave_row < 0:
                if not np.isfinite(flip):
                    return "unbounded"
                self.beta -= d * flip
                self.vals[e] = self.hi[e] if sigma > 0 else self.lo[e]
                self.status[e] = _AT_UPPER if sigma > 0 else _AT_LOWER
                continue

            step = limit
            lv = self.basis[leave_row]
            enter_val = self.vals[e] + sigma * step
            self.beta -= d * step
            self.beta[leave_row] = enter_val
            # leaving variable parks at the bound it hit
            if d[leave_row] > 0:
                self.status[lv] = _AT_LOWER
                self.vals[lv] = self.lo[lv]
            else:
                self.status[lv] = _AT_UPPER
                self.vals[lv] = self.hi[lv]
            if phase == 1 and lv >= self.art_start:
                # artificials never re-enter
                self.lo[lv] = self.hi[lv] = 0.0
                self.vals[lv] = 0.0
            self.basis[leave_row] = e
            self.status[e] = _BASIC

            piv = self.T[leave_row, e]
            self.T[leave_row] /= piv
            col = self.T[:, e].copy()
            col[leave_row] = 0.0
            self.T -= np.outer(col, self.T[leave_row])

    def solve(self, c_struct: np.ndarray, max_iter: int) -> LPSolution:
        if self.n_art:
            c1 = np.zeros(self.ncols)
            c1[self.art_start:] = -1.0
            self._iterate(c1, 1, max_iter)
            art_basic = self.basis >= self.art_start
            infeas = float(np.sum(np.abs(self.beta[art_basic])))
            if infeas > 1e-7:
                return LPSolution("infeasible", iterations=self.iterations)
            # pin remaining (degenerate) basic artificials at zero
            self.lo[self.art_start:] = 0.0
            self.hi[self.art_start:] = 0.0
            self.vals[self.art_start:] = np.where(
                self.status[self.art_start:] == _BASIC,
                self.vals[self.art_start:], 0.0,
            )
        c = np.zeros(self.ncols)
        c[: self.n_struct] = c_struct
        out = self._iterate(c, 2, max_iter)
        if out == "unbounded":
            return LPSolution("unbounded", iterations=self.iterations)
        x = np.where(self.status == _BASIC, 0.0, self.vals)
        x[self.basis] = self.beta
        xs = x[: self.n_struct]
        return LPSolution(
            "optimal", xs, float(c_struct @ xs), iterations=self.iterations
        )


def solve_lp(
    lp: LinearProgram,
    lower: np.ndarray | None = None,
    upper: np.ndarray | None = None,
    max_iter: int | None = None,
) -> LPSolution:
    """Solve the LP (maximize). Optional bound overrides for node solves."""
    lo = lp.lower if lower is None else np.asarray(lower, dtype=float)
    hi = lp.upper if upper is None else np.asarray(upper, dtype=float)
    if np.any(lo > hi):
        return LPSolution("infeasible")
    if max_iter is None:
        max_iter = 200 * (lp.n_rows + lp.n_vars) + 1000
    return _Simplex(lp, lo, hi).solve(lp.objective, max_iter)


@dataclass(frozen=True)
class MIPModel:
    lp: LinearProgram
    binary_indices: tuple[int, ...] = ()
    sos1_groups: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        n = self.lp.n_vars
        if any(j < 0 or j >= n for j in self.binary_indices):
            raise ValueError("binary index out of range")
        binset = set(self.binary_indices)
        eq_rows = _equality_unit_rows(self.lp)
        for g in self.sos1_groups:
            if not set(g) <= binset:
                raise ValueError("SOS1 members must be binary")
            if frozenset(g) not in eq_rows:
                raise ValueError("SOS1 group lacks its sum-to-one equality row")

    @property
    def n_binaries(self) -> int:
        return len(self.binary_indices)


def _equality_unit_rows(lp: LinearProgram) -> set[frozenset]:
    """Supports of '=' rows with all-one coefficients and rhs 1."""
    per_row: dict[int, list[tuple[int, float]]] = {}
    for r, c, v in zip(lp.row_idx, lp.col_idx, lp.values):
        per_row.setdefault(int(r), []).append((int(c), float(v)))
    out = set()
    for r, entries in per_row.items():
        if lp.senses[r] == "=" and lp.rhs[r] == 1.0 and all(v == 1.0 for _, v in entries):
            out.add(frozenset(c for c, _ in entries))
    return out


@dataclass
class MIPConfig:
    gap_tol: float = 1e-9
    node_limit: int = 200_000
    time_budget: float | None = 30.0
    warm_start: np.ndarray | None = None
    # dense-tableau cell guard; bigger models fall back to the warm start
    max_tableau_cells: int = 40_000_000
    external_solver_cmd: str | None = None


@dataclass
class MIPSolution:
    status: str  # optimal | feasible-incumbent | infeasible | unbounded
    x: np.ndarray | None = None
    objective: float | None = None
    gap: float = INF
    nodes_branched: int = 0
    lp_iterations: int = 0


def _check_warm_start(model: MIPModel, x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape != (model.lp.n_vars,):
        raise ValueError("warm start length mismatch")
    if model.lp.constraint_violation(x) > 1e-7:
        raise ValueError("warm start is infeasible")
    zb = x[list(model.binary_indices)]
    if len(zb) and np.max(np.abs(zb - np.round(zb))) > INT_TOL:
        raise ValueError("warm start binaries are fractional")
    return float(model.lp.objective @ x)


def solve_mip(model: MIPModel, config: MIPConfig | None = None) -> MIPSolution:
    """Best-first branch-and-bound over the binaries of ``model``.

    SOS1 groups branch by splitting their unfixed support; otherwise the
    most-fractional binary branches 0/1. A feasible warm start becomes the
    initial incumbent, so the returned objective never falls below it.
    """
    config = config or MIPConfig()
    if config.external_solver_cmd:
        return _solve_external(model, config)
    lp = model.lp
    inc_x, inc_val = None, -INF
    if config.warm_start is not None:
        inc_val = _check_warm_start(model, config.warm_start)
        inc_x = np.asarray(config.warm_start, dtype=float).copy()

    cells = (lp.n_rows + 1) * (lp.n_vars + 2 * lp.n_rows)
    start = time.monotonic()
    budget_left = lambda: (
        config.time_budget is None or time.monotonic() - start < config.time_budget
    )
    if cells > config.max_tableau_cells:
        if inc_x is None:
            raise BudgetExhaustedError("model too large and no warm start given")
        return MIPSolution("feasible-incumbent", inc_x, inc_val, gap=INF)

    binaries = np.array(model.binary_indices, dtype=int)
    lp_iters = 0
    nodes_branched = 0
    counter = 0
    heap: list[tuple[float, int, np.ndarray, np.ndarray]] = []

    root = solve_lp(lp)
    lp_iters += root.iterations
    if root.status == "unbounded":
        return MIPSolution("unbounded")
    if root.status == "infeasible":
        if inc_x is None:
            return MIPSolution("infeasible")
        return MIPSolution("feasible-incumbent", inc_x, inc_val, gap=0.0)
    heapq.heappush(heap, (-root.objective, counter, lp.lower.copy(), lp.upper.copy()))
    node_payload = {counter: (root.x, root.objective)}
    counter += 1

    def fractional_info(x):
        if len(binaries) == 0:
            return None
        z = x[binaries]
        frac = np.abs(z - np.round(z))
        if np.max(frac) <= INT_TOL:
            return None
        return z

    exhausted = False
    while heap:
        if not budget_left() or nodes_branched >= config.node_limit:
            exhausted = True
            break
        bound_key, key, lo, hi = heapq.heappop(heap)
        bound = -bound_key
        if bound <= inc_val + 1e-12:
            continue
        payload = node_payload.pop(key, None)
        if payload is None:
            sol = solve_lp(lp, lo, hi)
            lp_iters += sol.iterations
            if sol.status != "optimal" or sol.objective <= inc_val + 1e-12:
                continue
            x, obj = sol.x, sol.objective
        else:
            x, obj = payload
        z = fractional_info(x)
        if z is None:
            if obj > inc_val + 1e-12:
                inc_val, inc_x = obj, x.copy()
            continue

        nodes_branched += 1
        children = _branch(model, x, lo, hi)
        for c_lo, c_hi in children:
            heapq.heappush(heap, (-obj, counter, c_lo, c_hi))
            counter += 1

    best_bound = max((-k for k, *_ in heap), default=inc_val)
    gap = max(0.0, best_bound - inc_val)
    if inc_x is None:
        if exhausted:
            raise BudgetExhaustedError("no incumbent found within budget")
        return MIPSolution("infeasible")
    status = "optimal" if gap <= config.gap_tol else "feasible-incumbent"
    return MIPSolution(
        status, inc_x, inc_val,
        gap=gap, nodes_branched=nodes_branched, lp_iterations=lp_iters,
    )


def _branch(model: MIPModel, x, lo, hi):
    """Children as (lower, upper) bound copies; deterministic selection."""
    best_group = None
    best_score = INT_TOL
    for gi, g in enumerate(model.sos1_groups):
        unfixed = [j for j in g if hi[j] > lo[j]]
        if len(unfixed) < 2:
            continue
        score = sum(min(x[j], 1.0 - x[j]) for j in unfixed)
        if score > best_score + 1e-15:
            best_score = score
            best_group = unfixed
    if best_group is not None:
        half = (len(best_group) + 1) // 2
        s1, s2 = best_group[:half], best_group[half:]
        a_lo, a_hi = lo.copy(), hi.copy()
        a_hi[s2] = 0.0
        b_lo, b_hi = lo.copy(), hi.copy()
        b_hi[s1] = 0.0
        return [(a_lo, a_hi), (b_lo, b_hi)]

    frac = [(min(x[j] - np.floor(x[j]), np.ceil(x[j]) - x[j]), j)
            for j in model.binary_indices if hi[j] > lo[j]]
    frac = [(f, j) for f, j in frac if f > INT_TOL]
    _, j = max(frac, key=lambda t: (t[0], -t[1]))
    a_lo, a_hi = lo.copy(), hi.copy()
    a_hi[j] = 0.0
    b_lo, b_hi = lo.copy(), hi.copy()
    b_lo[j] = 1.0
    return [(a_lo, a_hi), (b_lo, b_hi)]


def write_lp_format(model: MIPModel | LinearProgram, path) -> None:
    """Dump in the industry LP text format for external cross-checks."""
    lp = model.lp if isinstance(model, MIPModel) else model
    binaries = model.binary_indices if isinstance(model, MIPModel) else ()
    a = {}
    for r, c, v in zip(lp.row_idx, lp.col_idx, lp.values):
        a.setdefault(int(r), []).append((int(c), float(v)))
    lines = ["Maximize", " obj: " + _lin_expr(np.flatnonzero(lp.objective), lp.objective)]
    lines.append("Subject To")
    op = {"<=": "<=", ">=": ">=", "=": "="}
    for r in range(lp.n_rows):
        terms = sorted(a.get(r, []))
        expr = " + ".join(f"{v:.17g} x{c}" for c, v in terms).replace("+ -", "- ")
        lines.append(f" c{r}: {expr} {op[lp.senses[r]]} {lp.rhs[r]:.17g}")
    lines.append("Bounds")
    for j in range(lp.n_vars):
        lo, hi = lp.lower[j], lp.upper[j]
        lo_s = f"{lo:.17g}" if np.isfinite(lo) else "-inf"
        hi_s = f"{hi:.17g}" if np.isfinite(hi) else "+inf"
        lines.append(f" {lo_s} <= x{j} <= {hi_s}")
    if binaries:
        lines.append("Binaries")
        lines.append(" " + " ".join(f"x{j}" for j in binaries))
    lines.append("End")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _lin_expr(idx, coef) -> str:
    if len(idx) == 0:
        return "0 x0"
    return " + ".join(f"{coef[j]:.17g} x{j}" for j in idx).replace("+ -", "- ")


def _solve_external(model: MIPModel, config: MIPConfig) -> MIPSolution:
    """File-exchange path: write .lp, run the user's solver, parse `name value` lines."""
    import tempfile, os

    with tempfile.TemporaryDirectory() as td:
        lp_path = os.path.join(td, "model.lp")
        sol_path = os.path.join(td, "model.sol")
        write_lp_format(model, lp_path)
        cmd = config.external_solver_cmd.format(model=lp_path, solution=sol_path)
        subprocess.run(cmd, shell=True, check=True)
        x = np.zeros(model.lp.n_vars)
        with open(sol_path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                name, val = line.split()[:2]
                if name.startswith("x"):
                    x[int(name[1:])] = float(val)
    obj = float(model.lp.objective @ x)
    return MIPSolution("feasible-incumbent", x, obj, gap=INF)
