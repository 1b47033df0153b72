"""Geometric-program representation and a log-space interior-point solver.

Monomials are c * prod(x_i^a_i) with c > 0. After the change of variables
y = ln x every monomial is affine in y and every posynomial constraint
becomes a log-sum-exp constraint, so the problem is convex. The solver runs
a standard barrier method with equality-constrained Newton steps on a
sparse KKT system; a phase-1 pass finds a strictly feasible start when the
supplied point violates inequalities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

EQ_TOL = 1e-8        # |log g| bound certifying monomial equalities at optimum
GRAD_TOL = 1e-9
MAX_NEWTON = 100     # per barrier stage
BARRIER_MU = 10.0
BARRIER_EPS = 1e-9   # duality-gap target m/t
BARRIER_T_MAX = 1e8  # slacks ~1/t; beyond this float64 Newton turns to noise
KKT_REG = 1e-12      # quasi-definite shift keeping factorizations stable
PROX_WEIGHT = 1e-3   # warm-start tie-break; zero force at its own center, so a
                     # settled iterate is a true stationary point, but strong
                     # enough to damp moves the objective barely rewards


class GpError(Exception):
    pass


@dataclass(frozen=True)
class Monomial:
    coeff: float
    exponents: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not (self.coeff > 0) or not math.isfinite(self.coeff):
            raise GpError(f"monomial coefficient must be positive, got {self.coeff}")

    def value(self, point: dict[str, float]) -> float:
        v = self.coeff
        for name, a in self.exponents.items():
            v *= point[name] ** a
        return v

    def __mul__(self, other: "Monomial") -> "Monomial":
        exps = dict(self.exponents)
        for name, a in other.exponents.items():
            exps[name] = exps.get(name, 0.0) + a
        return Monomial(self.coeff * other.coeff, exps)

    def power(self, p: float) -> "Monomial":
        return Monomial(self.coeff**p, {k: a * p for k, a in self.exponents.items()})


@dataclass(frozen=True)
class Posynomial:
    terms: tuple[Monomial, ...]

    def __post_init__(self):
        if not self.terms:
            raise GpError("posynomial needs at least one term")

    def value(self, point: dict[str, float]) -> float:
        return sum(t.value(point) for t in self.terms)


@dataclass
class GpSolution:
    values: dict[str, float]
    objective: float          # may overflow to inf for huge exponents
    log_objective: float      # always finite at a solved point
    status: str               # optimal | infeasible | max-iterations
    iterations: int
    kkt_residual: float
    equality_residual: float


class GpProblem:
    """A geometric program: minimize a posynomial subject to monomial
    equalities (= 1) and posynomial inequalities (<= 1)."""

    def __init__(self):
        self._var_index: dict[str, int] = {}
        self.objective: Optional[Posynomial] = None
        self.equalities: list[tuple[str, Monomial]] = []
        self.inequalities: list[tuple[str, Posynomial]] = []

    # -- construction ----------------------------------------------------

    def declare_variable(self, name: str) -> None:
        if name not in self._var_index:
            self._var_index[name] = len(self._var_index)

    def _absorb(self, exponents: Iterable[str]) -> None:
        for name in exponents:
            self.declare_variable(name)

    def set_objective(self, posy: Posynomial) -> None:
        for t in posy.terms:
            self._absorb(t.exponents)
        self.objective = posy

    def add_equality(self, mono: Monomial, label: str = "") -> None:
        """Constrain mono(x) = 1."""
        self._absorb(mono.exponents)
        self.equalities.append((label, mono))

    def add_inequality(self, posy: Posynomial | Monomial, label: str = "") -> None:
        """Constrain posy(x) <= 1."""
        if isinstance(posy, Monomial):
            posy = Posynomial((posy,))
        for t in posy.terms:
            self._absorb(t.exponents)
        self.inequalities.append((label, posy))

    @property
    def variables(self) -> list[str]:
        return list(self._var_index)

    @property
    def n_vars(self) -> int:
        return len(self._var_index)

    def dump_text(self) -> str:
        """One monomial per line, exponents keyed by variable name."""

        def fmt(t: Monomial) -> str:
            parts = [f"{t.coeff!r}"]
            for name in sorted(t.exponents):
                parts.append(f"{name}^{t.exponents[name]!r}")
            return " ".join(parts)

        out = [f"variables ({self.n_vars}): " + " ".join(self.variables)]
        out.append("minimize:")
        if self.objective is not None:
            for t in self.objective.terms:
                out.append("  " + fmt(t))
        for label, m in self.equalities:
            out.append(f"equality = 1 [{label}]:")
            out.append("  " + fmt(m))
        for label, p in self.inequalities:
            out.append(f"inequality <= 1 [{label}]:")
            for t in p.terms:
                out.append("  " + fmt(t))
        return "\n".join(out)


# ---------------------------------------------------------------------------
# matrix helpers


def elementwise_exp(M: np.ndarray, b: float) -> np.ndarray:
    """b to the power of each entry of M."""
    if b <= 0:
        raise GpError(f"base must be positive, got {b}")
    return np.power(b, np.asarray(M, dtype=float))


def exp_matrix_product(Y: np.ndarray, Xhat: np.ndarray) -> np.ndarray:
    """C with c_ij = prod_k xhat_kj ^ y_ik.

    Turns matrix products into products of powers: for any base b > 0,
    elementwise_exp(Y @ X, b) equals exp_matrix_product(Y, elementwise_exp(X, b)).
    """
    Xhat = np.asarray(Xhat, dtype=float)
    if np.any(Xhat <= 0):
        raise GpError("exp_matrix_product needs strictly positive entries")
    return np.exp(np.asarray(Y, dtype=float) @ np.log(Xhat))


# ---------------------------------------------------------------------------
# solver internals


def _stack_terms(p: GpProblem, terms, dense: bool = False):
    n = p.n_vars
    data, ri, ci = [], [], []
    consts = []
    for i, t in enumerate(terms):
        for name, a in t.exponents.items():
            ri.append(i)
            ci.append(p._var_index[name])
            data.append(a)
        consts.append(math.log(t.coeff))
    A = sp.csr_matrix((data, (ri, ci)), shape=(len(terms), n))
    if dense:
        return A.toarray(), np.array(consts)
    return A, np.array(consts)


class _LogProblem:
    """Compiled log-space form: affine data for objective and constraints."""

    def __init__(self, p: GpProblem):
        n = p.n_vars
        self.n = n
        if p.objective is None:
            raise GpError("problem has no objective")
        self.A0, self.b0 = _stack_terms(p, p.objective.terms)
        if p.equalities:
            monos = [m for _, m in p.equalities]
            self.G, logc = _stack_terms(p, monos)
            self.h = -logc
        else:
            self.G = sp.csr_matrix((0, n))
            self.h = np.zeros(0)
        # single-term inequalities become affine rows; the rest keep LSE form
        aff_rows: list[Monomial] = []
        self.lse: list[tuple[np.ndarray, np.ndarray]] = []
        for _, posy in p.inequalities:
            if len(posy.terms) == 1:
                aff_rows.append(posy.terms[0])
            else:
                A, b = _stack_terms(p, posy.terms, dense=True)
                self.lse.append((A, b))
        if aff_rows:
            self.A1, self.b1 = _stack_terms(p, aff_rows)
        else:
            self.A1 = sp.csr_matrix((0, n))
            self.b1 = np.zeros(0)
        self.m_ineq = self.A1.shape[0] + len(self.lse)
        # optional quadratic pull toward a reference point; breaks ties on a
        # flat objective without measurably moving a strict optimum. The
        # diagonal rescales coordinates whose physical leverage dwarfs their
        # log-space span (pump speeds, valve openness), which would otherwise
        # swing freely under a uniform metric.
        self.prox_center: Optional[np.ndarray] = None
        self.prox_weight = 0.0
        self.prox_diag: Optional[np.ndarray] = None

    def f0(self, y: np.ndarray) -> float:
        r = self.A0 @ y + self.b0
        mx = float(np.max(r))
        return mx + math.log(float(np.sum(np.exp(r - mx))))

    def f0_parts(self, y: np.ndarray):
        r = self.A0 @ y + self.b0
        mx = float(np.max(r))
        e = np.exp(r - mx)
        s = float(np.sum(e))
        return mx + math.log(s), e / s

    def ineq_values(self, y: np.ndarray) -> np.ndarray:
        vals = []
        if self.A1.shape[0]:
            vals.append(self.A1 @ y + self.b1)
        for A, b in self.lse:
            r = A @ y + b
            mx = float(np.max(r))
            vals.append(np.array([mx + math.log(float(np.sum(np.exp(r - mx))))]))
        return np.concatenate(vals) if vals else np.zeros(0)


def _solve_kkt(H: sp.spmatrix, G: sp.spmatrix, grad: np.ndarray,
               eq_rhs: np.ndarray):
    """One Newton step of an equality-constrained minimization.

    The KKT system is solved without regularization first: a shifted (2,2)
    block would couple the equality dual into the step and walk the iterate
    off the manifold once barrier duals get large. The shifted form is kept
    only as a fallback for redundant equality rows.
    """
    n = H.shape[0]
    n_eq = G.shape[0]
    if n_eq:
        rhs = np.concatenate([-grad, eq_rhs])
        try:
            sol = splu(sp.bmat([[H, G.T], [G, None]], format="csc")).solve(rhs)
        except (RuntimeError, ValueError):
            try:
                K = sp.bmat(
                    [[H, G.T], [G, -KKT_REG * sp.eye(n_eq)]], format="csc"
                )
                sol = splu(K).solve(rhs)
            except (RuntimeError, ValueError) as exc:
                raise GpError(f"KKT factorization failed: {exc}") from exc
        dy = sol[:n]
        nu = sol[n:]
        res = float(np.max(np.abs(grad + G.T @ nu), initial=0.0))
    else:
        try:
            dy = splu(H.tocsc()).solve(-grad)
        except (RuntimeError, ValueError) as exc:
            raise GpError(f"Hessian factorization failed: {exc}") from exc
        res = float(np.max(np.abs(grad), initial=0.0))
    return dy, res


def _min_norm_equality_point(G: sp.csr_matrix, h: np.ndarray, n: int) -> np.ndarray:
    """Smallest-norm y with G y = h, via a regularized augmented system."""
    if G.shape[0] == 0:
        return np.zeros(n)
    K = sp.bmat(
        [[1e-10 * sp.eye(n), G.T], [G, -KKT_REG * sp.eye(G.shape[0])]],
        format="csc",
    )
    rhs = np.concatenate([np.zeros(n), h])
    try:
        sol = splu(K).solve(rhs)
    except (RuntimeError, ValueError) as exc:
        raise GpError(f"equality system factorization failed: {exc}") from exc
    return sol[:n]


def _project_equalities(y: np.ndarray, G: sp.csr_matrix, h: np.ndarray) -> np.ndarray:
    if G.shape[0] == 0:
        return y
    r = h - G @ y
    if float(np.max(np.abs(r), initial=0.0)) < 1e-14:
        return y
    n = len(y)
    K = sp.bmat(
        [[sp.eye(n), G.T], [G, -KKT_REG * sp.eye(G.shape[0])]], format="csc"
    )
    rhs = np.concatenate([np.zeros(n), r])
    try:
        corr = splu(K).solve(rhs)[:n]
    except (RuntimeError, ValueError):
        return y
    return y + corr


def _strictly_feasible(lp: _LogProblem, y: np.ndarray) -> bool:
    f = lp.ineq_values(y)
    return not (f.size and float(np.max(f)) >= 0.0)


def _newton_solve(lp: _LogProblem, y: np.ndarray, t_bar: float,
                  max_steps: int = MAX_NEWTON):
    """Minimize t*f0 + barrier over {G y = h} from a strictly feasible y.
    Returns (y, steps, kkt_residual)."""
    n = lp.n
    G, h = lp.G, lp.h
    m1 = lp.A1.shape[0]
    kkt_res = math.inf
    y = y.copy()
    I_reg = 1e-10 * sp.eye(n, format="csr")
    w_prox = lp.prox_weight
    c_prox = lp.prox_center
    d2_prox = lp.prox_diag ** 2 if w_prox and lp.prox_diag is not None \
        else np.ones(n)

    def merit(yv: np.ndarray) -> float:
        f = lp.ineq_values(yv)
        if f.size and float(np.max(f)) >= 0.0:
            return math.inf
        val = t_bar * lp.f0(yv)
        if w_prox:
            val += t_bar * w_prox * float(d2_prox @ (yv - c_prox) ** 2)
        if f.size:
            val -= float(np.sum(np.log(-f)))
        return val

    steps = 0
    for _ in range(max_steps):
        steps += 1
        _, prob = lp.f0_parts(y)
        grad = t_bar * (lp.A0.T @ prob)
        M = sp.csr_matrix(np.diag(prob) - np.outer(prob, prob))
        H = t_bar * (lp.A0.T @ M @ lp.A0) + I_reg
        if w_prox:
            grad = grad + t_bar * 2.0 * w_prox * d2_prox * (y - c_prox)
            H = H + t_bar * 2.0 * w_prox * sp.diags(d2_prox, format="csr")
        if m1:
            s1 = lp.A1 @ y + lp.b1  # all < 0 on the interior
            grad = grad + lp.A1.T @ (-1.0 / s1)
            H = H + lp.A1.T @ sp.diags(1.0 / s1**2) @ lp.A1
        for A, b in lp.lse:
            r = A @ y + b
            mx = float(np.max(r))
            e = np.exp(r - mx)
            sval = float(np.sum(e))
            fj = mx + math.log(sval)
            pj = e / sval
            gj = A.T @ pj
            Hj = A.T @ (np.diag(pj) - np.outer(pj, pj)) @ A
            grad = grad + gj / (-fj)
            H = H + sp.csr_matrix(Hj / (-fj) + np.outer(gj, gj) / fj**2)

        eq_rhs = (h - G @ y) if G.shape[0] else np.zeros(0)
        dy, kkt_res = _solve_kkt(H.tocsc(), G, grad, eq_rhs)

        decrement = float(-grad @ dy)
        if decrement < 0:
            dy = -dy
            decrement = -decrement
        if decrement / 2.0 <= 1e-12 or kkt_res <= GRAD_TOL:
            break

        base = merit(y)
        eq_base = float(np.max(np.abs(G @ y - h), initial=0.0)) if G.shape[0] else 0.0
        alpha = 1.0
        accepted = False
        for _ in range(60):
            cand = y + alpha * dy
            if merit(cand) < base - 1e-4 * alpha * decrement:
                # the merit ignores equalities, so refuse drift off the manifold
                if G.shape[0]:
                    eq_cand = float(np.max(np.abs(G @ cand - h), initial=0.0))
                    if eq_cand > eq_base + 1e-9:
                        alpha *= 0.5
                        continue
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        y = cand
        if float(np.max(np.abs(y), initial=0.0)) > 1e7:
            raise GpError("iterates diverged; problem looks unbounded")
    return y, steps, kkt_res


PHASE1_BOX = 50.0  # trust box in y = ln x; far beyond any physical value


def _phase1(lp: _LogProblem, y0: np.ndarray):
    """Find a strictly feasible point on the equality manifold, or None.

    Minimizes tau subject to f_j(y) <= tau. The search is confined to
    |y_i| <= PHASE1_BOX and tau >= -1, which keeps the subproblem bounded
    when the true feasible set has free directions; the box is generous
    enough that no sensible monomial bound is excluded by it.
    """
    n = lp.n
    y0 = np.clip(y0, -PHASE1_BOX + 1.0, PHASE1_BOX - 1.0)
    f = lp.ineq_values(y0)
    tau = max(float(np.max(f)) + 1.0, 0.0) if f.size else 0.0
    z = np.concatenate([y0, [tau]])

    n_eq = lp.G.shape[0]
    if n_eq:
        G_ext = sp.hstack([lp.G, sp.csr_matrix((n_eq, 1))]).tocsr()
    else:
        G_ext = sp.csr_matrix((0, n + 1))
    m1 = lp.A1.shape[0]
    if m1:
        A1_ext = sp.hstack([lp.A1, sp.csr_matrix(-np.ones((m1, 1)))]).tocsr()
    else:
        A1_ext = sp.csr_matrix((0, n + 1))
    # artificial rows: y_i <= B, -y_i <= B, -tau <= 1
    A_box = sp.vstack([
        sp.hstack([sp.eye(n), sp.csr_matrix((n, 1))]),
        sp.hstack([-sp.eye(n), sp.csr_matrix((n, 1))]),
        sp.csr_matrix(([-1.0], ([0], [n])), shape=(1, n + 1)),
    ]).tocsr()
    c_box = np.concatenate([np.full(2 * n, -PHASE1_BOX), [-1.0]])
    A_aff = sp.vstack([A1_ext, A_box]).tocsr()
    c_aff = np.concatenate([lp.b1, c_box])
    m_total = A_aff.shape[0] + len(lp.lse)
    I_reg = 1e-10 * sp.eye(n + 1, format="csr")

    def p1_merit(zz):
        sl_true = lp.ineq_values(zz[:n]) - zz[n]
        sl_box = A_box @ zz + c_box
        worst = max(
            float(np.max(sl_true)) if sl_true.size else -1.0,
            float(np.max(sl_box)),
        )
        if worst >= 0.0:
            return math.inf
        val = t_bar * zz[n] - float(np.sum(np.log(-sl_box)))
        if sl_true.size:
            val -= float(np.sum(np.log(-sl_true)))
        return val

    total = 0
    t_bar = 1.0
    for _stage in range(40):
        for _ in range(MAX_NEWTON):
            total += 1
            yv = z[:n]
            fvals = lp.ineq_values(yv)
            if fvals.size and float(np.max(fvals)) < -1e-8:
                return yv, total
            grad = np.zeros(n + 1)
            grad[n] = t_bar
            H = I_reg.copy()
            sl = A_aff @ z + c_aff  # all < 0 on the phase-1 interior
            grad = grad + A_aff.T @ (-1.0 / sl)
            H = H + A_aff.T @ sp.diags(1.0 / sl**2) @ A_aff
            pos = m1
            for A, b in lp.lse:
                r = A @ yv + b
                mx = float(np.max(r))
                e = np.exp(r - mx)
                sv = float(np.sum(e))
                pj = e / sv
                slj = fvals[pos] - z[n]
                gj = np.concatenate([A.T @ pj, [-1.0]])
                Hj = np.zeros((n + 1, n + 1))
                Hj[:n, :n] = A.T @ (np.diag(pj) - np.outer(pj, pj)) @ A
                H = H + sp.csr_matrix(Hj / (-slj) + np.outer(gj, gj) / slj**2)
                grad = grad + gj / (-slj)
                pos += 1

            eq_rhs = (lp.h - lp.G @ yv) if n_eq else np.zeros(0)
            dz, _res = _solve_kkt(H.tocsc(), G_ext, grad, eq_rhs)
            dec = float(-grad @ dz)
            if dec < 0:
                dz = -dz
                dec = -dec
            if dec / 2.0 <= 1e-10:
                break

            base = p1_merit(z)
            alpha = 1.0
            moved = False
            for _ in range(60):
                cand = z + alpha * dz
                if p1_merit(cand) < base - 1e-4 * alpha * dec:
                    moved = True
                    break
                alpha *= 0.5
            if not moved:
                break
            z = cand
        fvals = lp.ineq_values(z[:n])
        if fvals.size and float(np.max(fvals)) < -1e-8:
            return z[:n], total
        # tau* >= tau - gap; a positive lower bound certifies infeasibility
        if z[n] - m_total / t_bar > 1e-12:
            return None, total
        t_bar *= BARRIER_MU
    fvals = lp.ineq_values(z[:n])
    if fvals.size == 0 or float(np.max(fvals)) < 0.0:
        return z[:n], total
    return None, total


def solve_gp(problem: GpProblem,
             warm_start: Optional[dict[str, float]] = None,
             prox_scales: Optional[dict[str, float]] = None) -> GpSolution:
    """Solve a GP. `warm_start` maps variable names to positive values.

    A warm start also serves as the tie-break anchor: when the objective is
    flat along part of the feasible set, the solver returns the optimum
    nearest the start instead of an arbitrary interior point. The pull is
    weak enough (PROX_WEIGHT) that a strict optimum is unaffected, and the
    reported objective never includes it. `prox_scales` stretches the
    tie-break metric for named variables whose physical effect per log unit
    is outsized, so the anchor grips them as firmly as everything else.
    """
    lp = _LogProblem(problem)
    names = problem.variables
    n = lp.n

    def result(y, status, iters, kkt, eq):
        log_obj = lp.f0(y)
        return GpSolution(
            values={nm: math.exp(v) for nm, v in zip(names, y)},
            objective=math.exp(log_obj) if log_obj < 700 else math.inf,
            log_objective=log_obj,
            status=status,
            iterations=iters,
            kkt_residual=kkt,
            equality_residual=eq,
        )

    iterations = 0
    if warm_start is not None:
        start = np.array([math.log(warm_start.get(nm, 1.0)) for nm in names])
        y = _project_equalities(start, lp.G, lp.h)
        # anchor on the start itself: the uniform-metric projection above may
        # have dumped equality residuals into the cheap coordinates
        lp.prox_center = start
        lp.prox_weight = PROX_WEIGHT
        if prox_scales:
            diag = np.ones(n)
            for nm, sc in prox_scales.items():
                idx = problem._var_index.get(nm)
                if idx is not None:
                    diag[idx] = max(float(sc), 1.0)
            lp.prox_diag = diag
    else:
        y = _min_norm_equality_point(lp.G, lp.h, n)
    eq_res = float(np.max(np.abs(lp.G @ y - lp.h), initial=0.0)) if lp.G.shape[0] else 0.0
    if eq_res > 1e-6:
        return result(y, "infeasible", 0, math.inf, eq_res)

    if lp.m_ineq and not _strictly_feasible(lp, y):
        y_feas, used = _phase1(lp, y)
        iterations += used
        if y_feas is None:
            return result(y, "infeasible", iterations, math.inf, eq_res)
        projected = _project_equalities(y_feas, lp.G, lp.h)
        # keep strict feasibility over exact equality; polishing comes later
        y = projected if _strictly_feasible(lp, projected) else y_feas

    status = "optimal"
    kkt_res = math.inf
    if lp.m_ineq == 0:
        y, used, kkt_res = _newton_solve(lp, y, 1.0)
        iterations += used
    else:
        t_bar = 1.0
        while True:
            y, used, kkt_res = _newton_solve(lp, y, t_bar)
            kkt_res /= t_bar
            iterations += used
            if lp.m_ineq / t_bar < BARRIER_EPS or t_bar >= BARRIER_T_MAX:
                break
            t_bar *= BARRIER_MU

    y_polished = _project_equalities(y, lp.G, lp.h)
    f = lp.ineq_values(y_polished)
    if f.size and float(np.max(f)) >= 1e-6:
        y_polished = y  # keep the interior point if polishing overshoots
    y = y_polished
    eq_res = float(np.max(np.abs(lp.G @ y - lp.h), initial=0.0)) if lp.G.shape[0] else 0.0
    if status == "optimal" and eq_res > EQ_TOL:
        status = "max-iterations"
    return result(y, status, iterations, kkt_res, eq_res)
