"""L1-ball geometry: exact Euclidean projection and the constrained LM subproblem.

The subproblem is::

    minimize ||Lam @ th - g||^2   subject to   ||th||_1 <= radius

with ``Lam = J'J + mu diag(J'J)`` and ``g = Lam @ th_j - J' r``.  Its
unconstrained minimizer ``Lam^-1 g`` is the plain LM step from ``th_j``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SubproblemError(RuntimeError):
    """The inner solver did not reach its tolerance."""

    def __init__(self, msg, best=None, residual=None):
        super().__init__(msg)
        self.best = best
        self.residual = residual


def project_l1(v, radius: float) -> np.ndarray:
    """Euclidean projection of ``v`` onto ``{u : ||u||_1 <= radius}``.

    Sort-and-threshold, O(p log p).  The sort is stable, so ties resolve in
    index order.
    """
    if radius < 0:
        raise ValueError("radius must be non-negative")
    v = np.asarray(v, dtype=float)
    a = np.abs(v)
    if not np.isfinite(radius) or a.sum() <= radius:
        return v.copy()
    if radius == 0:
        return np.zeros_like(v)
    u = a[np.argsort(-a, kind="stable")]
    css = np.cumsum(u)
    k = np.arange(1, len(u) + 1)
    keep = u * k > css - radius
    keep[0] = True   # holds for any radius > 0; rounding can lose it for tiny radii
    rho = np.nonzero(keep)[0][-1]
    thresh = (css[rho] - radius) / (rho + 1.0)
    return np.sign(v) * np.maximum(a - thresh, 0.0)


@dataclass(frozen=True)
class SubproblemSpec:
    lambda_matrix: np.ndarray
    target: np.ndarray
    radius: float

    def __post_init__(self):
        lam = np.asarray(self.lambda_matrix, dtype=float)
        g = np.asarray(self.target, dtype=float)
        object.__setattr__(self, "lambda_matrix", lam)
        object.__setattr__(self, "target", g)
        if lam.ndim != 2 or lam.shape[0] != lam.shape[1] or lam.shape[0] != g.shape[0]:
            raise ValueError("lambda_matrix must be p x p and target length p")
        scale = max(np.max(np.abs(lam)), 1.0)
        if np.max(np.abs(lam - lam.T)) > 1e-10 * scale:
            raise ValueError("lambda_matrix must be symmetric")
        if np.any(np.diag(lam) <= 0):
            raise ValueError("lambda_matrix diagonal must be positive")
        if not self.radius >= 0:
            raise ValueError("radius must be non-negative")

    @classmethod
    def from_lm(cls, jac, resid, theta, mu, radius):
        """Build the subproblem for one LM step from ``theta``."""
        H = jac.T @ jac
        diag = np.diag(H)
        # a dead column would leave a zero diagonal; floor it relative to the rest
        diag = np.maximum(diag, 1e-12 * max(float(diag.max(initial=0.0)), 1e-300))
        lam = H + mu * np.diag(diag)
        lam = 0.5 * (lam + lam.T)
        return cls(lam, lam @ theta - jac.T @ resid, radius)

    def objective(self, th) -> float:
        r = self.lambda_matrix @ th - self.target
        return float(r @ r)


@dataclass
class SubproblemInfo:
    method: str
    iterations: int
    residual: float
    objective_trace: list = field(default_factory=list)


def _power_iteration(M, iters=200, tol=1e-10):
    v = np.ones(M.shape[0]) / np.sqrt(M.shape[0])
    lam = 0.0
    for _ in range(iters):
        w = M @ v
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        v = w / nw
        new = float(v @ (M @ v))
        if abs(new - lam) <= tol * abs(new):
            return new
        lam = new
    return lam


def _fista(sp: SubproblemSpec, warm_start, tol, max_iter):
    """Monotone FISTA with adaptive restart on ``0.5 ||Lam th - g||^2``."""
    lam, g, radius = sp.lambda_matrix, sp.target, sp.radius
    H = lam.T @ lam
    c = lam.T @ g
    # small margin over the power-iteration estimate keeps the step safe
    L = 1.01 * _power_iteration(H)
    if L == 0:
        return project_l1(np.zeros_like(g), radius), SubproblemInfo("fista", 0, 0.0)

    def f(th):
        r = lam @ th - g
        return 0.5 * float(r @ r)

    def pg_residual(th):
        return float(np.max(np.abs(th - project_l1(th - (H @ th - c) / L, radius))))

    x = project_l1(np.asarray(warm_start, dtype=float), radius)
    fx = f(x)
    y, t = x.copy(), 1.0
    trace = [2.0 * fx]
    res = pg_residual(x)
    it = 0
    while res > tol:
        if it >= max_iter:
            raise SubproblemError(
                f"projected gradient did not converge in {max_iter} iterations (residual {res:.3g})",
                best=x, residual=res)
        it += 1
        z = project_l1(y - (H @ y - c) / L, radius)
        fz = f(z)
        x_new, fx_new = (z, fz) if fz <= fx else (x, fx)
        if (y - z) @ (z - x) > 0:
            # gradient-based restart: momentum points uphill
            t_new = 1.0
            y = x_new.copy()
        else:
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = x_new + (t / t_new) * (z - x_new) + ((t - 1.0) / t_new) * (x_new - x)
        x, fx, t = x_new, fx_new, t_new
        trace.append(2.0 * fx)
        res = pg_residual(x)
    return x, SubproblemInfo("fista", it, res, trace)


def _homotopy(sp: SubproblemSpec, tol):
    """Exact solve by following the penalized path until the L1 norm hits the radius.

    Along ``min 0.5||A th - g||^2 + lam ||th||_1`` the solution is piecewise
    linear in ``lam`` and its L1 norm grows as ``lam`` decreases; between
    breakpoints the active set and signs are fixed, so the crossing point is
    found in closed form.  Least-squares pieces use QR of the active columns.
    """
    A, g, radius = sp.lambda_matrix, sp.target, sp.radius
    p = len(g)
    th = np.zeros(p)
    if radius == 0:
        return th, SubproblemInfo("homotopy", 0, 0.0)
    corr = A.T @ g
    lam_cur = float(np.max(np.abs(corr)))
    if lam_cur == 0:
        return th, SubproblemInfo("homotopy", 0, 0.0)
    active = [int(np.argmax(np.abs(corr)))]
    signs = {active[0]: float(np.sign(corr[active[0]]))}
    eps = 1e-12 * lam_cur
    for step in range(1, 8 * p + 8):
        Aa = A[:, active]
        s = np.array([signs[k] for k in active])
        Q, R = np.linalg.qr(Aa)
        u = np.linalg.solve(R, Q.T @ g)
        v = np.linalg.solve(R, np.linalg.solve(R.T, s))
        # theta_A(lam) = u - lam * v on this segment
        l1_u, l1_v = float(s @ u), float(s @ v)
        lam_T = (l1_u - radius) / l1_v if l1_v > 0 else -np.inf

        lam_next, event = 0.0, None
        resid_u = g - Aa @ u
        w = Aa @ v
        for j in range(p):
            if j in signs:
                continue
            a_j, b_j = float(A[:, j] @ resid_u), float(A[:, j] @ w)
            for sgn in (1.0, -1.0):
                den = sgn - b_j
                if abs(den) < 1e-15:
                    continue
                lam_j = a_j / den
                if lam_next < lam_j < lam_cur - eps:
                    lam_next, event = lam_j, ("add", j, sgn)
        for i, k in enumerate(active):
            if v[i] == 0:
                continue
            lam_k = u[i] / v[i]
            if lam_next < lam_k < lam_cur - eps and np.sign(u[i] - lam_cur * v[i]) == signs[k]:
                lam_next, event = lam_k, ("drop", k, 0.0)

        if lam_T >= lam_next:
            lam_star = min(max(lam_T, 0.0), lam_cur)
            th = np.zeros(p)
            th[active] = u - lam_star * v
            return th, SubproblemInfo("homotopy", step, 0.0)
        if event is None:
            break
        lam_cur = lam_next
        kind, j, sgn = event
        if kind == "add":
            active.append(j)
            signs[j] = sgn
        else:
            active.remove(j)
            del signs[j]
    raise SubproblemError("homotopy did not terminate", best=th)


def solve_subproblem(sp: SubproblemSpec, warm_start=None, tol: float = 1e-10,
                     method: str = "homotopy", max_iter: int = 10_000, return_info: bool = False):
    """Minimize ``||Lam th - g||^2`` over the L1 ball of ``sp.radius``.

    ``method="homotopy"`` is exact up to rounding; ``method="fista"`` runs
    accelerated projected gradient with step ``1/L`` to a projected-gradient
    residual (in parameter units) of ``tol`` and raises `SubproblemError`
    after ``max_iter`` iterations.  If the unconstrained minimizer is feasible
    it is returned directly by either method.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    p = len(sp.target)
    if warm_start is None:
        warm_start = np.zeros(p)
    unconstrained = np.linalg.solve(sp.lambda_matrix, sp.target)
    if np.sum(np.abs(unconstrained)) <= sp.radius:
        out, info = unconstrained, SubproblemInfo(method, 0, 0.0)
    elif method == "homotopy":
        out, info = _homotopy(sp, tol)
    elif method == "fista":
        out, info = _fista(sp, warm_start, tol, max_iter)
    else:
        raise ValueError(f"unknown method {method!r}")
    return (out, info) if return_info else out
