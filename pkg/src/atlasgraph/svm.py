"""Soft-margin SVM with a quadratic polynomial kernel.

Chart boundaries are zero loci of kernel decision functions
``f(x) = sum_i coef_i k(x_i, x) + b`` with ``k(x, y) = x.y + (x.y)^2``.
The dual problem is solved by sequential minimal optimization with
maximal-violating-pair working-set selection, plus two accelerations
that leave the stopping criterion untouched: bound-stuck variables are
shrunk out of the scans between full-set verifications, and once the
gap is small the remaining free variables are finished by an exact
equality-constrained step (the quadratic kernel has feature dimension
D + D**2, so its Gram matrix is low rank and plain pair updates crawl
along the flat directions).

The solver works in the ``alpha * y`` parametrization: each variable
lives in a box ``[min(0, y*C), max(0, y*C)]`` and the equality
constraint becomes a plain zero-sum condition, which pair updates
preserve automatically.  ``C`` may be a scalar or a per-point array,
which is how class-weighted training is expressed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_C = 10.0
DEFAULT_TOL = 1e-5
MAX_PAIR_UPDATES = 10**6

_COLUMN_CACHE_LIMIT = 256


class SvmConvergenceError(RuntimeError):
    """Solver exhausted its pair-update budget before reaching tolerance.

    The remaining maximal-violating-pair gap is stored in ``gap``.
    """

    def __init__(self, message: str, gap: float):
        super().__init__(message)
        self.gap = gap


def quadratic_kernel(x: np.ndarray, y: np.ndarray) -> float:
    """Evaluate k(x, y) = x.y + (x.y)^2 for one pair of vectors."""
    s = float(np.dot(x, y))
    return s + s * s


def kernel_gram(X: np.ndarray, Y: np.ndarray | None = None) -> np.ndarray:
    """Pairwise kernel matrix k(X[i], Y[j]); Y defaults to X."""
    X = np.asarray(X, dtype=float)
    Y = X if Y is None else np.asarray(Y, dtype=float)
    G = X @ Y.T
    return G + G * G


@dataclass(frozen=True)
class SmoSolution:
    """Raw dual solution in the alpha*y parametrization.

    Attributes
    ----------
    alpha_y : ndarray, shape (n,)
        Signed dual coefficients alpha_i * y_i for every training point.
    bias : float
        Intercept of the decision function.
    gap : float
        Final maximal-violating-pair gap (negative infinity when one of
        the working sets emptied, which also certifies optimality).
    n_updates : int
        Number of pair updates performed.
    """

    alpha_y: np.ndarray
    bias: float
    gap: float
    n_updates: int


@dataclass(frozen=True)
class SvmModel:
    """Trained kernel classifier; only support vectors are kept.

    ``coef`` holds alpha_i * y_i for each support vector, so the decision
    function is ``kernel_gram(points, support_vectors) @ coef + bias``.
    """

    support_vectors: np.ndarray
    coef: np.ndarray
    bias: float
    C: float


_SHRINK_PERIOD = 512
_SHRINK_MIN_ACTIVE = 64
_GRAM_LIMIT = 6500
_POLISH_MIN = 1024
_POLISH_GAP = 1e-2
_POLISH_MAX_STEPS = 1000
_POLISH_MAX_FREE = 512


class _ActiveSet:
    """Working view of the dual problem restricted to unfrozen variables.

    Variables stuck at a box bound whose gradient lies outside the
    current violating range cannot enter a maximal-violating pair, so
    they are periodically frozen out of the scans.  Convergence is
    always re-verified on the full variable set before the solver
    returns, which keeps the stopping criterion exact.
    """

    def __init__(self, X, y, lower, upper, alpha):
        self.X = X
        self.y = y
        self.lower_full = lower
        self.upper_full = upper
        n = X.shape[0]
        self.alpha = alpha
        if n <= _GRAM_LIMIT:
            P = X @ X.T
            self.G = P + P * P
        else:
            self.G = None
        self.idx = np.arange(n)
        grad = y.copy()
        nz = np.flatnonzero(alpha)
        if nz.size:
            grad -= self._columns_for(nz) @ alpha[nz]
        self._load(grad)

    def _columns_for(self, nz: np.ndarray) -> np.ndarray:
        if self.G is not None:
            return self.G[:, nz]
        P = self.X @ self.X[nz].T
        return P + P * P

    def _load(self, grad_active: np.ndarray) -> None:
        idx = self.idx
        if self.G is None:
            self.Xa = np.ascontiguousarray(self.X[idx])
        self.grad = grad_active
        self.lo = self.lower_full[idx]
        self.hi = self.upper_full[idx]
        if self.G is not None:
            self.diag = self.G.diagonal()[idx].copy()
        else:
            diag = np.einsum("ij,ij->i", self.Xa, self.Xa)
            self.diag = diag + diag * diag
        a = self.alpha[idx]
        self.pen_up = np.where(a < self.hi, 0.0, -np.inf)
        self.pen_dn = np.where(a > self.lo, 0.0, np.inf)
        self.buf = np.empty(idx.shape[0])
        self.tmp = np.empty(idx.shape[0])
        self.cols: dict[int, np.ndarray] = {}

    def column(self, k: int) -> np.ndarray:
        col = self.cols.get(k)
        if col is None:
            if self.G is not None:
                col = self.G[self.idx[k]][self.idx]
            else:
                s = self.Xa @ self.Xa[k]
                col = s + s * s
            if len(self.cols) >= _COLUMN_CACHE_LIMIT:
                self.cols.clear()
            self.cols[k] = col
        return col

    def select(self) -> tuple[int, int, float]:
        np.add(self.grad, self.pen_up, out=self.buf)
        i = int(np.argmax(self.buf))
        m = self.buf[i]
        np.add(self.grad, self.pen_dn, out=self.buf)
        j = int(np.argmin(self.buf))
        return i, j, float(m - self.buf[j])

    def update(self, i: int, j: int, gap: float) -> None:
        alpha, idx = self.alpha, self.idx
        gi, gj = idx[i], idx[j]
        d_up = self.hi[i] - alpha[gi]
        d_dn = alpha[gj] - self.lo[j]
        lam = min(d_up, d_dn)
        col_i = self.column(i)
        col_j = self.column(j)
        denom = self.diag[i] + self.diag[j] - 2.0 * col_i[j]
        if denom > 0.0:
            lam = min(lam, gap / denom)
        # Land exactly on the box so bound membership stays crisp.
        alpha[gi] = self.hi[i] if lam == d_up else alpha[gi] + lam
        alpha[gj] = self.lo[j] if lam == d_dn else alpha[gj] - lam
        np.subtract(col_i, col_j, out=self.tmp)
        self.tmp *= lam
        self.grad -= self.tmp
        self.pen_up[i] = 0.0 if alpha[gi] < self.hi[i] else -np.inf
        self.pen_dn[i] = 0.0 if alpha[gi] > self.lo[i] else np.inf
        self.pen_up[j] = 0.0 if alpha[gj] < self.hi[j] else -np.inf
        self.pen_dn[j] = 0.0 if alpha[gj] > self.lo[j] else np.inf

    def shrink(self) -> None:
        if self.idx.shape[0] <= _SHRINK_MIN_ACTIVE:
            return
        np.add(self.grad, self.pen_up, out=self.buf)
        m = self.buf.max()
        np.add(self.grad, self.pen_dn, out=self.buf)
        M = self.buf.min()
        at_up = np.isneginf(self.pen_up)
        at_dn = np.isposinf(self.pen_dn)
        drop = (at_up & (self.grad > m)) | (at_dn & (self.grad < M))
        if not drop.any():
            return
        keep = ~drop
        self.idx = self.idx[keep]
        self._load(self.grad[keep])

    def is_full(self) -> bool:
        return self.idx.shape[0] == self.X.shape[0]

    def unshrink(self) -> None:
        """Restore all variables with an exactly recomputed gradient."""
        nz = np.flatnonzero(self.alpha)
        grad = self.y.copy()
        if nz.size:
            grad -= self._columns_for(nz) @ self.alpha[nz]
        self.idx = np.arange(self.X.shape[0])
        self._load(grad)


def _polish(work: _ActiveSet, tol: float) -> bool:
    """Drive the full-set KKT gap below tol by exact free-set steps.

    The kernel matrix of the quadratic kernel has rank at most
    D + D**2, so near the optimum pair updates mostly shuffle mass
    along flat directions of the dual.  This corrector instead solves
    the equality-constrained stationarity system on the free set
    exactly, walks to the first box face, and admits one violating
    bound variable at a time.  It only ever reports success when the
    maximal-violating-pair gap over all variables is at or below tol;
    on any stall it leaves a feasible iterate behind and lets the
    caller resume pair updates, so convergence semantics are
    unchanged.
    """
    alpha = work.alpha
    lower, upper = work.lower_full, work.upper_full
    y = work.y
    nz = np.flatnonzero(alpha)
    grad = y.copy()
    if nz.size:
        grad -= work._columns_for(nz) @ alpha[nz]
    free = (alpha > lower) & (alpha < upper)
    obj = 0.5 * float(alpha @ (y + grad))
    snap = 1e-11 * float(np.abs(upper).max() + np.abs(lower).max())
    ok = False
    for _ in range(_POLISH_MAX_STEPS):
        F = np.flatnonzero(free)
        if F.size > _POLISH_MAX_FREE:
            break
        if F.size == 0:
            hi = np.max(np.where(alpha < upper, grad, -np.inf))
            lo = np.min(np.where(alpha > lower, grad, np.inf))
            if hi - lo <= tol:
                ok = True
                break
            b = 0.5 * (hi + lo)
        else:
            cols = work._columns_for(F)
            kff = cols[F]
            m = F.size
            sys = np.empty((m + 1, m + 1))
            sys[:m, :m] = kff
            sys[:m, m] = 1.0
            sys[m, :m] = 1.0
            sys[m, m] = 0.0
            rhs = np.empty(m + 1)
            rhs[:m] = grad[F] + kff @ alpha[F]
            rhs[m] = alpha[F].sum()
            try:
                sol = np.linalg.solve(sys, rhs)
            except np.linalg.LinAlgError:
                mu = 1e-12 * max(1.0, float(kff.diagonal().max()))
                sys[:m, :m] = kff + mu * np.eye(m)
                sol = np.linalg.lstsq(sys, rhs, rcond=None)[0]
            b = float(sol[m])
            delta = sol[:m] - alpha[F]
            t = 1.0
            up_room = np.where(delta > 0, (upper[F] - alpha[F]) / np.where(delta > 0, delta, 1.0), np.inf)
            dn_room = np.where(delta < 0, (lower[F] - alpha[F]) / np.where(delta < 0, delta, 1.0), np.inf)
            t = min(1.0, float(np.minimum(up_room, dn_room).min()))
            if t <= 1e-15:
                break
            before = alpha[F].copy()
            alpha[F] = before + t * delta
            at_up = alpha[F] >= upper[F] - snap
            at_dn = alpha[F] <= lower[F] + snap
            alpha[F] = np.where(at_up, upper[F], np.where(at_dn, lower[F], alpha[F]))
            grad -= cols @ (alpha[F] - before)
            new_obj = 0.5 * float(alpha @ (y + grad))
            if new_obj < obj - 1e-7 * max(1.0, abs(obj)):
                grad += cols @ (alpha[F] - before)
                alpha[F] = before
                break
            obj = new_obj
            if (at_up | at_dn).any():
                free[F] = ~(at_up | at_dn)
                if t < 1.0:
                    continue
        at_lower = ~free & (np.abs(alpha - lower) == 0.0)
        at_upper = ~free & (np.abs(alpha - upper) == 0.0)
        viol = np.where(at_lower, grad - b, np.where(at_upper, b - grad, -np.inf))
        k = int(np.argmax(viol))
        if viol[k] <= 0.5 * tol:
            ok = True
            break
        free[k] = True
    work.idx = np.arange(alpha.shape[0])
    work._load(grad)
    if not ok:
        return False
    _, _, gap = work.select()
    return gap <= tol


def smo_solve(
    X: np.ndarray,
    y: np.ndarray,
    C: float | np.ndarray = DEFAULT_C,
    tol: float = DEFAULT_TOL,
    max_updates: int = MAX_PAIR_UPDATES,
) -> SmoSolution:
    """Solve the soft-margin dual for labeled points by SMO.

    Parameters
    ----------
    X : ndarray, shape (n, D)
        Training points, one per row.
    y : ndarray, shape (n,)
        Labels in {-1, +1}.
    C : float or ndarray, shape (n,)
        Box constraint on the dual variables, per point when an array.
    tol : float
        Stop once the maximal-violating-pair gap is at or below this.
    max_updates : int
        Pair-update budget; exceeding it raises SvmConvergenceError.

    Notes
    -----
    The gradient of the dual objective with respect to alpha*y is
    ``y - K @ alpha_y`` and equals the bias at every free vector, which
    is how the intercept is recovered at the end.  Bound-stuck
    variables are shrunk out of the scans periodically; the reported
    gap is always re-validated on the full variable set.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError("X must be (n, D) and y must be (n,)")
    C = np.asarray(C, dtype=float)
    if np.any(C <= 0.0):
        raise ValueError("C must be positive")
    n = X.shape[0]
    lower = np.minimum(0.0, y * C)
    upper = np.maximum(0.0, y * C)

    work = _ActiveSet(X, y, lower, upper, np.zeros(n))
    updates = 0
    polish_below = _POLISH_GAP if n >= _POLISH_MIN else 0.0
    while True:
        i, j, gap = work.select()
        if gap <= tol or not np.isfinite(gap):
            if work.is_full():
                break
            work.unshrink()
            continue
        if gap <= polish_below:
            if not work.is_full():
                work.unshrink()
            if _polish(work, tol):
                _, _, gap = work.select()
                break
            # The corrector stalled; let pair updates make more
            # progress before trying it again.
            polish_below = gap / 4.0
            continue
        if updates >= max_updates:
            raise SvmConvergenceError(
                f"no convergence after {max_updates} pair updates, "
                f"remaining KKT gap {gap:.3e}",
                gap,
            )
        work.update(i, j, gap)
        updates += 1
        if updates % _SHRINK_PERIOD == 0:
            work.shrink()

    if not work.is_full():
        raise AssertionError("solver must finish on the full variable set")
    alpha, grad = work.alpha, work.grad
    free = (alpha > lower) & (alpha < upper)
    if free.any():
        bias = float(grad[free].mean())
    else:
        hi = float(np.max(np.where(alpha < upper, grad, -np.inf)))
        lo = float(np.min(np.where(alpha > lower, grad, np.inf)))
        if not np.isfinite(hi):
            bias = lo
        elif not np.isfinite(lo):
            bias = hi
        else:
            bias = 0.5 * (hi + lo)
    return SmoSolution(alpha_y=alpha, bias=bias, gap=gap, n_updates=updates)


def train_boundary_svm(
    pos: np.ndarray,
    neg: np.ndarray,
    C: float = DEFAULT_C,
    tol: float = DEFAULT_TOL,
    max_updates: int = MAX_PAIR_UPDATES,
    neg_box: float | None = None,
) -> SvmModel:
    """Train a quadratic-kernel soft-margin classifier.

    ``pos`` and ``neg`` are (m, D) arrays of points from the two classes;
    both must be nonempty.  ``neg_box`` optionally gives the negative
    class its own box cap, the standard remedy when one class is so
    outnumbered that the plain optimum abandons it.  Returns a model
    keeping only the support vectors (nonzero dual coefficient).
    """
    pos = np.atleast_2d(np.asarray(pos, dtype=float))
    neg = np.atleast_2d(np.asarray(neg, dtype=float))
    if pos.shape[0] == 0 or neg.shape[0] == 0:
        raise ValueError("both classes must be nonempty")
    if pos.shape[1] != neg.shape[1]:
        raise ValueError(
            f"dimension mismatch: pos has {pos.shape[1]} columns, "
            f"neg has {neg.shape[1]}"
        )
    X = np.vstack([pos, neg])
    y = np.concatenate([np.ones(pos.shape[0]), -np.ones(neg.shape[0])])
    box: float | np.ndarray = C
    if neg_box is not None and neg_box != C:
        box = np.concatenate(
            [np.full(pos.shape[0], C), np.full(neg.shape[0], neg_box)]
        )
    sol = smo_solve(X, y, C=box, tol=tol, max_updates=max_updates)
    keep = sol.alpha_y != 0.0
    return SvmModel(
        support_vectors=X[keep].copy(),
        coef=sol.alpha_y[keep].copy(),
        bias=sol.bias,
        C=float(C if neg_box is None else max(C, neg_box)),
    )


def svm_decision(model: SvmModel, points: np.ndarray):
    """Decision value(s) f(x) = sum_i coef_i k(sv_i, x) + bias.

    Accepts a single D-vector or an (m, D) batch and returns a float or
    an (m,) array accordingly.
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    K = kernel_gram(np.atleast_2d(pts), model.support_vectors)
    values = K @ model.coef + model.bias
    return float(values[0]) if single else values


def dual_objective(X: np.ndarray, y: np.ndarray, alpha_y: np.ndarray) -> float:
    """Dual objective y.alpha_y - 0.5 alpha_y' K alpha_y at a feasible point."""
    ay = np.asarray(alpha_y, dtype=float)
    K = kernel_gram(X)
    return float(np.asarray(y, dtype=float) @ ay - 0.5 * ay @ K @ ay)


def kkt_residuals(
    X: np.ndarray,
    y: np.ndarray,
    alpha_y: np.ndarray,
    bias: float,
    C: float | np.ndarray,
) -> np.ndarray:
    """Per-point stationarity violations of a candidate dual solution.

    Free variables must satisfy grad == bias, variables at the upper box
    bound need grad >= bias and at the lower bound grad <= bias; the
    returned vector holds the magnitude of each violation.
    """
    y = np.asarray(y, dtype=float)
    ay = np.asarray(alpha_y, dtype=float)
    grad = y - kernel_gram(X) @ ay
    lower = np.minimum(0.0, y * C)
    upper = np.maximum(0.0, y * C)
    res = np.abs(grad - bias)
    at_lower = ay <= lower
    at_upper = ay >= upper
    res[at_lower] = np.maximum(0.0, grad[at_lower] - bias)
    res[at_upper] = np.maximum(0.0, bias - grad[at_upper])
    return res
