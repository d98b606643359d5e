"""Locally quadratic charts fitted to point clouds.

A chart models a d-dimensional patch of a manifold embedded in R^D as a
graph over its tangent plane: a point with chart coordinates xi embeds
as ``c + L xi + M (0.5 K (xi kron xi) + a)`` where L and M are
orthonormal frames for the tangent and normal directions at the chart
center c.  The module covers fitting such charts by least squares,
converting trained SVM boundaries into ambient quadratic separators,
pushing separators into chart coordinates as quartic polynomials, and
the transition maps, differentials, and vector transports between
charts.  An Atlas bundles charts with their boundaries and adjacency
and exposes the chart-provider interface used by quasi-Euclidean
stepping.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ChartId, RepresentativePoint
from .svm import SvmModel

FRAME_TOL = 1e-10
RIDGE = 1e-8
LINEAR_KILL_CUTOFF = 1e-10


class NoAdmissibleChartError(RuntimeError):
    """No candidate chart accepts the point (all quartics nonnegative)."""


def _as_matrix(arr, name: str) -> np.ndarray:
    out = np.asarray(arr, dtype=float)
    if out.ndim != 2:
        raise ValueError(f"{name} must be a matrix, got ndim={out.ndim}")
    return out


@dataclass(frozen=True)
class QuadraticChart:
    """One local quadratic chart.

    Attributes
    ----------
    center : ndarray, shape (D,)
        Ambient chart center.
    L : ndarray, shape (D, d)
        Orthonormal tangent frame.
    M : ndarray, shape (D, D - d)
        Orthonormal normal frame, orthogonal to L.
    K : ndarray, shape (D - d, d*d)
        Quadratic coefficients; row j reshaped (d, d) is symmetric for
        fitted charts since it is contracted against xi kron xi.
    a : ndarray, shape (D - d,)
        Constant normal offset of the fitted surface.
    radius : float
        Fitting-ball radius; coordinates are trusted inside it.
    fit_residual_median : float or None
        Median embedding residual over the fitting sample.
    """

    center: np.ndarray
    L: np.ndarray
    M: np.ndarray
    K: np.ndarray
    a: np.ndarray
    radius: float
    fit_residual_median: float | None = None

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float)
        L = _as_matrix(self.L, "L")
        M = _as_matrix(self.M, "M")
        K = _as_matrix(self.K, "K")
        a = np.asarray(self.a, dtype=float)
        D = center.shape[0]
        d = L.shape[1]
        if L.shape[0] != D or M.shape != (D, D - d):
            raise ValueError("frame shapes inconsistent with center dimension")
        if K.shape != (D - d, d * d) or a.shape != (D - d,):
            raise ValueError("K/a shapes inconsistent with frame dimensions")
        if not self.radius > 0.0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if np.max(np.abs(L.T @ L - np.eye(d))) > FRAME_TOL:
            raise ValueError("tangent frame is not orthonormal")
        if np.max(np.abs(M.T @ M - np.eye(D - d))) > FRAME_TOL:
            raise ValueError("normal frame is not orthonormal")
        if np.max(np.abs(L.T @ M)) > FRAME_TOL:
            raise ValueError("tangent and normal frames are not orthogonal")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def ambient_dim(self) -> int:
        return self.center.shape[0]

    @property
    def dim(self) -> int:
        return self.L.shape[1]


def _canonical_signs(frame: np.ndarray) -> np.ndarray:
    """Flip eigenvector columns so the largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(frame), axis=0)
    signs = np.sign(frame[idx, np.arange(frame.shape[1])])
    signs[signs == 0.0] = 1.0
    return frame * signs


def _kron_rows(Xi: np.ndarray) -> np.ndarray:
    """Row-wise Kronecker squares: row i is Xi[i] kron Xi[i]."""
    m, d = Xi.shape
    return (Xi[:, :, None] * Xi[:, None, :]).reshape(m, d * d)


def _symmetrize_rows(K: np.ndarray, d: int) -> np.ndarray:
    blocks = K.reshape(K.shape[0], d, d)
    sym = 0.5 * (blocks + np.transpose(blocks, (0, 2, 1)))
    return sym.reshape(K.shape[0], d * d)


def fit_local_quadratic(
    points: np.ndarray,
    c: np.ndarray,
    r: float,
    d: int,
) -> QuadraticChart:
    """Fit a quadratic chart of dimension d around center c.

    Points within Euclidean distance r of c enter the fit.  The frames
    come from the eigendecomposition of the local second-moment matrix
    about c (eigenvalues descending: top d directions are tangent, the
    rest normal), and the normal coordinates are regressed on a design
    of ones and all d*d quadratic monomials of the tangent coordinates.
    A small ridge keeps the duplicated mixed monomials from making the
    normal equations singular.

    Raises
    ------
    ValueError
        If fewer than 1 + d + d*d points lie within the ball.
    """
    pts = _as_matrix(points, "points")
    c = np.asarray(c, dtype=float)
    D = c.shape[0]
    if pts.shape[1] != D:
        raise ValueError(f"points have dimension {pts.shape[1]}, center {D}")
    if not 0 < d < D:
        raise ValueError(f"chart dimension must satisfy 0 < d < {D}, got {d}")
    diffs = pts - c
    inside = np.linalg.norm(diffs, axis=1) <= r
    local = diffs[inside]
    needed = 1 + d + d * d
    if local.shape[0] < needed:
        raise ValueError(
            f"need at least {needed} points within radius {r}, "
            f"found {local.shape[0]}"
        )
    second_moment = (local.T @ local) / local.shape[0]
    eigvals, eigvecs = np.linalg.eigh(second_moment)
    order = np.argsort(eigvals)[::-1]
    frames = _canonical_signs(eigvecs[:, order])
    L = frames[:, :d]
    M = frames[:, d:]

    tang = local @ L
    norm = local @ M
    design = np.hstack([np.ones((local.shape[0], 1)), _kron_rows(tang)])
    gram = design.T @ design + RIDGE * np.eye(design.shape[1])
    coeffs = np.linalg.solve(gram, design.T @ norm)
    a = coeffs[0]
    K = _symmetrize_rows(2.0 * coeffs[1:].T, d)

    chart = QuadraticChart(center=c, L=L, M=M, K=K, a=a, radius=float(r))
    res = residual(chart, pts[inside])
    return QuadraticChart(
        center=c,
        L=L,
        M=M,
        K=K,
        a=a,
        radius=float(r),
        fit_residual_median=float(np.median(res)),
    )


def embed(chart: QuadraticChart, xi: np.ndarray) -> np.ndarray:
    """Map chart coordinates to ambient space.

    Computes ``0.5 M K (xi kron xi) + L xi + c + M a``.  Accepts a
    single d-vector or an (m, d) batch.
    """
    xi = np.asarray(xi, dtype=float)
    single = xi.ndim == 1
    Xi = np.atleast_2d(xi)
    z = _kron_rows(Xi)
    out = (
        chart.center
        + Xi @ chart.L.T
        + (0.5 * (z @ chart.K.T) + chart.a) @ chart.M.T
    )
    return out[0] if single else out


def project_to_chart(chart: QuadraticChart, x: np.ndarray) -> np.ndarray:
    """Tangential read-off L'(x - c); single vector or batch."""
    x = np.asarray(x, dtype=float)
    return (x - chart.center) @ chart.L


def residual(chart: QuadraticChart, x: np.ndarray) -> np.ndarray | float:
    """Distance from x to its quadratic reconstruction through the chart."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    rec = embed(chart, project_to_chart(chart, X))
    dist = np.linalg.norm(X - rec, axis=1)
    return float(dist[0]) if single else dist


def assign_membership(
    charts: list[QuadraticChart],
    points: np.ndarray,
) -> np.ndarray:
    """Label each point with the chart of smallest embedding residual.

    Ties go to the lowest chart id, which keeps builds deterministic.
    """
    if not charts:
        raise ValueError("at least one chart is required")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    all_res = np.stack([residual(ch, pts) for ch in charts])
    return np.argmin(all_res, axis=0)


def transition_map(
    chart_a: QuadraticChart,
    chart_b: QuadraticChart,
    xi: np.ndarray,
) -> np.ndarray:
    """Re-express coordinates of chart_a in chart_b.

    Computes ``L_b' (0.5 M_a K_a (xi kron xi) + L_a xi + c_a - c_b)``;
    the constant normal offset of chart_a is deliberately not part of
    the composed point.  Accepts a single vector or a batch.
    """
    xi = np.asarray(xi, dtype=float)
    single = xi.ndim == 1
    Xi = np.atleast_2d(xi)
    z = _kron_rows(Xi)
    ambient = (
        0.5 * (z @ chart_a.K.T) @ chart_a.M.T
        + Xi @ chart_a.L.T
        + (chart_a.center - chart_b.center)
    )
    out = ambient @ chart_b.L
    return out[0] if single else out


def differential(chart: QuadraticChart, xi: np.ndarray) -> np.ndarray:
    """Jacobian of the embedding at xi, one ambient column per coordinate."""
    xi = np.asarray(xi, dtype=float)
    d = chart.dim
    S = np.empty((d * d, d))
    for j in range(d):
        block = np.zeros((d, d))
        block[:, j] = xi
        block[j, :] += xi
        S[:, j] = block.ravel()
    return chart.L + 0.5 * chart.M @ (chart.K @ S)


def cross_chart_transport(
    chart_a: QuadraticChart,
    xi_a: np.ndarray,
    chart_b: QuadraticChart,
    xi_b: np.ndarray,
    tau: np.ndarray,
) -> np.ndarray:
    """Carry a coordinate tangent vector from one chart to another.

    Pushes tau forward through the differential of chart_a at xi_a and
    pulls it back through the least-squares inverse of the differential
    of chart_b at xi_b.
    """
    J_a = differential(chart_a, np.asarray(xi_a, dtype=float))
    J_b = differential(chart_b, np.asarray(xi_b, dtype=float))
    ambient = J_a @ np.asarray(tau, dtype=float)
    out, _, rank, _ = np.linalg.lstsq(J_b, ambient, rcond=None)
    if rank < chart_b.dim:
        raise ValueError(
            f"target differential is rank deficient ({rank} < {chart_b.dim})"
        )
    return out


@dataclass(frozen=True)
class AmbientQuadraticSeparator:
    """Quadratic decision surface in ambient coordinates.

    In the translated form the value at x is
    ``(x - shift)' A (x - shift) + c0``.  When the quadratic part could
    not absorb the linear term (flag ``extended``), shift is zero and
    the value carries an explicit linear term ``b_lin' x``.
    """

    A: np.ndarray
    shift: np.ndarray
    c0: float
    extended: bool = False
    b_lin: np.ndarray | None = None

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        if np.max(np.abs(A - A.T)) > 1e-12 * max(1.0, float(np.abs(A).max())):
            raise ValueError("separator matrix must be symmetric")
        object.__setattr__(self, "A", 0.5 * (A + A.T))
        object.__setattr__(
            self, "shift", np.asarray(self.shift, dtype=float)
        )
        object.__setattr__(self, "c0", float(self.c0))
        if self.b_lin is not None:
            object.__setattr__(
                self, "b_lin", np.asarray(self.b_lin, dtype=float)
            )
        if self.extended and self.b_lin is None:
            raise ValueError("extended separator requires b_lin")


def separator_value(
    sep: AmbientQuadraticSeparator, x: np.ndarray
) -> np.ndarray | float:
    """Evaluate the separator at a point or batch of points."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x) - sep.shift
    vals = np.einsum("ij,jk,ik->i", X, sep.A, X) + sep.c0
    if sep.extended:
        vals = vals + X @ sep.b_lin
    return float(vals[0]) if single else vals


def svm_to_quadratic(model: SvmModel) -> AmbientQuadraticSeparator:
    """Rewrite a quadratic-kernel SVM decision function as a separator.

    The kernel expansion is exactly ``x' A_raw x + b_lin' x + bias``
    with ``A_raw = sum_i coef_i x_i x_i'`` and ``b_lin = sum_i coef_i
    x_i``.  Completing the square moves the linear term into a
    translation whenever A_raw allows it; the translation solve uses a
    spectral pseudo-inverse, and if a residual linear term survives
    (b_lin outside the range of a singular A_raw) the separator keeps
    the explicit linear term and sets the ``extended`` flag.
    """
    V = model.support_vectors
    coef = model.coef
    A = (V * coef[:, None]).T @ V
    A = 0.5 * (A + A.T)
    b_lin = coef @ V

    eigvals, eigvecs = np.linalg.eigh(A)
    # Reference scale for rank decisions: an exactly cancelling expansion
    # leaves only summation noise in A, so the spectral magnitude alone
    # cannot tell signal from roundoff.
    ref = float((np.abs(coef) * np.einsum("ij,ij->i", V, V)).sum())
    scale = max(float(np.abs(eigvals).max()), ref, 1e-300)
    keep = np.abs(eigvals) > LINEAR_KILL_CUTOFF * scale
    inv_vals = np.zeros_like(eigvals)
    inv_vals[keep] = 1.0 / eigvals[keep]
    shift = -0.5 * (eigvecs * inv_vals) @ (eigvecs.T @ b_lin)
    leftover = b_lin + 2.0 * (A @ shift)
    if np.max(np.abs(leftover)) <= 1e-10 * max(1.0, np.abs(b_lin).max()):
        c0 = model.bias - float(shift @ A @ shift)
        return AmbientQuadraticSeparator(A=A, shift=shift, c0=c0)
    return AmbientQuadraticSeparator(
        A=A,
        shift=np.zeros_like(b_lin),
        c0=model.bias,
        extended=True,
        b_lin=b_lin,
    )


@dataclass(frozen=True)
class BoundaryQuartic:
    """Chart-coordinate form of a separator composed with the embedding.

    With z = xi kron xi the value is
    ``z'A4 z + xi'A3 z + A2a.z + xi'A2b xi + A1.xi + a0``.
    """

    A4: np.ndarray
    A3: np.ndarray
    A2a: np.ndarray
    A2b: np.ndarray
    A1: np.ndarray
    a0: float


def precompute_quartic(
    sep: AmbientQuadraticSeparator, chart: QuadraticChart
) -> BoundaryQuartic:
    """Compose a separator with a chart embedding into quartic blocks."""
    A = sep.A
    L, M, K = chart.L, chart.M, chart.K
    cbar = chart.center + chart.M @ chart.a - sep.shift
    MK = M @ K
    a0 = sep.c0 + float(cbar @ A @ cbar)
    A1 = 2.0 * L.T @ (A @ cbar)
    A2a = MK.T @ (A @ cbar)
    A2b = L.T @ A @ L
    A3 = L.T @ A @ MK
    A4 = 0.25 * MK.T @ A @ MK
    if sep.extended:
        a0 += float(sep.b_lin @ (chart.center + chart.M @ chart.a))
        A1 = A1 + L.T @ sep.b_lin
        A2a = A2a + 0.5 * MK.T @ sep.b_lin
    return BoundaryQuartic(A4=A4, A3=A3, A2a=A2a, A2b=A2b, A1=A1, a0=float(a0))


def eval_quartic(q: BoundaryQuartic, xi: np.ndarray) -> np.ndarray | float:
    """Evaluate the quartic at chart coordinates (single or batch)."""
    xi = np.asarray(xi, dtype=float)
    single = xi.ndim == 1
    Xi = np.atleast_2d(xi)
    z = _kron_rows(Xi)
    vals = (
        np.einsum("ij,jk,ik->i", z, q.A4, z)
        + np.einsum("ij,jk,ik->i", Xi, q.A3, z)
        + z @ q.A2a
        + np.einsum("ij,jk,ik->i", Xi, q.A2b, Xi)
        + Xi @ q.A1
        + q.a0
    )
    return float(vals[0]) if single else vals


def needs_transition(q: BoundaryQuartic, xi: np.ndarray) -> bool:
    """A point leaves its chart when the boundary quartic turns positive."""
    return bool(eval_quartic(q, xi) > 0.0)


@dataclass(frozen=True)
class Atlas:
    """A finished atlas: charts, their boundaries, and adjacency.

    ``adjacency`` holds undirected chart-id pairs (i, j) with i < j.
    ``extended`` records which chart boundaries kept an explicit linear
    term during separator translation.
    """

    ambient_dim: int
    dim: int
    charts: list[QuadraticChart]
    quartics: list[BoundaryQuartic]
    adjacency: list[tuple[int, int]]
    extended: list[bool] = field(default_factory=list)

    def __post_init__(self):
        if len(self.charts) != len(self.quartics):
            raise ValueError("one quartic per chart is required")
        if not self.extended:
            object.__setattr__(
                self, "extended", [False] * len(self.charts)
            )

    def neighbors(self, chart_id: ChartId) -> list[int]:
        out = set()
        for i, j in self.adjacency:
            if i == chart_id:
                out.add(j)
            elif j == chart_id:
                out.add(i)
        return sorted(out)


def represent_point(atlas: Atlas, x: np.ndarray) -> RepresentativePoint:
    """Represent an ambient point inside the atlas.

    Among the charts whose interior accepts the point's coordinate
    read-off (negative boundary quartic), the one reconstructing the
    point with the smallest residual wins.  The interior test alone
    would not do: a distant point can read off deep inside an unrelated
    chart, because the quartic only sees the read-off, not how badly
    the chart reconstructs the point.  Near chart seams the winner can
    differ from the plain smallest-residual chart, whose learned
    boundary may exclude the point while a neighbor still contains it.

    Raises
    ------
    NoAdmissibleChartError
        If no chart interior accepts the read-off.
    """
    x = np.asarray(x, dtype=float)
    best_id = -1
    best_res = np.inf
    best_xi = None
    closest = np.inf
    for cid, (chart, quartic) in enumerate(zip(atlas.charts, atlas.quartics)):
        xi = project_to_chart(chart, x)
        val = float(eval_quartic(quartic, xi))
        closest = min(closest, val)
        if val >= 0.0:
            continue
        res = residual(chart, x)
        if res < best_res and res <= 0.25 * chart.radius:
            best_id, best_res, best_xi = cid, res, xi
    if best_id < 0:
        raise NoAdmissibleChartError(
            "no chart interior accepts the point with a faithful "
            f"reconstruction; best quartic value over all charts is "
            f"{closest:.3e}"
        )
    return RepresentativePoint(chart=best_id, xi=best_xi)


# Coordinate-norm backstop for learned boundaries, as a multiple of the
# chart radius. A trained separator is only reliable near its training
# support; far outside it can stay negative along narrow channels, which
# would let a stepping point leave the fitted domain without ever
# triggering a transition. Past this multiple the chart is pure
# extrapolation, so the domain itself takes over as the boundary.
DOMAIN_GUARD = 1.5


class AtlasChartProvider:
    """Chart-provider view of an Atlas for quasi-Euclidean stepping.

    Transition targets are chosen among adjacency neighbors of the
    current chart (all other charts when the chart has none) by minimal
    quartic value at the transitioned coordinates; ties break toward
    the lowest chart id. A transition also fires when the coordinate
    norm exceeds ``DOMAIN_GUARD`` times the chart radius, even if the
    learned quartic still reads negative there.
    """

    def __init__(self, atlas: Atlas):
        self._atlas = atlas

    @property
    def atlas(self) -> Atlas:
        return self._atlas

    @property
    def dim(self) -> int:
        return self._atlas.dim

    def needs_transition(self, xi: np.ndarray, chart: ChartId = 0) -> bool:
        if needs_transition(self._atlas.quartics[chart], xi):
            return True
        guard = DOMAIN_GUARD * self._atlas.charts[chart].radius
        return bool(np.linalg.norm(xi) > guard)

    def transition(self, point: RepresentativePoint) -> RepresentativePoint:
        atlas = self._atlas
        src = point.chart
        candidates = atlas.neighbors(src)
        if not candidates:
            candidates = [i for i in range(len(atlas.charts)) if i != src]
        if not candidates:
            raise NoAdmissibleChartError("atlas has no other chart to enter")
        best_id = -1
        best_val = np.inf
        best_xi = None
        for cid in candidates:
            xi_new = transition_map(
                atlas.charts[src], atlas.charts[cid], point.xi
            )
            val = eval_quartic(atlas.quartics[cid], xi_new)
            if val < best_val:
                best_id, best_val, best_xi = cid, val, xi_new
        if best_val >= 0.0:
            raise NoAdmissibleChartError(
                f"no candidate chart accepts the point left by chart {src}; "
                f"best quartic value {best_val:.3e} on chart {best_id}"
            )
        return RepresentativePoint(chart=best_id, xi=best_xi)

    def differential(self, xi: np.ndarray, chart: ChartId = 0) -> np.ndarray:
        return differential(self._atlas.charts[chart], xi)
