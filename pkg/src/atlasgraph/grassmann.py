"""The Grassmann manifold Gr(n, k) as an atlas graph.

Points are k-dimensional subspaces of R^n, represented either by n-by-k
full-rank (usually orthonormal) matrices or by coordinates A in an
ad-hoc chart: a row-index set paired with an orthogonal frame Q. The
module provides chart identification and ingestion, orthogonal frame
construction, the chart transition that recenters a streaming estimate,
the streaming Frechet-mean update, geodesic-power-distribution sampling,
the Jordan-angle distance, and closed-form baseline estimators
(gifee / manopt log-exp-retraction pipelines, Oja-rule online PCA).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import RepresentativePoint

CONDITION_GUARD = 1e12
ORTHOGONALITY_TOL = 1e-10


class RankDeficiencyError(ValueError):
    """Raised when an input matrix does not have full column rank."""


class OutsideChartError(RuntimeError):
    """Raised when a sample cannot be represented in the current chart.

    Streaming callers are expected to skip the offending sample and
    report it rather than abort the run.
    """


# --------------------------------------------------------------------------
# chart bookkeeping
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EhresmannIndices:
    """A strictly increasing tuple of 1-based row indices selecting a chart.

    Attributes
    ----------
    indices : tuple of int
        (i_1, ..., i_k) with 1 <= i_1 < ... < i_k; the upper bound n is
        validated wherever the ambient dimension is known.
    """

    indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        object.__setattr__(self, "indices", idx)
        if len(idx) == 0:
            raise ValueError("index set must be nonempty")
        if idx[0] < 1 or any(a >= b for a, b in zip(idx, idx[1:])):
            raise ValueError(f"indices must be strictly increasing and 1-based, got {idx}")

    def zero_based(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=int) - 1

    def complement_zero_based(self, n: int) -> np.ndarray:
        mask = np.ones(n, dtype=bool)
        mask[self.zero_based()] = False
        return np.nonzero(mask)[0]


def permutation_matrix(indices: EhresmannIndices, n: int) -> np.ndarray:
    """Permutation P placing a stacked (I_k / A) block at the chart's rows.

    Column j of P is the standard basis vector of the row that block row j
    should occupy: rows 1..k go to the chart indices, the remaining rows to
    the complement in increasing order.
    """
    idx0 = indices.zero_based()
    comp0 = indices.complement_zero_based(n)
    perm = np.concatenate([idx0, comp0])
    out = np.zeros((n, n))
    out[perm, np.arange(n)] = 1.0
    return out


@dataclass(frozen=True, eq=False)
class GrassmannChart:
    """An ad-hoc Grassmann chart: index set plus orthogonal frame.

    Attributes
    ----------
    n, k : int
        Ambient and subspace dimensions.
    indices : EhresmannIndices
        Rows carrying the identity block of the chart center.
    Q : numpy.ndarray
        n-by-n orthogonal frame; the identity for a plain chart.
    """

    n: int
    k: int
    indices: EhresmannIndices
    Q: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Q", np.asarray(self.Q, dtype=float))
        if len(self.indices.indices) != self.k:
            raise ValueError("index count must equal k")
        if self.indices.indices[-1] > self.n:
            raise ValueError("chart index exceeds ambient dimension")
        residual = np.linalg.norm(self.Q.T @ self.Q - np.eye(self.n))
        if residual >= ORTHOGONALITY_TOL:
            raise ValueError(f"frame orthogonality residual {residual:.3e} too large")

    @classmethod
    def plain(cls, n: int, k: int, indices: EhresmannIndices) -> "GrassmannChart":
        return cls(n=n, k=k, indices=indices, Q=np.eye(n))

    def frame_columns(self) -> tuple[np.ndarray, np.ndarray]:
        """(Q_U, Q_L): frame columns at the chart indices and the rest."""
        idx0 = self.indices.zero_based()
        comp0 = self.indices.complement_zero_based(self.n)
        return self.Q[:, idx0], self.Q[:, comp0]


@dataclass(eq=False)
class FrechetState:
    """Mutable-by-replacement state of the streaming Frechet estimator.

    Attributes
    ----------
    chart : GrassmannChart
        Current ad-hoc chart.
    A : numpy.ndarray
        (n-k)-by-k chart coordinates of the running mean.
    Q_U, Q_L : numpy.ndarray
        Cached frame columns at the chart indices and the complement.
    count : int
        Number of samples absorbed so far.
    """

    chart: GrassmannChart
    A: np.ndarray
    Q_U: np.ndarray
    Q_L: np.ndarray
    count: int


@dataclass(frozen=True, eq=False)
class GpdParams:
    """Parameters of the geodesic power distribution.

    Draws contract a uniform subspace toward ``center`` along the geodesic
    by the factor (delta / delta_max)^p, where delta is the draw's distance
    to the center.
    """

    center: np.ndarray
    p: float
    delta_max: float | None = None

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float)
        object.__setattr__(self, "center", center)
        if self.p <= 1:
            raise ValueError(f"power must exceed 1, got {self.p}")
        n, k = center.shape
        gram_residual = np.linalg.norm(center.T @ center - np.eye(k))
        if gram_residual > 1e-8:
            raise ValueError("center columns must be orthonormal")
        if self.delta_max is None:
            object.__setattr__(
                self, "delta_max", (math.pi / 2.0) * math.sqrt(max(k, n - k))
            )


# --------------------------------------------------------------------------
# small dense linear algebra helpers
# --------------------------------------------------------------------------


def sqrtm_spd(S: np.ndarray) -> np.ndarray:
    """Symmetric square root of a symmetric positive definite matrix."""
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError("input must be square")
    if np.linalg.norm(S - S.T) > 1e-10 * max(1.0, np.linalg.norm(S)):
        raise ValueError("input must be symmetric")
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    if w[0] <= 0:
        raise ValueError(f"input must be positive definite, min eigenvalue {w[0]:.3e}")
    R = (V * np.sqrt(w)) @ V.T
    return 0.5 * (R + R.T)


def _qr_canonical(M: np.ndarray) -> np.ndarray:
    """Thin QR orthonormalization with a deterministic column-sign convention."""
    Q, R = np.linalg.qr(M)
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return Q * signs


def _gram_inv_sqrt(X: np.ndarray) -> np.ndarray:
    gram = X.T @ X
    w, V = np.linalg.eigh(0.5 * (gram + gram.T))
    if w[0] <= w[-1] * 1e-24 or w[0] <= 0:
        raise RankDeficiencyError("matrix does not have full column rank")
    return (V / np.sqrt(w)) @ V.T


def _check_condition(M: np.ndarray, what: str) -> None:
    s = np.linalg.svd(M, compute_uv=False)
    if s[-1] <= 0 or s[0] / s[-1] > CONDITION_GUARD:
        raise OutsideChartError(
            f"{what} is numerically singular (condition beyond {CONDITION_GUARD:.0e})"
        )


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------


def sample_uniform_grassmann(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform (rotation-invariant) draw from Gr(n, k) as an orthonormal basis."""
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < n, got k={k}, n={n}")
    return _qr_canonical(rng.standard_normal((n, k)))


def sample_gpd(params: GpdParams, rng: np.random.Generator) -> np.ndarray:
    """Draw from the geodesic power distribution around ``params.center``.

    A uniform draw Y at geodesic distance delta from the center X is pulled
    back along the connecting geodesic to parameter (delta/delta_max)^p.
    Draws whose connecting geodesic is undefined (a principal angle at
    pi/2) are rejected and redrawn.
    """
    X = params.center
    n, k = X.shape
    for _ in range(100):
        Y = sample_uniform_grassmann(n, k, rng)
        try:
            U, sigma, V = gifee_log(X, Y)
        except (RankDeficiencyError, OutsideChartError):
            continue
        theta = np.arctan(sigma)
        delta = float(np.linalg.norm(theta))
        scale = (delta / params.delta_max) ** params.p
        return _geodesic_point(X, U, theta, V, scale)
    raise RuntimeError("geodesic power sampling failed 100 times in a row")


# --------------------------------------------------------------------------
# distance
# --------------------------------------------------------------------------


def grassmann_distance(X: np.ndarray, Y: np.ndarray) -> float:
    """Geodesic distance: root-sum-square of the Jordan angles.

    The angles are arccos of the singular values of the normalized cross
    Gram matrix; singular values are clamped to [0, 1] against roundoff.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    M = _gram_inv_sqrt(X) @ (X.T @ Y) @ _gram_inv_sqrt(Y)
    sigma = np.clip(np.linalg.svd(M, compute_uv=False), 0.0, 1.0)
    return float(np.sqrt(np.sum(np.arccos(sigma) ** 2)))


# --------------------------------------------------------------------------
# chart identification, ingestion, frames
# --------------------------------------------------------------------------


def identify_chart(X: np.ndarray) -> EhresmannIndices:
    """Chart whose center is nearest the span of X.

    Returns the (1-based, increasing) indices of the k largest diagonal
    entries of the orthogonal projector onto the column span.
    """
    X = np.asarray(X, dtype=float)
    n, k = X.shape
    gram = X.T @ X
    w = np.linalg.eigvalsh(0.5 * (gram + gram.T))
    if w[0] <= w[-1] * 1e-24 or w[0] <= 0:
        raise RankDeficiencyError("cannot identify a chart for a rank-deficient matrix")
    diag = np.einsum("ij,ji->i", X, np.linalg.solve(gram, X.T))
    order = np.argsort(-diag, kind="stable")[:k]
    return EhresmannIndices(tuple(sorted(int(i) + 1 for i in order)))


def ingest_matrix(X: np.ndarray, idx: EhresmannIndices) -> np.ndarray:
    """Chart coordinates of span(X) in the plain chart at ``idx``.

    Splits X into the k rows at the chart indices (X_U) and the rest (X_L)
    and returns A = X_L X_U^{-1}, so that stacking (I_k / A) at the chart's
    row positions spans the same subspace.
    """
    X = np.asarray(X, dtype=float)
    n, k = X.shape
    idx0 = idx.zero_based()
    if idx.indices[-1] > n:
        raise ValueError("chart index exceeds ambient dimension")
    X_U = X[idx0, :]
    X_L = X[idx.complement_zero_based(n), :]
    try:
        _check_condition(X_U, "chart-row block")
    except OutsideChartError as exc:
        raise OutsideChartError(f"matrix not representable in chart {idx.indices}: {exc}") from exc
    return np.linalg.solve(X_U.T, X_L.T).T


def qa_from_a(A: np.ndarray) -> np.ndarray:
    """Orthogonal frame sending the plain chart center to coordinates A.

    Built from the blocks (I_k + A^T A)^{-1/2} and (I_{n-k} + A A^T)^{-1/2};
    the first k columns of the result span the stacked (I_k / A) block.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    m, k = A.shape
    U, sigma, Vt = np.linalg.svd(A, full_matrices=False)
    shrink = 1.0 / np.sqrt(1.0 + sigma**2) - 1.0
    S1 = np.eye(k) + (Vt.T * shrink) @ Vt
    S2 = np.eye(m) + (U * shrink) @ U.T
    top = np.hstack([S1, -A.T @ S2])
    bottom = np.hstack([A @ S1, S2])
    return np.vstack([top, bottom])


def frame_matrix(chart: GrassmannChart, A: np.ndarray) -> np.ndarray:
    """Full-rank n-by-k representative of chart coordinates A."""
    Q_U, Q_L = chart.frame_columns()
    return Q_U + Q_L @ np.asarray(A, dtype=float)


def chart_point_projector(chart: GrassmannChart, A: np.ndarray) -> np.ndarray:
    """Orthogonal projector onto the subspace with coordinates A."""
    basis = _qr_canonical(frame_matrix(chart, A))
    return basis @ basis.T


# --------------------------------------------------------------------------
# streaming Frechet estimation
# --------------------------------------------------------------------------


def frechet_init(X: np.ndarray) -> FrechetState:
    """Start the streaming estimator at the first sample.

    The first sample is ingested into its own plain chart with the sample
    counter at 1; a transition fires immediately in the measure-zero case
    where ingestion lands on the chart boundary.
    """
    X = np.asarray(X, dtype=float)
    n, k = X.shape
    idx = identify_chart(X)
    A = ingest_matrix(X, idx)
    chart = GrassmannChart.plain(n, k, idx)
    Q_U, Q_L = chart.frame_columns()
    state = FrechetState(chart=chart, A=A, Q_U=Q_U, Q_L=Q_L, count=1)
    if np.any(np.abs(state.A) >= 1.0):
        state = atlas_transition(state)
    return state


def reconstruct_projector(state: FrechetState) -> np.ndarray:
    """Projector onto the subspace the state currently represents."""
    return chart_point_projector(state.chart, state.A)


def atlas_transition(state: FrechetState) -> FrechetState:
    """Recenter the estimate in a fresh chart, leaving the point unchanged.

    The represented subspace is rebuilt as a full-rank matrix, ingested
    into the chart identified for it, and the new frame is the orthogonal
    block construction conjugated by the new indices' permutation, so the
    new coordinates are exactly zero.
    """
    n, k = state.chart.n, state.chart.k
    Y = frame_matrix(state.chart, state.A)
    new_idx = identify_chart(Y)
    A_tilde = ingest_matrix(Y, new_idx)
    P = permutation_matrix(new_idx, n)
    Q_new = P @ qa_from_a(A_tilde) @ P.T
    residual = np.linalg.norm(Q_new.T @ Q_new - np.eye(n))
    if residual > 1e-8:
        Q_new = _qr_canonical(Q_new)
    chart = GrassmannChart(n=n, k=k, indices=new_idx, Q=Q_new)
    Q_U, Q_L = chart.frame_columns()
    return FrechetState(
        chart=chart,
        A=np.zeros((n - k, k)),
        Q_U=Q_U,
        Q_L=Q_L,
        count=state.count,
    )


def frechet_stream_step(state: FrechetState, X: np.ndarray) -> FrechetState:
    """Absorb one sample into the running mean with an in-chart update.

    The sample is expressed in the current chart, the coordinates take a
    running-mean step toward it, and a transition recenters the chart
    whenever any coordinate reaches magnitude 1.

    Raises
    ------
    OutsideChartError
        If the sample cannot be expressed in the current chart (its
        chart-row block is numerically singular). Callers following the
        skip-and-report policy catch this and drop the sample.
    """
    X = np.asarray(X, dtype=float)
    upper = state.Q_U.T @ X
    try:
        _check_condition(upper, "sample's chart-row block")
    except OutsideChartError as exc:
        raise OutsideChartError(f"sample outside current chart: {exc}") from exc
    A_sample = np.linalg.solve(upper.T, (state.Q_L.T @ X).T).T
    count = state.count + 1
    A_new = state.A + (A_sample - state.A) / count
    out = FrechetState(
        chart=state.chart, A=A_new, Q_U=state.Q_U, Q_L=state.Q_L, count=count
    )
    if np.any(np.abs(out.A) >= 1.0):
        out = atlas_transition(out)
    return out


# --------------------------------------------------------------------------
# closed-form baselines
# --------------------------------------------------------------------------


def gifee_log(X: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Factored Riemannian logarithm at span(X) toward span(Y).

    Returns the thin SVD (U, sigma, V) of the matrix
    (I - X (X^T X)^{-1} X^T) Y (X^T Y)^{-1}; the Jordan angles of the pair
    are arctan(sigma).
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    cross = X.T @ Y
    _check_condition(cross, "cross Gram matrix")
    target = np.linalg.solve(cross.T, Y.T).T
    gram = X.T @ X
    projected = target - X @ np.linalg.solve(gram, X.T @ target)
    U, sigma, Vt = np.linalg.svd(projected, full_matrices=False)
    return U, sigma, Vt.T


def _geodesic_point(
    X: np.ndarray, U: np.ndarray, theta: np.ndarray, V: np.ndarray, scale: float
) -> np.ndarray:
    """Point at parameter ``scale`` along the geodesic with angles theta."""
    ang = scale * theta
    return _qr_canonical(X @ (V * np.cos(ang)) + U * np.sin(ang))


def gifee_exp(
    X: np.ndarray,
    logparts: tuple[np.ndarray, np.ndarray, np.ndarray],
    i: int,
) -> np.ndarray:
    """Geodesic step of length 1/i toward the target of a factored log."""
    if i < 1:
        raise ValueError(f"step divisor must be at least 1, got {i}")
    U, sigma, V = logparts
    theta = np.arctan(sigma)
    return _geodesic_point(X, U, theta, V, 1.0 / i)


def manopt_log(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Dense Riemannian logarithm: U arctan(sigma) V^T of the log factors."""
    U, sigma, V = gifee_log(X, Y)
    return (U * np.arctan(sigma)) @ V.T


def manopt_exp(X: np.ndarray, L: np.ndarray, i: int) -> np.ndarray:
    """Exponential of the tangent L/i via its thin SVD."""
    if i < 1:
        raise ValueError(f"step divisor must be at least 1, got {i}")
    U, sigma, Vt = np.linalg.svd(np.asarray(L, dtype=float) / i, full_matrices=False)
    M = X @ (Vt.T * np.cos(sigma)) @ Vt + (U * np.sin(sigma)) @ Vt
    return _qr_canonical(M)


def manopt_ret(X: np.ndarray, L: np.ndarray, i: int) -> np.ndarray:
    """Projective retraction of L/i: orthonormalized polar factor of X + L/i."""
    if i < 1:
        raise ValueError(f"step divisor must be at least 1, got {i}")
    U, _, Vt = np.linalg.svd(X + np.asarray(L, dtype=float) / i, full_matrices=False)
    return _qr_canonical(U @ Vt)


def opca_step(W: np.ndarray, x: np.ndarray, eta: float) -> np.ndarray:
    """One Oja-rule update of an online principal subspace estimate."""
    if eta <= 0:
        raise ValueError(f"learning rate must be positive, got {eta}")
    W = np.asarray(W, dtype=float)
    x = np.asarray(x, dtype=float)
    updated = W + eta * np.outer(x, x @ W)
    Q, R = np.linalg.qr(updated)
    diag = np.abs(np.diag(R))
    if np.any(diag <= 1e-14 * max(1.0, diag.max())):
        raise RankDeficiencyError("subspace estimate collapsed during the update")
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return Q * signs


# --------------------------------------------------------------------------
# chart provider adapter and retraction-order probes
# --------------------------------------------------------------------------


class GrassmannAtlasProvider:
    """Adapts ad-hoc Grassmann charts to the core stepping protocol.

    Chart ids index a registry that grows as transitions mint new charts;
    coordinates are (n-k)-by-k matrices flattened row-major.
    """

    def __init__(self, chart: GrassmannChart):
        self._charts: list[GrassmannChart] = [chart]
        self.n = chart.n
        self.k = chart.k

    @property
    def dim(self) -> int:
        return (self.n - self.k) * self.k

    def chart(self, chart_id: int) -> GrassmannChart:
        return self._charts[chart_id]

    def coords_matrix(self, xi: np.ndarray) -> np.ndarray:
        return np.asarray(xi, dtype=float).reshape(self.n - self.k, self.k)

    def needs_transition(self, xi: np.ndarray, chart: int = 0) -> bool:
        return bool(np.any(np.abs(np.asarray(xi)) >= 1.0))

    def transition(self, point: RepresentativePoint) -> RepresentativePoint:
        src = self._charts[point.chart]
        A = self.coords_matrix(point.xi)
        Q_U, Q_L = src.frame_columns()
        state = FrechetState(chart=src, A=A, Q_U=Q_U, Q_L=Q_L, count=1)
        moved = atlas_transition(state)
        self._charts.append(moved.chart)
        return RepresentativePoint(len(self._charts) - 1, moved.A.ravel())

    def differential(self, xi: np.ndarray, chart: int = 0) -> np.ndarray:
        """Differential of the projector embedding with respect to vec(A)."""
        src = self._charts[chart]
        A = self.coords_matrix(xi)
        F = frame_matrix(src, A)
        _, Q_L = src.frame_columns()
        pinv = np.linalg.solve(F.T @ F, F.T)
        proj = F @ pinv
        complement = np.eye(self.n) - proj
        cols = []
        for flat_index in range(self.dim):
            dA = np.zeros((self.n - self.k, self.k))
            dA[np.unravel_index(flat_index, dA.shape)] = 1.0
            dF = Q_L @ dA
            half = complement @ dF @ pinv
            dP = half + half.T
            cols.append(dP.ravel())
        return np.column_stack(cols)


def retraction_order_probe(
    n: int,
    k: int,
    scales: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    """Errors of in-chart stepping against the exact exponential, plus slope.

    One random base point and unit chart tangent are probed at each scale:
    the quasi-Euclidean step result and the exact geodesic with the matched
    initial velocity are compared as projectors. Returns the per-scale
    errors and the least-squares slope of log error versus log scale.
    """
    from .core import RepresentativeTangent, quasi_euclidean_step

    scales = np.asarray(scales, dtype=float)
    X = sample_uniform_grassmann(n, k, rng)
    idx = identify_chart(X)
    A = ingest_matrix(X, idx)
    chart = GrassmannChart.plain(n, k, idx)
    tau = rng.standard_normal((n - k, k))
    tau /= np.linalg.norm(tau)

    F = frame_matrix(chart, A)
    X0, R0 = np.linalg.qr(F)
    signs = np.sign(np.diag(R0))
    signs[signs == 0] = 1.0
    X0 = X0 * signs
    R0 = R0 * signs[:, None]
    _, Q_L = chart.frame_columns()
    velocity = np.linalg.solve(R0.T, (Q_L @ tau).T).T
    velocity = velocity - X0 @ (X0.T @ velocity)

    errors = np.empty_like(scales)
    for pos, s in enumerate(scales):
        provider = GrassmannAtlasProvider(chart)
        start = RepresentativePoint(0, A.ravel())
        step = RepresentativeTangent(0, s * tau.ravel())
        landed = quasi_euclidean_step(start, step, provider)
        stepped_proj = chart_point_projector(
            provider.chart(landed.chart), provider.coords_matrix(landed.xi)
        )
        exact = manopt_exp(X0, s * velocity, 1)
        errors[pos] = np.linalg.norm(stepped_proj - exact @ exact.T)
    slope, _ = np.polyfit(np.log(scales), np.log(errors), 1)
    return errors, float(slope)
