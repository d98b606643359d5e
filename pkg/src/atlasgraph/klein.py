"""High-contrast 3x3 image patches on a Klein-bottle family.

A patch is the evaluation of ``cos(phi) s^2 + sin(phi) s`` with
``s = x cos(theta) + y sin(theta)`` on the nine grid points
(x, y) in {-1, 0, 1}^2, giving a two-parameter family of 9-vectors
that realizes a Klein bottle: (theta, phi) and (theta + pi, 2 pi - phi)
produce the same patch.  The module generates patches, labels them
convex/concave/neither, assembles the chart atlas over an 8x8 grid of
parameter-cell centers, samples points from a finished atlas, builds
the dense reference graph used to score approximate distances, and
recovers (theta, phi) from a raw patch by inverting the quadratic.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import charts as charts_mod
from .charts import Atlas, QuadraticChart, eval_quartic, fit_local_quadratic
from .svm import svm_decision, train_boundary_svm

GRID_X = np.array([-1.0, -1.0, -1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0])
GRID_Y = np.array([-1.0, 0.0, 1.0, -1.0, 0.0, 1.0, -1.0, 0.0, 1.0])

DEFAULT_RADIUS = 1.1


class PatchLabel(enum.Enum):
    CONVEX = "convex"
    CONCAVE = "concave"
    NEITHER = "neither"


@dataclass(frozen=True)
class PatchParams:
    """Angles of one patch: theta in [0, pi], phi in [0, 2 pi]."""

    theta: float
    phi: float

    def __post_init__(self):
        if not (0.0 <= self.theta <= math.pi + 1e-12):
            raise ValueError(f"theta out of range [0, pi]: {self.theta}")
        if not (0.0 <= self.phi <= 2.0 * math.pi + 1e-12):
            raise ValueError(f"phi out of range [0, 2 pi]: {self.phi}")


def patch(theta: float, phi: float) -> np.ndarray:
    """Evaluate the patch function on the fixed 3x3 grid.

    Ordering is row-major with x outer: (-1,-1), (-1,0), ..., (1,1).
    """
    s = GRID_X * math.cos(theta) + GRID_Y * math.sin(theta)
    return math.cos(phi) * s * s + math.sin(phi) * s


def patch_batch(thetas: np.ndarray, phis: np.ndarray) -> np.ndarray:
    """Vectorized patch generation, one row per (theta, phi) pair."""
    thetas = np.asarray(thetas, dtype=float)
    phis = np.asarray(phis, dtype=float)
    s = np.cos(thetas)[:, None] * GRID_X + np.sin(thetas)[:, None] * GRID_Y
    return np.cos(phis)[:, None] * s * s + np.sin(phis)[:, None] * s


def label(theta: float, phi: float) -> PatchLabel:
    """Convexity class of a patch.

    The patch is monotone along its preferred direction unless
    tan(phi) lies in (-2, 2); within that band the sign of cos(phi)
    separates convex from concave, and everything else (including
    cos(phi) == 0) is neither.
    """
    c = math.cos(phi)
    in_band = abs(math.sin(phi)) < 2.0 * abs(c)
    if in_band and c > 0.0:
        return PatchLabel.CONVEX
    if in_band and c < 0.0:
        return PatchLabel.CONCAVE
    return PatchLabel.NEITHER


def chart_centers(grid: int = 8) -> list[PatchParams]:
    """Cell centers of a grid x grid partition of the parameter rectangle."""
    if grid < 1:
        raise ValueError(f"grid must be at least 1, got {grid}")
    step_t = math.pi / grid
    step_p = 2.0 * math.pi / grid
    return [
        PatchParams((i + 0.5) * step_t, (j + 0.5) * step_p)
        for i in range(grid)
        for j in range(grid)
    ]


def _sample_near_center(
    center_point: np.ndarray,
    r: float,
    quota: int,
    rng: np.random.Generator,
    chart_id: int,
) -> np.ndarray:
    """Accept uniform parameter draws whose patches land in the r-ball."""
    budget = 10_000 * quota
    batch = max(2_000, 4 * quota)
    drawn = 0
    kept: list[np.ndarray] = []
    total = 0
    while total < quota:
        if drawn >= budget:
            raise RuntimeError(
                f"chart {chart_id}: accepted only {total} of {quota} "
                f"samples after {drawn} parameter draws"
            )
        th = rng.uniform(0.0, math.pi, size=batch)
        ph = rng.uniform(0.0, 2.0 * math.pi, size=batch)
        pts = patch_batch(th, ph)
        keep = np.linalg.norm(pts - center_point, axis=1) <= r
        kept.append(pts[keep])
        total += int(keep.sum())
        drawn += batch
    return np.vstack(kept)[:quota]


@dataclass
class KleinBuild:
    """Atlas plus the intermediate products of its construction.

    Kept for inspection: the ambient separators behind each boundary
    quartic, the pooled training sample, and its membership labels.
    """

    atlas: Atlas
    separators: list
    pooled: np.ndarray
    labels: np.ndarray


def build_klein_atlas(
    samples_per_chart: int,
    r: float = DEFAULT_RADIUS,
    svm_C: float = 10.0,
    rng: np.random.Generator | None = None,
    grid: int = 8,
) -> Atlas:
    """Fit the chart atlas of the patch family.

    Per chart center: rejection-sample patches until samples_per_chart
    land within ambient radius r of the center patch, then fit a
    two-dimensional quadratic chart to them.  Membership labels over
    the pooled sample drive the per-chart boundary SVMs (negatives are
    other charts' points within 2 r of the center) and the adjacency:
    for every pooled point the two smallest-residual charts form an
    adjacent pair.
    """
    return build_klein_atlas_detailed(
        samples_per_chart, r=r, svm_C=svm_C, rng=rng, grid=grid
    ).atlas


def build_klein_atlas_detailed(
    samples_per_chart: int,
    r: float = DEFAULT_RADIUS,
    svm_C: float = 10.0,
    rng: np.random.Generator | None = None,
    grid: int = 8,
) -> KleinBuild:
    """Atlas construction that also returns its intermediate products."""
    if samples_per_chart < 7:
        raise ValueError("samples_per_chart must be at least 7 to fit d=2")
    if rng is None:
        rng = np.random.default_rng()
    centers = chart_centers(grid)
    center_points = patch_batch(
        np.array([c.theta for c in centers]), np.array([c.phi for c in centers])
    )
    children = rng.spawn(len(centers))

    chart_list: list[QuadraticChart] = []
    samples: list[np.ndarray] = []
    for cid, child in enumerate(children):
        sample = _sample_near_center(
            center_points[cid], r, samples_per_chart, child, cid
        )
        samples.append(sample)
        # The fit origin is the in-ball mean, which keeps the frame an
        # honest local PCA; the prescribed center only selects the ball.
        chart_list.append(fit_local_quadratic(sample, sample.mean(axis=0), r, 2))

    pooled = np.vstack(samples)
    all_res = np.stack([charts_mod.residual(ch, pooled) for ch in chart_list])
    labels = np.argmin(all_res, axis=0)

    top2 = np.argpartition(all_res, 1, axis=0)[:2]
    pair_lo = np.minimum(top2[0], top2[1])
    pair_hi = np.maximum(top2[0], top2[1])
    adjacency = sorted(
        {(int(i), int(j)) for i, j in zip(pair_lo, pair_hi) if i != j}
    )

    quartics = []
    extended = []
    separators = []
    for cid, chart in enumerate(chart_list):
        members = pooled[labels == cid]
        near = (
            np.linalg.norm(pooled - chart.center, axis=1) < 2.0 * r
        ) & (labels != cid)
        outsiders = pooled[near]
        if members.shape[0] == 0 or outsiders.shape[0] == 0:
            raise RuntimeError(
                f"chart {cid}: boundary training needs both classes, got "
                f"{members.shape[0]} member and {outsiders.shape[0]} "
                f"nearby points"
            )
        # Positive class is the outside so the decision (and hence the
        # quartic) is negative where the chart owns the point.
        model = train_boundary_svm(outsiders, members, C=svm_C)
        recall = float(np.mean(svm_decision(model, members) < 0.0))
        if recall < 0.5:
            # Heavily outnumbered member sets can make the plain
            # optimum abandon the chart region entirely, leaving a
            # boundary with no inside, so no point could ever be
            # sampled from or stay in the chart.  Retrain with the
            # member box scaled up by the class ratio.
            boost = svm_C * outsiders.shape[0] / members.shape[0]
            model = train_boundary_svm(
                outsiders, members, C=svm_C, neg_box=boost
            )
        sep = charts_mod.svm_to_quadratic(model)
        separators.append(sep)
        quartics.append(charts_mod.precompute_quartic(sep, chart))
        extended.append(sep.extended)

    atlas = Atlas(
        ambient_dim=pooled.shape[1],
        dim=2,
        charts=chart_list,
        quartics=quartics,
        adjacency=adjacency,
        extended=extended,
    )
    return KleinBuild(
        atlas=atlas, separators=separators, pooled=pooled, labels=labels
    )


def sample_atlas_points(
    atlas: Atlas,
    per_chart: int,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw chart points uniformly inside each chart's boundary.

    Coordinates are sampled uniformly on the chart's coordinate disk
    and kept when the boundary quartic is negative.  Returns parallel
    arrays (chart_ids, coords, ambient points).
    """
    if rng is None:
        rng = np.random.default_rng()
    children = rng.spawn(len(atlas.charts))
    ids, coords, points = [], [], []
    for cid, (chart, quartic, child) in enumerate(
        zip(atlas.charts, atlas.quartics, children)
    ):
        want = per_chart
        got: list[np.ndarray] = []
        total = 0
        drawn = 0
        budget = 100 * per_chart
        batch = max(256, 4 * per_chart)
        while total < want:
            if drawn >= budget:
                raise RuntimeError(
                    f"chart {cid}: boundary accepts fewer than 1% of "
                    f"coordinate draws ({total} of {want} after {drawn})"
                )
            u = child.uniform(0.0, 1.0, size=batch)
            ang = child.uniform(0.0, 2.0 * math.pi, size=batch)
            rad = chart.radius * np.sqrt(u)
            xi = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
            keep = eval_quartic(quartic, xi) < 0.0
            got.append(xi[keep])
            total += int(keep.sum())
            drawn += batch
        xi = np.vstack(got)[:want]
        ids.append(np.full(want, cid, dtype=int))
        coords.append(xi)
        points.append(charts_mod.embed(chart, xi))
    return np.concatenate(ids), np.vstack(coords), np.vstack(points)


@dataclass
class KnnGraph:
    """Symmetric k-nearest-neighbor graph over reference patches."""

    params: np.ndarray
    points: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    edge_w: np.ndarray


def reference_geodesic_graph(
    n_grid: int = 200, k_neighbors: int = 5
) -> KnnGraph:
    """Dense parameter-grid graph for ground-truth style distances.

    The grid covers [0, pi) x [0, 2 pi) without endpoints (the closing
    edges duplicate patches already present).  Five nearest neighbors
    per vertex, symmetrized, with ambient Euclidean weights.
    """
    thetas = np.linspace(0.0, math.pi, n_grid, endpoint=False)
    phis = np.linspace(0.0, 2.0 * math.pi, n_grid, endpoint=False)
    tg, pg = np.meshgrid(thetas, phis, indexing="ij")
    params = np.stack([tg.ravel(), pg.ravel()], axis=1)
    points = patch_batch(params[:, 0], params[:, 1])
    m = points.shape[0]
    k = min(k_neighbors, m - 1)
    tree = cKDTree(points)
    dists, idx = tree.query(points, k=k + 1)
    src = np.repeat(np.arange(m), k)
    dst = idx[:, 1:].ravel()
    wts = dists[:, 1:].ravel()
    lo = np.minimum(src, dst)
    hi = np.maximum(src, dst)
    key = lo.astype(np.int64) * m + hi
    _, first = np.unique(key, return_index=True)
    return KnnGraph(
        params=params,
        points=points,
        edge_u=lo[first],
        edge_v=hi[first],
        edge_w=wts[first],
    )


def patch_params_readout(x: np.ndarray) -> PatchParams:
    """Recover (theta, phi) from a raw patch vector.

    Least squares fits the five quadratic monomial coefficients of the
    patch over its grid; the quadratic part factors as cos(phi) w w'
    and the linear part as sin(phi) w for the direction
    w = (cos theta, sin theta).  The direction comes from whichever
    part carries more energy and is canonicalized to sin(theta) >= 0.
    """
    x = np.asarray(x, dtype=float)
    design = np.stack(
        [GRID_X * GRID_X, GRID_Y * GRID_Y, GRID_X * GRID_Y, GRID_X, GRID_Y],
        axis=1,
    )
    coef, _, _, _ = np.linalg.lstsq(design, x, rcond=None)
    S = np.array([[coef[0], 0.5 * coef[2]], [0.5 * coef[2], coef[1]]])
    b = coef[3:5]
    eigvals, eigvecs = np.linalg.eigh(S)
    lead = int(np.argmax(np.abs(eigvals)))
    if abs(eigvals[lead]) >= np.linalg.norm(b):
        w = eigvecs[:, lead]
    else:
        w = b / np.linalg.norm(b)
    if w[1] < 0.0 or (w[1] == 0.0 and w[0] < 0.0):
        w = -w
    theta = math.atan2(w[1], w[0])
    amp_quad = float(w @ S @ w)
    amp_lin = float(b @ w)
    phi = math.atan2(amp_lin, amp_quad) % (2.0 * math.pi)
    return PatchParams(theta=theta, phi=phi)
