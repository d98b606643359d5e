"""Geodesic machinery on learned atlases.

The straight segment between two coordinate points, pushed through a
quadratic chart embedding, has a closed-form arc length because the
integrand is the square root of a quadratic in the line parameter.
That closed form (the naive approximate distance) weights the edges of
a dense graph built from grid points inside every chart boundary;
shortest paths on the graph approximate geodesic distances, and
walking a shortest path while accumulating coordinate increments
yields an approximate Riemannian logarithm.
"""

from __future__ import annotations

import heapq
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra as _csgraph_dijkstra
from scipy.spatial import cKDTree

from .charts import (
    Atlas,
    QuadraticChart,
    embed,
    eval_quartic,
    project_to_chart,
    transition_map,
    differential,
)
from .core import RepresentativePoint, RepresentativeTangent

_DEGENERACY_RTOL = 1e-12


class DisconnectedGraphError(RuntimeError):
    """No path exists between the requested vertices."""


class InvalidRepresentationError(RuntimeError):
    """A cross-chart re-representation left the target chart's radius."""


@dataclass(frozen=True)
class NaiveDistanceTerms:
    """Ingredients of the closed-form naive distance.

    The squared speed along the segment is
    ``lam + sum_j ((1 - t) kappa0[j] + t kappa1[j])^2``; mu terms are
    the pairwise inner products of the kappa vectors.  For the generic
    case (positive quadratic coefficient S) the reduced quantities are
    a = (mu01 - mu00)/S, b = (lam + mu00)/S and c = sqrt(S); they are
    NaN when S vanishes and the integral is handled separately.
    """

    lam: float
    kappa0: np.ndarray
    kappa1: np.ndarray
    mu00: float
    mu01: float
    mu11: float
    a: float
    b: float
    c: float


def _kappa_pair(
    chart: QuadraticChart, Xi0: np.ndarray, Xi1: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    codim = chart.K.shape[0]
    d = chart.dim
    Kt = chart.K.reshape(codim, d, d)
    dXi = Xi1 - Xi0
    kap0 = np.einsum("mi,jik,mk->mj", dXi, Kt, Xi0)
    kap1 = np.einsum("mi,jik,mk->mj", dXi, Kt, Xi1)
    return dXi, kap0, kap1


def naive_distance_terms(
    chart: QuadraticChart, xi0: np.ndarray, xi1: np.ndarray
) -> NaiveDistanceTerms:
    """Assemble the closed-form ingredients for one coordinate pair."""
    Xi0 = np.atleast_2d(np.asarray(xi0, dtype=float))
    Xi1 = np.atleast_2d(np.asarray(xi1, dtype=float))
    dXi, kap0, kap1 = _kappa_pair(chart, Xi0, Xi1)
    lam = float(dXi[0] @ dXi[0])
    k0, k1 = kap0[0], kap1[0]
    mu00 = float(k0 @ k0)
    mu01 = float(k0 @ k1)
    mu11 = float(k1 @ k1)
    S = mu00 + mu11 - 2.0 * mu01
    if S > _DEGENERACY_RTOL * max(1.0, lam, mu00, mu11):
        a = (mu01 - mu00) / S
        b = (lam + mu00) / S
        c = float(np.sqrt(S))
    else:
        a = b = c = float("nan")
    return NaiveDistanceTerms(
        lam=lam,
        kappa0=k0,
        kappa1=k1,
        mu00=mu00,
        mu01=mu01,
        mu11=mu11,
        a=a,
        b=b,
        c=c,
    )


def distance_from_terms(terms: NaiveDistanceTerms) -> float:
    """Closed-form arc length from precomputed terms.

    Three regimes: a genuinely quadratic squared speed integrates to an
    arsinh expression, a linear one to a difference of 3/2 powers, and
    a constant one to its square root.
    """
    lam, mu00, mu01, mu11 = terms.lam, terms.mu00, terms.mu01, terms.mu11
    S = mu00 + mu11 - 2.0 * mu01
    ell = mu01 - mu00
    scale = max(1.0, lam, mu00, mu11)
    if S > _DEGENERACY_RTOL * scale:
        a = ell / S
        C = max((lam + mu00) / S - a * a, 0.0)
        return float(np.sqrt(S)) * (_asinh_primitive(1.0 + a, C) - _asinh_primitive(a, C))
    if abs(ell) > _DEGENERACY_RTOL * scale:
        hi = lam + 2.0 * mu01 - mu00
        lo = lam + mu00
        return (hi ** 1.5 - lo ** 1.5) / (3.0 * ell)
    return float(np.sqrt(lam + mu00))


def _asinh_primitive(u: float, C: float) -> float:
    if C > 0.0:
        return 0.5 * (u * np.sqrt(u * u + C) + C * np.arcsinh(u / np.sqrt(C)))
    return 0.5 * u * abs(u)


def naive_distance(
    chart: QuadraticChart, xi0: np.ndarray, xi1: np.ndarray
) -> float:
    """Arc length of the embedded straight segment from xi0 to xi1."""
    return distance_from_terms(naive_distance_terms(chart, xi0, xi1))


def _naive_distance_batch(
    chart: QuadraticChart, Xi0: np.ndarray, Xi1: np.ndarray
) -> np.ndarray:
    """Vectorized closed form for many same-chart pairs."""
    dXi, kap0, kap1 = _kappa_pair(chart, Xi0, Xi1)
    lam = np.einsum("mi,mi->m", dXi, dXi)
    mu00 = np.einsum("mj,mj->m", kap0, kap0)
    mu01 = np.einsum("mj,mj->m", kap0, kap1)
    mu11 = np.einsum("mj,mj->m", kap1, kap1)
    S = mu00 + mu11 - 2.0 * mu01
    ell = mu01 - mu00
    scale = np.maximum(np.maximum(1.0, lam), np.maximum(mu00, mu11))
    quad = S > _DEGENERACY_RTOL * scale
    lin = ~quad & (np.abs(ell) > _DEGENERACY_RTOL * scale)

    out = np.sqrt(lam + mu00)
    S_safe = np.where(quad, S, 1.0)
    a = ell / S_safe
    C = np.maximum((lam + mu00) / S_safe - a * a, 0.0)
    C_safe = np.where(C > 0.0, C, 1.0)

    def primitive(u):
        full = 0.5 * (
            u * np.sqrt(u * u + C_safe)
            + C_safe * np.arcsinh(u / np.sqrt(C_safe))
        )
        return np.where(C > 0.0, full, 0.5 * u * np.abs(u))

    quad_val = np.sqrt(S_safe) * (primitive(1.0 + a) - primitive(a))
    out = np.where(quad, quad_val, out)

    ell_safe = np.where(lin, ell, 1.0)
    hi = np.maximum(lam + 2.0 * mu01 - mu00, 0.0)
    lin_val = ((hi ** 1.5) - (lam + mu00) ** 1.5) / (3.0 * ell_safe)
    return np.where(lin, lin_val, out)


@dataclass
class DenseGraph:
    """Grid-sampled graph over an atlas.

    ``points`` are ambient vertex positions, ``chart_ids``/``coords``
    the chart each vertex was generated in and its exact grid
    coordinates there.  Edges are undirected, stored once with
    ``edge_u < edge_v``.
    """

    points: np.ndarray
    chart_ids: np.ndarray
    coords: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    edge_w: np.ndarray
    _adjacency: list | None = field(default=None, repr=False, compare=False)

    @property
    def n_vertices(self) -> int:
        return self.points.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edge_u.shape[0]

    def adjacency(self) -> list:
        """Per-vertex neighbor/weight arrays, built once on demand."""
        if self._adjacency is None:
            n = self.n_vertices
            deg = np.zeros(n, dtype=int)
            np.add.at(deg, self.edge_u, 1)
            np.add.at(deg, self.edge_v, 1)
            nbr = [np.empty(k, dtype=int) for k in deg]
            wgt = [np.empty(k) for k in deg]
            fill = np.zeros(n, dtype=int)
            for u, v, w in zip(self.edge_u, self.edge_v, self.edge_w):
                nbr[u][fill[u]] = v
                wgt[u][fill[u]] = w
                fill[u] += 1
                nbr[v][fill[v]] = u
                wgt[v][fill[v]] = w
                fill[v] += 1
            self._adjacency = list(zip(nbr, wgt))
        return self._adjacency


def _chart_grid(radius: float, delta: float, d: int) -> np.ndarray:
    n_max = int(np.ceil(radius / delta)) + 1
    vals = np.arange(-n_max, n_max + 1) * delta
    vals = vals[np.abs(vals) < radius]
    axes = np.meshgrid(*([vals] * d), indexing="ij")
    return np.stack([ax.ravel() for ax in axes], axis=1)


def build_dense_graph(atlas: Atlas, delta: float, eps: float) -> DenseGraph:
    """Sample every chart on a delta-grid and connect nearby vertices.

    Grid points must satisfy their chart's quartic strictly below zero.
    Edges join vertex pairs closer than eps in ambient space; same-chart
    edges are weighted by the naive distance, cross-chart edges by the
    naive distance after re-expressing the endpoint from the higher
    chart id in the lower chart id (falling back to plain Euclidean
    length when the re-expressed point is not accepted there).
    """
    if delta <= 0.0 or eps <= 0.0:
        raise ValueError("delta and eps must be positive")
    all_points, all_chart_ids, all_coords = [], [], []
    for cid, (chart, quartic) in enumerate(zip(atlas.charts, atlas.quartics)):
        grid = _chart_grid(chart.radius, delta, chart.dim)
        if grid.shape[0] == 0:
            continue
        keep = eval_quartic(quartic, grid) < 0.0
        grid = grid[keep]
        if grid.shape[0] == 0:
            continue
        all_points.append(embed(chart, grid))
        all_chart_ids.append(np.full(grid.shape[0], cid, dtype=int))
        all_coords.append(grid)
    if not all_points:
        raise ValueError(
            "dense graph is empty: no grid point passed its chart boundary"
        )
    points = np.vstack(all_points)
    chart_ids = np.concatenate(all_chart_ids)
    coords = np.vstack(all_coords)

    tree = cKDTree(points)
    pairs = tree.query_pairs(r=eps, output_type="ndarray")
    if pairs.size:
        dist = np.linalg.norm(points[pairs[:, 0]] - points[pairs[:, 1]], axis=1)
        strict = dist < eps
        pairs = pairs[strict]
        dist = dist[strict]
    else:
        pairs = pairs.reshape(0, 2)
        dist = np.empty(0)

    order = np.lexsort((pairs[:, 1], pairs[:, 0])) if pairs.size else []
    pairs = pairs[order] if pairs.size else pairs
    dist = dist[order] if pairs.size else dist
    weights = np.empty(pairs.shape[0])

    cu = chart_ids[pairs[:, 0]] if pairs.size else np.empty(0, dtype=int)
    cv = chart_ids[pairs[:, 1]] if pairs.size else np.empty(0, dtype=int)
    lo = np.minimum(cu, cv)
    hi = np.maximum(cu, cv)
    for key in np.unique(np.stack([lo, hi], axis=1), axis=0) if pairs.size else []:
        low_id, high_id = int(key[0]), int(key[1])
        sel = (lo == low_id) & (hi == high_id)
        idx_u = pairs[sel, 0]
        idx_v = pairs[sel, 1]
        chart_low = atlas.charts[low_id]
        if low_id == high_id:
            weights[sel] = _naive_distance_batch(
                chart_low, coords[idx_u], coords[idx_v]
            )
            continue
        chart_high = atlas.charts[high_id]
        u_is_low = chart_ids[idx_u] == low_id
        xi_low = np.where(u_is_low[:, None], coords[idx_u], coords[idx_v])
        xi_high = np.where(u_is_low[:, None], coords[idx_v], coords[idx_u])
        moved = transition_map(chart_high, chart_low, xi_high)
        accepted = eval_quartic(atlas.quartics[low_id], moved) < 0.0
        w = np.where(
            accepted,
            _naive_distance_batch(chart_low, xi_low, moved),
            dist[sel],
        )
        weights[sel] = w
    return DenseGraph(
        points=points,
        chart_ids=chart_ids,
        coords=coords,
        edge_u=pairs[:, 0].astype(int) if pairs.size else np.empty(0, dtype=int),
        edge_v=pairs[:, 1].astype(int) if pairs.size else np.empty(0, dtype=int),
        edge_w=weights,
    )


def nearest_vertex(graph: DenseGraph, x: np.ndarray) -> int:
    """Index of the vertex closest to x; ties go to the lowest index."""
    if graph.n_vertices == 0:
        raise ValueError("graph has no vertices")
    d2 = np.einsum(
        "ij,ij->i", graph.points - x, graph.points - x
    )
    return int(np.argmin(d2))


def shortest_path(
    graph: DenseGraph, u: int, v: int
) -> tuple[list[int], float]:
    """Dijkstra path from u to v and its total weight.

    Returns an empty path with weight zero when u == v; otherwise the
    path includes both endpoints.  Vertices popped at equal distance
    resolve by index, so results are deterministic.
    """
    n = graph.n_vertices
    if not (0 <= u < n and 0 <= v < n):
        raise ValueError(f"vertices must be in [0, {n}), got {u}, {v}")
    if u == v:
        return [], 0.0
    adj = graph.adjacency()
    dist = {u: 0.0}
    parent: dict[int, int] = {}
    done = set()
    heap: list[tuple[float, int]] = [(0.0, u)]
    while heap:
        d_cur, cur = heapq.heappop(heap)
        if cur in done:
            continue
        done.add(cur)
        if cur == v:
            break
        nbrs, wgts = adj[cur]
        for nxt, w in zip(nbrs, wgts):
            nxt = int(nxt)
            cand = d_cur + float(w)
            if cand < dist.get(nxt, np.inf):
                dist[nxt] = cand
                parent[nxt] = cur
                heapq.heappush(heap, (cand, nxt))
    if v not in done:
        raise DisconnectedGraphError(f"no path from vertex {u} to {v}")
    path = [v]
    while path[-1] != u:
        path.append(parent[path[-1]])
    path.reverse()
    return path, dist[v]


def approx_riemannian_log(
    graph: DenseGraph,
    atlas: Atlas,
    p: RepresentativePoint,
    q: RepresentativePoint,
) -> RepresentativeTangent:
    """Approximate logarithm of q at p via the dense graph.

    The shortest path between the graph vertices nearest to the two
    embeddings is walked from the q side; coordinate increments
    accumulate into a running tangent vector that is re-expressed
    through chart differentials at every chart change.  On a flat
    single-chart atlas the increments telescope and the result is
    exactly q.xi - p.xi.
    """
    chart_p = atlas.charts[p.chart]
    chart_q = atlas.charts[q.chart]
    xp = embed(chart_p, p.xi)
    xq = embed(chart_q, q.xi)
    u = nearest_vertex(graph, xp)
    v = nearest_vertex(graph, xq)
    if u == v:
        walk = [v]
    else:
        path, _ = shortest_path(graph, u, v)
        walk = path[::-1]

    cur_chart = q.chart
    cur_xi = np.asarray(q.xi, dtype=float)
    acc = np.zeros(atlas.dim)
    for w in walk:
        w_chart = int(graph.chart_ids[w])
        w_xi = graph.coords[w]
        if w_chart == cur_chart:
            acc = acc + (cur_xi - w_xi)
            cur_xi = w_xi
        else:
            moved = transition_map(
                atlas.charts[cur_chart], atlas.charts[w_chart], cur_xi
            )
            _check_inside(atlas.charts[w_chart], moved, w_chart)
            acc = atlas.charts[w_chart].L.T @ (
                differential(atlas.charts[cur_chart], cur_xi) @ acc
            )
            acc = acc + (moved - w_xi)
            cur_xi = w_xi
            cur_chart = w_chart
    if cur_chart != p.chart:
        moved = transition_map(
            atlas.charts[cur_chart], atlas.charts[p.chart], cur_xi
        )
        _check_inside(chart_p, moved, p.chart)
        acc = chart_p.L.T @ (
            differential(atlas.charts[cur_chart], cur_xi) @ acc
        )
        cur_xi = moved
    acc = acc + (cur_xi - np.asarray(p.xi, dtype=float))
    return RepresentativeTangent(chart=p.chart, tau=acc)


def _check_inside(chart: QuadraticChart, xi: np.ndarray, cid: int) -> None:
    norm = float(np.linalg.norm(xi))
    if norm > chart.radius:
        raise InvalidRepresentationError(
            f"re-represented point lies outside chart {cid} "
            f"(|xi| = {norm:.3f} > radius {chart.radius:.3f})"
        )


class GraphLogSolver:
    """Batched dense-graph logarithms from cached shortest-path trees.

    ``approx_riemannian_log`` runs one Dijkstra search per query, which
    is far too slow for a flow that needs logarithms of dozens of
    samples at every Euler step.  This solver roots a single
    shortest-path tree at the vertex nearest the evaluation point and
    collapses each vertex's root-ward walk into an affine map, so the
    accumulation rule of ``approx_riemannian_log`` (coordinate
    increments, re-expressed through chart differentials at every chart
    change) is applied to a whole batch of targets with two small
    matrix products each.  Trees are cached by root vertex; consecutive
    evaluation points inside the same vertex cell reuse the tree.

    Each target is anchored at its own nearest vertex and read off in
    that vertex's chart, so targets the atlas cannot interiorly
    represent still get logarithms as long as a nearby vertex
    reconstructs them.  Targets whose tree walk is invalid (vertex
    unreached within the distance limit, or a re-expression leaving the
    receiving chart) are flagged rather than raising, since a flow can
    simply ignore the affected samples.
    """

    def __init__(self, graph: DenseGraph, atlas: Atlas, cache_size: int = 8):
        if graph.n_vertices == 0:
            raise ValueError("graph has no vertices")
        self.graph = graph
        self.atlas = atlas
        self.cache_size = cache_size
        n = graph.n_vertices
        rows = np.concatenate([graph.edge_u, graph.edge_v])
        cols = np.concatenate([graph.edge_v, graph.edge_u])
        data = np.concatenate([graph.edge_w, graph.edge_w])
        self._csr = csr_matrix((data, (rows, cols)), shape=(n, n))
        self._kdtree = cKDTree(graph.points)
        self._trees: OrderedDict[tuple[int, float], tuple] = OrderedDict()

    def _tree(self, root: int, limit: float):
        key = (root, float(limit))
        hit = self._trees.get(key)
        if hit is not None:
            self._trees.move_to_end(key)
            return hit
        graph, atlas = self.graph, self.atlas
        n = graph.n_vertices
        d = atlas.dim
        dist, pred = _csgraph_dijkstra(
            self._csr, indices=root, return_predecessors=True, limit=limit
        )
        mats = np.zeros((n, d, d))
        offs = np.zeros((n, d))
        ok = np.zeros(n, dtype=bool)
        mats[root] = np.eye(d)
        ok[root] = True
        reached = np.flatnonzero(np.isfinite(dist))
        order = reached[np.argsort(dist[reached], kind="stable")]
        for w in order:
            if w == root:
                continue
            pw = int(pred[w])
            if pw < 0 or not ok[pw]:
                continue
            cw = int(graph.chart_ids[w])
            cpw = int(graph.chart_ids[pw])
            if cw == cpw:
                mats[w] = mats[pw]
                offs[w] = mats[pw] @ (graph.coords[w] - graph.coords[pw]) + offs[pw]
            else:
                chart_w = atlas.charts[cw]
                chart_pw = atlas.charts[cpw]
                moved = transition_map(chart_w, chart_pw, graph.coords[w])
                if float(np.linalg.norm(moved)) > chart_pw.radius:
                    continue
                hop = chart_pw.L.T @ differential(chart_w, graph.coords[w])
                mats[w] = mats[pw] @ hop
                offs[w] = mats[pw] @ (moved - graph.coords[pw]) + offs[pw]
            ok[w] = True
        entry = (dist, mats, offs, ok)
        self._trees[key] = entry
        if len(self._trees) > self.cache_size:
            self._trees.popitem(last=False)
        return entry

    def logs_at(
        self,
        p: RepresentativePoint,
        targets: np.ndarray,
        limit: float,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Approximate logarithms of ambient targets at p.

        Parameters
        ----------
        p : RepresentativePoint
            Evaluation point.
        targets : numpy.ndarray
            Ambient points, one per row.
        limit : float
            Graph-distance horizon of the shortest-path tree; targets
            beyond it come back flagged invalid.

        Returns
        -------
        (logs, ok) : tuple of numpy.ndarray
            ``logs[i]`` is the tangent at p toward ``targets[i]`` in
            p's chart; ``ok[i]`` says whether the walk was valid.
        """
        atlas, graph = self.atlas, self.graph
        targets = np.atleast_2d(np.asarray(targets, dtype=float))
        m = targets.shape[0]
        logs = np.zeros((m, atlas.dim))
        valid = np.zeros(m, dtype=bool)
        chart_p = atlas.charts[p.chart]
        root = int(self._kdtree.query(embed(chart_p, p.xi))[1])
        dist, mats, offs, ok = self._tree(root, limit)

        croot = int(graph.chart_ids[root])
        xi_root = graph.coords[root]
        if croot == p.chart:
            head = None
            tail = xi_root - p.xi
        else:
            moved = transition_map(atlas.charts[croot], chart_p, xi_root)
            if float(np.linalg.norm(moved)) > chart_p.radius:
                return logs, valid
            head = chart_p.L.T @ differential(atlas.charts[croot], xi_root)
            tail = moved - p.xi

        _, anchors = self._kdtree.query(targets)
        anchors = np.atleast_1d(anchors).astype(int)
        for i in range(m):
            v = int(anchors[i])
            if not ok[v]:
                continue
            chart_v = atlas.charts[int(graph.chart_ids[v])]
            s0 = project_to_chart(chart_v, targets[i]) - graph.coords[v]
            if float(np.linalg.norm(s0 + graph.coords[v])) > 2.0 * chart_v.radius:
                continue
            acc = mats[v] @ s0 + offs[v]
            logs[i] = (head @ acc if head is not None else acc) + tail
            valid[i] = True
        return logs, valid
