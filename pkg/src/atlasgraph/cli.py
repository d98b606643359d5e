"""Command line benchmarks and experiment drivers.

Each subcommand reproduces one experiment family at desk scale:
streaming Frechet means on Grassmann manifolds, retraction order
probes, image-patch atlas construction and sampling, dense-graph
construction, distance-distortion studies, and principal-boundary
runs.  Every output is a pure function of the flags (including
--seed); timing columns are the only exception and are excluded from
that guarantee.  Files are written atomically through the serializers.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.sparse.csgraph import dijkstra as _csgraph_dijkstra
from scipy.spatial import cKDTree
from scipy.stats import spearmanr

from . import grassmann, klein
from .charts import represent_point
from .distances import build_dense_graph
from .grassmann import (
    GpdParams,
    OutsideChartError,
    frame_matrix,
    frechet_init,
    frechet_stream_step,
    gifee_exp,
    gifee_log,
    grassmann_distance,
    manopt_exp,
    manopt_log,
    manopt_ret,
    opca_step,
    retraction_order_probe,
    sample_gpd,
    sample_uniform_grassmann,
)
from .klein import PatchLabel, patch, patch_params_readout
from .rpb import RpbConfig, classify_by_boundary, run_rpb
from .serialize import (
    load_atlas,
    load_graph,
    save_atlas,
    save_graph,
    write_csv,
)

FRECHET_METHODS = ("atlas", "gifee", "manopt-exp", "manopt-ret", "opca")
DESK_SCALE_MAX_N = 500
RPB_TRAIN_PER_CLASS = 2000
RPB_HELDOUT = 1000


# --------------------------------------------------------------------------
# grassmann-frechet
# --------------------------------------------------------------------------


def _gpd_stream(
    n: int, k: int, p: float, samples: int, seed: int
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Seeded center and GPD sample stream shared by all methods."""
    rng = np.random.default_rng(seed)
    center = sample_uniform_grassmann(n, k, rng)
    params = GpdParams(center=center, p=p)
    draws = [sample_gpd(params, rng) for _ in range(samples)]
    return center, draws


def run_frechet_method(
    method: str, n: int, k: int, p: float, samples: int, seed: int
) -> tuple[list[tuple], int]:
    """Stream one estimator over the seeded GPD draws.

    Returns the per-iteration rows (iter, error, cum_time_ns,
    n_transitions) and the number of skipped samples.  Only the
    estimator update is timed; sampling and error evaluation are not.
    Samples an estimator cannot ingest (chart-singular for the atlas
    method, angle pi/2 cross blocks for the geodesic baselines) are
    skipped and reported, matching a streaming setting where a bad
    sample is dropped.
    """
    center, draws = _gpd_stream(n, k, p, samples, seed)
    vec_rng = np.random.default_rng([seed, 1])
    rows: list[tuple] = []
    cum = 0
    transitions = 0
    skipped = 0
    state = None
    estimate = None

    for i, X in enumerate(draws, start=1):
        if method == "opca":
            g = vec_rng.standard_normal(k)
        try:
            if i == 1:
                start = time.perf_counter_ns()
                if method == "atlas":
                    state = frechet_init(X)
                else:
                    estimate = X
                cum += time.perf_counter_ns() - start
            elif method == "atlas":
                before = state.chart
                start = time.perf_counter_ns()
                state = frechet_stream_step(state, X)
                cum += time.perf_counter_ns() - start
                if state.chart is not before:
                    transitions += 1
            elif method == "gifee":
                start = time.perf_counter_ns()
                estimate = gifee_exp(estimate, gifee_log(estimate, X), i)
                cum += time.perf_counter_ns() - start
            elif method == "manopt-exp":
                start = time.perf_counter_ns()
                estimate = manopt_exp(estimate, manopt_log(estimate, X), i)
                cum += time.perf_counter_ns() - start
            elif method == "manopt-ret":
                start = time.perf_counter_ns()
                estimate = manopt_ret(estimate, manopt_log(estimate, X), i)
                cum += time.perf_counter_ns() - start
            else:
                x = X @ g
                norm = float(np.linalg.norm(x))
                if norm > 0.0:
                    x = x / norm
                start = time.perf_counter_ns()
                estimate = opca_step(estimate, x, 1.0 / i)
                cum += time.perf_counter_ns() - start
        except OutsideChartError:
            skipped += 1
        basis = (
            frame_matrix(state.chart, state.A) if method == "atlas" else estimate
        )
        rows.append((i, grassmann_distance(basis, center), cum, transitions))
    return rows, skipped


def _method_out_path(out: str, method: str) -> str:
    base, ext = os.path.splitext(out)
    return f"{base}.{method}{ext or '.csv'}"


def _frechet_worker(job: tuple) -> tuple[str, list[tuple], int]:
    method, n, k, p, samples, seed = job
    rows, skipped = run_frechet_method(method, n, k, p, samples, seed)
    return method, rows, skipped


def cmd_grassmann_frechet(args: argparse.Namespace) -> int:
    if not (args.n > args.k >= 1):
        raise SystemExit("requires n > k >= 1")
    if args.p <= 1.0:
        raise SystemExit("requires p > 1")
    if args.samples < 1:
        raise SystemExit("requires samples >= 1")
    if args.n > DESK_SCALE_MAX_N and not args.large:
        raise SystemExit(
            f"n={args.n} exceeds desk scale ({DESK_SCALE_MAX_N}); pass --large"
        )
    methods = FRECHET_METHODS if args.method == "all" else (args.method,)
    jobs = [
        (m, args.n, args.k, args.p, args.samples, args.seed) for m in methods
    ]
    if args.parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            results = list(pool.map(_frechet_worker, jobs))
    else:
        results = [_frechet_worker(job) for job in jobs]
    for method, rows, skipped in results:
        path = (
            args.out if args.method != "all" else _method_out_path(args.out, method)
        )
        write_csv(
            path,
            ["iter", "error", "cum_time_ns", "n_transitions"],
            rows,
            preamble=[
                f"grassmann-frechet method={method} n={args.n} k={args.k} "
                f"p={args.p} samples={args.samples} seed={args.seed}",
                "error is the Grassmann distance between estimate and center;"
                " cum_time_ns is a monotonic-clock total over estimator"
                " updates only",
            ],
            trailer=[f"skipped: {skipped}"],
        )
        print(
            f"{method}: final error {rows[-1][1]:.6f}, "
            f"{rows[-1][3]} transitions, {skipped} skipped -> {path}"
        )
    return 0


# --------------------------------------------------------------------------
# retraction-order
# --------------------------------------------------------------------------


def cmd_retraction_order(args: argparse.Namespace) -> int:
    if not (args.n > args.k >= 1):
        raise SystemExit("requires n > k >= 1")
    scales = np.array([float(s) for s in args.scales.split(",")])
    if scales.size < 2:
        raise SystemExit("need at least two scales to fit a slope")
    rng = np.random.default_rng(args.seed)
    rows = []
    slopes = []
    for probe in range(args.probes):
        errors, slope = retraction_order_probe(args.n, args.k, scales, rng)
        slopes.append(slope)
        for s, e in zip(scales, errors):
            rows.append((probe, s, e, slope))
    write_csv(
        args.out,
        ["probe", "scale", "error", "probe_slope"],
        rows,
        preamble=[
            f"retraction-order n={args.n} k={args.k} probes={args.probes} "
            f"seed={args.seed}",
            "probe_slope is the least-squares slope of log error vs log scale",
        ],
    )
    slopes = np.array(slopes)
    in_band = int(np.sum((slopes >= 1.8) & (slopes <= 2.2)))
    print(
        f"{args.probes} probes, median slope {np.median(slopes):.3f}, "
        f"{in_band} in [1.8, 2.2] -> {args.out}"
    )
    return 0


# --------------------------------------------------------------------------
# klein-fit / klein-sample / dense-graph
# --------------------------------------------------------------------------


def cmd_klein_fit(args: argparse.Namespace) -> int:
    rng = np.random.default_rng(args.seed)
    build = klein.build_klein_atlas_detailed(
        samples_per_chart=args.per_chart,
        r=args.radius,
        svm_C=args.svm_c,
        rng=rng,
        grid=args.grid,
    )
    save_atlas(args.out, build.atlas)
    print(
        f"atlas: {len(build.atlas.charts)} charts, "
        f"{len(build.atlas.adjacency)} adjacent pairs -> {args.out}"
    )
    return 0


def cmd_klein_sample(args: argparse.Namespace) -> int:
    atlas = load_atlas(args.atlas)
    rng = np.random.default_rng(args.seed)
    chart_ids, coords, points = klein.sample_atlas_points(
        atlas, args.per_chart, rng
    )
    d = atlas.dim
    cols = (
        ["chart_id"]
        + [f"xi_{j}" for j in range(d)]
        + [f"x_{j}" for j in range(atlas.ambient_dim)]
    )
    rows = [
        (int(cid), *xi, *amb)
        for cid, xi, amb in zip(chart_ids, coords, points)
    ]
    write_csv(
        args.out,
        cols,
        rows,
        preamble=[
            f"klein-sample atlas={os.path.basename(args.atlas)} "
            f"per_chart={args.per_chart} seed={args.seed}"
        ],
    )
    print(f"{len(rows)} points ({args.per_chart} per chart) -> {args.out}")
    return 0


def cmd_dense_graph(args: argparse.Namespace) -> int:
    atlas = load_atlas(args.atlas)
    graph = build_dense_graph(atlas, args.delta, args.eps)
    save_graph(args.out, graph)
    n = graph.n_vertices
    csr = csr_matrix(
        (graph.edge_w, (graph.edge_u, graph.edge_v)), shape=(n, n)
    )
    n_comp, _ = connected_components(csr, directed=False)
    print(
        f"graph: {n} vertices, {graph.n_edges} edges, "
        f"{n_comp} component{'s' if n_comp != 1 else ''} -> {args.out}"
    )
    return 0


# --------------------------------------------------------------------------
# distances
# --------------------------------------------------------------------------


def _sym_csr(n: int, eu: np.ndarray, ev: np.ndarray, ew: np.ndarray):
    rows = np.concatenate([eu, ev])
    cols = np.concatenate([ev, eu])
    data = np.concatenate([ew, ew])
    return csr_matrix((data, (rows, cols)), shape=(n, n))


def _knn_edges(points: np.ndarray, k: int):
    """Unique symmetric kNN edges over rows of points."""
    m = points.shape[0]
    tree = cKDTree(points)
    dists, idx = tree.query(points, k=k + 1)
    src = np.repeat(np.arange(m), k)
    dst = idx[:, 1:].ravel()
    wts = dists[:, 1:].ravel()
    lo = np.minimum(src, dst)
    hi = np.maximum(src, dst)
    key = lo.astype(np.int64) * m + hi
    _, first = np.unique(key, return_index=True)
    return lo[first], hi[first], wts[first]


def _pair_distances(csr, sources: np.ndarray, targets: np.ndarray) -> np.ndarray:
    uniq = np.unique(sources)
    dist = _csgraph_dijkstra(csr, indices=uniq)
    lookup = {int(u): i for i, u in enumerate(uniq)}
    return np.array(
        [dist[lookup[int(s)], int(t)] for s, t in zip(sources, targets)]
    )


def cmd_distances(args: argparse.Namespace) -> int:
    atlas = load_atlas(args.atlas)
    graph = load_graph(args.graph)
    rng = np.random.default_rng(args.seed)

    ref = klein.reference_geodesic_graph(args.ref_grid)
    n_ref = ref.points.shape[0]
    ref_csr = _sym_csr(n_ref, ref.edge_u, ref.edge_v, ref.edge_w)

    n_dense = graph.n_vertices
    dense_csr = _sym_csr(n_dense, graph.edge_u, graph.edge_v, graph.edge_w)

    centered = ref.points - ref.points.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    embedding = centered @ vt[:2].T
    pu, pv, pw = _knn_edges(embedding, k=5)
    pca_csr = _sym_csr(n_ref, pu, pv, pw)

    pair_idx = rng.integers(0, n_ref, size=(args.pairs, 2))
    dense_snap = cKDTree(graph.points).query(ref.points[pair_idx.ravel()])[1]
    dense_pairs = dense_snap.reshape(args.pairs, 2)

    true_d = _pair_distances(ref_csr, pair_idx[:, 0], pair_idx[:, 1])
    atlas_d = _pair_distances(dense_csr, dense_pairs[:, 0], dense_pairs[:, 1])
    pca_d = _pair_distances(pca_csr, pair_idx[:, 0], pair_idx[:, 1])

    ok = np.isfinite(true_d) & np.isfinite(atlas_d) & np.isfinite(pca_d)
    rows = [
        (i, true_d[i], atlas_d[i], pca_d[i], int(ok[i]))
        for i in range(args.pairs)
    ]

    def stats(est: np.ndarray) -> tuple[float, float, float]:
        sel = ok & (true_d > 0.0) & (est > 0.0)
        t, e = true_d[sel], est[sel]
        pearson = float(np.corrcoef(t, e)[0, 1])
        rho = float(spearmanr(t, e).statistic)
        alpha = float((e / t).max() * (t / e).max())
        return pearson, rho, alpha

    a_stats = stats(atlas_d)
    p_stats = stats(pca_d)
    trailer = [
        "distortion alpha = (max expansion ratio) * (max contraction ratio)",
        f"atlas: pearson={a_stats[0]!r} spearman={a_stats[1]!r} alpha={a_stats[2]!r}",
        f"pca: pearson={p_stats[0]!r} spearman={p_stats[1]!r} alpha={p_stats[2]!r}",
    ]
    write_csv(
        args.out,
        ["pair_id", "true_dist", "atlas_dist", "pca_dist", "ok"],
        rows,
        preamble=[
            f"distances ref_grid={args.ref_grid} pairs={args.pairs} "
            f"seed={args.seed}",
            "true_dist: reference-grid geodesic; atlas_dist: dense-graph "
            "shortest path; pca_dist: kNN graph on a 2-component PCA "
            "embedding",
        ],
        trailer=trailer,
    )
    for line in trailer[1:]:
        print(line)
    print(f"{int(ok.sum())}/{args.pairs} connected pairs -> {args.out}")
    return 0


# --------------------------------------------------------------------------
# rpb
# --------------------------------------------------------------------------


def _parse_start(text: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise SystemExit(f"start must be 'theta,phi', got {text!r}")
    return float(parts[0]), float(parts[1])


def sample_class_patches(
    n_per_class: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Rejection-sample ambient patches of the two definite classes."""
    plus: list[np.ndarray] = []
    minus: list[np.ndarray] = []
    while len(plus) < n_per_class or len(minus) < n_per_class:
        th = rng.uniform(0.0, math.pi)
        ph = rng.uniform(0.0, 2.0 * math.pi)
        lab = klein.label(th, ph)
        if lab is PatchLabel.CONVEX and len(plus) < n_per_class:
            plus.append(patch(th, ph))
        elif lab is PatchLabel.CONCAVE and len(minus) < n_per_class:
            minus.append(patch(th, ph))
    return np.array(plus), np.array(minus)


def sample_labeled_params(
    n: int, rng: np.random.Generator
) -> tuple[list[klein.PatchParams], list[PatchLabel]]:
    """Rejection-sample parameters with definite convexity labels."""
    prms: list[klein.PatchParams] = []
    labs: list[PatchLabel] = []
    while len(prms) < n:
        th = rng.uniform(0.0, math.pi)
        ph = rng.uniform(0.0, 2.0 * math.pi)
        lab = klein.label(th, ph)
        if lab is PatchLabel.NEITHER:
            continue
        prms.append(klein.PatchParams(th, ph))
        labs.append(lab)
    return prms, labs


def cmd_rpb(args: argparse.Namespace) -> int:
    atlas = load_atlas(args.atlas)
    graph = load_graph(args.graph)
    theta_p, phi_p = _parse_start(args.start_plus)
    theta_m, phi_m = _parse_start(args.start_minus)

    rng = np.random.default_rng(args.seed)
    data_plus, data_minus = sample_class_patches(RPB_TRAIN_PER_CLASS, rng)
    starts = [
        represent_point(atlas, patch(theta_p, phi_p)),
        represent_point(atlas, patch(theta_m, phi_m)),
        represent_point(
            atlas, patch(0.5 * (theta_p + theta_m), 0.5 * (phi_p + phi_m))
        ),
    ]
    cfg = RpbConfig(
        h=args.h, alpha=args.alpha, step=args.step, iterations=args.iters
    )
    result = run_rpb(
        atlas,
        data_plus,
        data_minus,
        starts,
        cfg,
        graph=graph,
        readout=patch_params_readout,
    )

    rows = []
    for curve, trace in (
        ("plus", result.flow_plus),
        ("minus", result.flow_minus),
        ("boundary", result.boundary),
    ):
        for it, sample in enumerate(trace):
            rows.append(
                (
                    it,
                    curve,
                    sample.point.chart,
                    *sample.point.xi,
                    *sample.ambient,
                    sample.params.theta,
                    sample.params.phi,
                )
            )
    d = atlas.dim
    cols = (
        ["iter", "curve", "chart_id"]
        + [f"xi_{j}" for j in range(d)]
        + [f"x_{j}" for j in range(atlas.ambient_dim)]
        + ["theta", "phi"]
    )

    test_params, test_labels = sample_labeled_params(
        RPB_HELDOUT, np.random.default_rng([args.seed, 1])
    )
    accuracy = None
    if len(result.boundary) >= 2 and result.flow_plus:
        correct = sum(
            classify_by_boundary(result, pp) is lab
            for pp, lab in zip(test_params, test_labels)
        )
        accuracy = correct / len(test_params)

    trailer = []
    if accuracy is not None:
        trailer.append(
            f"accuracy: {accuracy!r} on {len(test_params)} held-out patches"
        )
    if result.error is not None:
        trailer.append(f"error: {result.error}")
    write_csv(
        args.out,
        cols,
        rows,
        preamble=[
            f"rpb iters={args.iters} h={args.h} alpha={args.alpha} "
            f"step={args.step} seed={args.seed} "
            f"start_plus={args.start_plus} start_minus={args.start_minus}",
            f"training samples: {RPB_TRAIN_PER_CLASS} per class",
        ],
        trailer=trailer,
    )
    if accuracy is not None:
        print(f"accuracy: {accuracy:.3f} on {len(test_params)} held-out patches")
    if result.error is not None:
        print(f"run aborted: {result.error}", file=sys.stderr)
        print(f"partial traces -> {args.out}", file=sys.stderr)
        return 1
    print(f"3 traces x {args.iters + 1} samples -> {args.out}")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

DEFAULT_START_PLUS = f"{9.0 * math.pi / 16.0},{math.pi / 8.0}"
DEFAULT_START_MINUS = f"{9.0 * math.pi / 16.0},{7.0 * math.pi / 8.0}"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="atlasgraph",
        description="Benchmarks and experiments on atlas-graph manifolds.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "grassmann-frechet",
        help="stream Frechet-mean estimators over seeded GPD samples",
    )
    p.add_argument("--n", type=int, default=30)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--p", type=float, default=2.0)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument(
        "--method", choices=FRECHET_METHODS + ("all",), default="atlas"
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument(
        "--parallel",
        type=int,
        default=1,
        help="worker processes when fanning out --method all",
    )
    p.add_argument(
        "--large",
        action="store_true",
        help="allow paper-scale n beyond the desk-scale cap",
    )
    p.set_defaults(func=cmd_grassmann_frechet)

    p = sub.add_parser(
        "retraction-order",
        help="probe the in-chart step error order against exact geodesics",
    )
    p.add_argument("--n", type=int, default=6)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--scales", default="1e-1,1e-2,1e-3,1e-4")
    p.add_argument("--probes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_retraction_order)

    p = sub.add_parser(
        "klein-fit", help="fit the image-patch atlas and save it as JSON"
    )
    p.add_argument("--grid", type=int, default=8)
    p.add_argument("--radius", type=float, default=1.1)
    p.add_argument("--per-chart", type=int, default=500)
    p.add_argument("--svm-c", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_klein_fit)

    p = sub.add_parser(
        "klein-sample", help="draw in-boundary points from a saved atlas"
    )
    p.add_argument("--atlas", required=True)
    p.add_argument("--per-chart", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_klein_sample)

    p = sub.add_parser(
        "dense-graph", help="build the chart-grid graph of a saved atlas"
    )
    p.add_argument("--atlas", required=True)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--eps", type=float, default=0.6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dense_graph)

    p = sub.add_parser(
        "distances",
        help="compare atlas and PCA shortest-path distances to a reference",
    )
    p.add_argument("--atlas", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--ref-grid", type=int, default=200)
    p.add_argument("--pairs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distances)

    p = sub.add_parser(
        "rpb", help="integrate principal flows and their boundary"
    )
    p.add_argument("--atlas", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--h", type=float, default=0.5)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--step", type=float, default=0.005)
    p.add_argument("--start-plus", default=DEFAULT_START_PLUS)
    p.add_argument("--start-minus", default=DEFAULT_START_MINUS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rpb)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
