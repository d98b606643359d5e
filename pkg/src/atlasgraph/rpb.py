"""Principal boundary estimation on a learned atlas.

Two principal flows, one per class, follow the top eigenvector field of
a local covariance of retraction logs; a boundary curve advances in
lockstep along the half-weighted average of the two flow tangents after
transporting them to the boundary point.  All geometry goes through the
atlas primitives: coordinate read-offs for nearby samples, graph
logarithms as a fallback for distant ones, quasi-Euclidean stepping
with chart transitions, and differential-based cross-chart transport.
The result doubles as a binary classifier: a held-out point takes the
label of the side of the boundary it falls on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .charts import (
    Atlas,
    AtlasChartProvider,
    cross_chart_transport,
    embed,
    eval_quartic,
    project_to_chart,
)
from .core import (
    RepresentativePoint,
    RepresentativeTangent,
    StepError,
    identity_transport,
    quasi_euclidean_step,
)
from .distances import DenseGraph, GraphLogSolver, InvalidRepresentationError
from .klein import PatchLabel, PatchParams


class RpbError(RuntimeError):
    """Base class for principal-boundary failures."""


class FlowStarvationError(RpbError):
    """Raised when a flow iterate has fewer than two data points in its ball."""


class BoundaryStallError(RpbError):
    """Raised when the averaged boundary tangent vanishes."""


@dataclass(frozen=True)
class RpbConfig:
    """Integration parameters for the three coupled curves.

    Attributes
    ----------
    h : float
        Ambient radius of the indicator ball selecting the samples that
        enter the local covariance and the correction mean.
    alpha : float
        Strength of the correction that pulls a flow toward the mean
        log of nearby samples; zero disables the correction.
    step : float
        Forward Euler step size in chart coordinates.
    iterations : int
        Number of Euler steps for each curve.
    lam : float
        Weight of the first flow tangent in the boundary average.
        Fixed at one half; other values are rejected.
    """

    h: float = 0.5
    alpha: float = 0.1
    step: float = 0.005
    iterations: int = 2000
    lam: float = 0.5

    def __post_init__(self):
        if not self.h > 0.0:
            raise ValueError(f"ball radius h must be positive, got {self.h}")
        if self.alpha < 0.0:
            raise ValueError(f"correction factor must be >= 0, got {self.alpha}")
        if not self.step > 0.0:
            raise ValueError(f"step size must be positive, got {self.step}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.lam != 0.5:
            raise ValueError(f"boundary weight is fixed at 0.5, got {self.lam}")


@dataclass
class FlowState:
    """One curve mid-integration.

    ``prev_tangent`` always lives in the chart of ``point``; it is the
    raw tangent of the most recent step, carried across charts when a
    transition fires, and is the sign reference for the next step.
    ``applied`` records the update direction actually used to leave
    each visited point, in that point's own chart, so a finished trace
    can be audited step by step.
    """

    point: RepresentativePoint
    prev_tangent: RepresentativeTangent | None = None
    trace: list[RepresentativePoint] = field(default_factory=list)
    applied: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.trace:
            self.trace = [self.point]


@dataclass(frozen=True)
class TraceSample:
    """A trace entry: the representative, its embedding, and a readout.

    ``tangent`` is the update direction the integrator applied at this
    sample, in the sample's own chart; the final sample of a trace has
    none.
    """

    point: RepresentativePoint
    ambient: np.ndarray
    params: Any = None
    tangent: np.ndarray | None = None


@dataclass
class RpbResult:
    """Traces of both flows and the boundary, plus a failure note.

    On a clean run each trace has ``iterations + 1`` samples (the start
    plus one per step).  If integration aborted, ``error`` records the
    iteration and cause, and traces hold what was completed.
    """

    flow_plus: list[TraceSample]
    flow_minus: list[TraceSample]
    boundary: list[TraceSample]
    error: str | None = None


def _graph_log_solver(atlas: Atlas, graph: DenseGraph) -> GraphLogSolver:
    """Per-graph memo of the batched logarithm solver."""
    memo = getattr(graph, "_log_solver_memo", None)
    if memo is not None and memo[0] is atlas:
        return memo[1]
    solver = GraphLogSolver(graph, atlas)
    graph._log_solver_memo = (atlas, solver)
    return solver


def _ball_logs(
    atlas: Atlas,
    data: np.ndarray,
    p: RepresentativePoint,
    h: float,
    graph: DenseGraph | None = None,
) -> np.ndarray:
    """Retraction logs at p of the data points within ambient radius h.

    Each nearby sample is read off in p's chart and differenced against
    p's coordinates.  A read-off that fails, landing far outside the
    chart ball or reconstructing the sample poorly (as happens past the
    trust region of the quadratic extrapolation, or when an ambient
    neighbor lives on a different sheet of the manifold), is replaced
    by a dense-graph logarithm when a graph is available and rejected
    otherwise.  The handful of samples whose graph walk is itself
    invalid are dropped.
    """
    chart = atlas.charts[p.chart]
    x0 = embed(chart, p.xi)
    diff = data - x0
    inside = np.einsum("ij,ij->i", diff, diff) <= h * h
    sel = data[inside]
    if sel.shape[0] == 0:
        return np.empty((0, atlas.dim))
    coords = np.atleast_2d(project_to_chart(chart, sel))
    logs = coords - p.xi
    recon = np.linalg.norm(sel - embed(chart, coords), axis=1)
    bad = (np.linalg.norm(coords, axis=1) > 2.0 * chart.radius) | (
        recon > 0.5 * chart.radius
    )
    if not np.any(bad):
        return logs
    if graph is None:
        raise InvalidRepresentationError(
            f"{int(bad.sum())} in-ball points read off outside chart "
            f"{p.chart} and no dense graph is available for full logs"
        )
    solver = _graph_log_solver(atlas, graph)
    fixed, ok = solver.logs_at(p, sel[bad], limit=2.0 * h + 0.5)
    bad_idx = np.flatnonzero(bad)
    logs[bad_idx[ok]] = fixed[ok]
    keep = ~bad
    keep[bad_idx[ok]] = True
    return logs[keep]


def _principal_direction(logs: np.ndarray) -> np.ndarray:
    """Top unit eigenvector of the uncentered covariance of the logs."""
    sigma = logs.T @ logs / logs.shape[0]
    _, vecs = np.linalg.eigh(sigma)
    return vecs[:, -1]


def _consistent_sign(
    w: np.ndarray, prev_tangent: RepresentativeTangent | None
) -> np.ndarray:
    """Resolve the eigenvector sign ambiguity.

    Against a previous tangent the inner product is made nonnegative;
    on the first step the largest-magnitude component is made positive.
    """
    if prev_tangent is None:
        if w[int(np.argmax(np.abs(w)))] < 0.0:
            return -w
        return w
    if float(w @ prev_tangent.tau) < 0.0:
        return -w
    return w


def local_covariance_direction(
    atlas: Atlas,
    data: np.ndarray,
    p: RepresentativePoint,
    h: float,
    prev_tangent: RepresentativeTangent | None = None,
    graph: DenseGraph | None = None,
) -> RepresentativeTangent:
    """Unit tangent along the local principal direction of the data.

    Parameters
    ----------
    atlas : Atlas
        Learned atlas the point is represented on.
    data : numpy.ndarray
        Ambient sample matrix, one point per row.
    p : RepresentativePoint
        Evaluation point.
    h : float
        Ambient ball radius for the indicator kernel.
    prev_tangent : RepresentativeTangent, optional
        Sign reference from the previous step, in p's chart.
    graph : DenseGraph, optional
        Fallback for logs of samples whose chart read-off fails.

    Raises
    ------
    FlowStarvationError
        If fewer than two data points fall inside the ball.
    """
    data = np.atleast_2d(np.asarray(data, dtype=float))
    logs = _ball_logs(atlas, data, p, h, graph)
    if logs.shape[0] < 2:
        raise FlowStarvationError(
            f"only {logs.shape[0]} data points within radius {h} of the "
            f"iterate in chart {p.chart}; the flow has left the data"
        )
    w = _consistent_sign(_principal_direction(logs), prev_tangent)
    return RepresentativeTangent(p.chart, w)


def _quartic_gradient(atlas: Atlas, chart_id: int, xi: np.ndarray) -> np.ndarray:
    """Central-difference gradient of a chart's boundary quartic."""
    q = atlas.quartics[chart_id]
    eps = 1e-6
    g = np.empty(xi.size)
    for j in range(xi.size):
        e = np.zeros(xi.size)
        e[j] = eps
        g[j] = (eval_quartic(q, xi + e) - eval_quartic(q, xi - e)) / (2.0 * eps)
    return g


def _advance(
    state: FlowState,
    gamma_dot: np.ndarray,
    cfg: RpbConfig,
    atlas: Atlas,
    provider: AtlasChartProvider,
) -> FlowState:
    """Euler-step a curve and carry its tangent into the landing chart.

    Learned chart interiors can fail to tile the manifold perfectly;
    where the boundaries of adjacent charts pinch together, a step can
    exit its chart with no neighbor willing to accept the point.  In
    that case the update direction is deflected once along the wall
    (its outward component against the quartic gradient is removed,
    with the sign kept consistent with the previous tangent) and the
    step retried; a second failure propagates.
    """
    p = state.point
    attempt = gamma_dot
    for retry in (False, True):
        try:
            new_point = quasi_euclidean_step(
                p, RepresentativeTangent(p.chart, cfg.step * attempt), provider
            )
            break
        except StepError as exc:
            if retry:
                raise
            exit_xi = p.xi + cfg.step * attempt
            if eval_quartic(atlas.quartics[p.chart], exit_xi) > 0.0:
                normal = _quartic_gradient(atlas, p.chart, exit_xi)
            else:
                # The domain guard fired, not the learned wall; the
                # effective boundary is the coordinate sphere.
                normal = exit_xi
            n_norm = float(np.linalg.norm(normal))
            outward = float(attempt @ normal)
            if n_norm < 1e-12 or outward <= 0.0:
                raise
            slide = attempt - (outward / n_norm**2) * normal
            if float(np.linalg.norm(slide)) <= 1e-12 * float(
                np.linalg.norm(attempt)
            ):
                raise RpbError(
                    f"flow is pinned head-on against the boundary of chart "
                    f"{p.chart}: {exc}"
                ) from exc
            if state.prev_tangent is not None:
                if float(slide @ state.prev_tangent.tau) < 0.0:
                    slide = -slide
            attempt = slide
    if new_point.chart == p.chart:
        carried = attempt
    else:
        exit_xi = p.xi + cfg.step * attempt
        try:
            carried = cross_chart_transport(
                atlas.charts[p.chart],
                exit_xi,
                atlas.charts[new_point.chart],
                new_point.xi,
                attempt,
            )
        except ValueError as exc:
            raise RpbError(
                f"tangent transport into chart {new_point.chart} failed: {exc}"
            ) from exc
    return FlowState(
        point=new_point,
        prev_tangent=RepresentativeTangent(new_point.chart, carried),
        trace=state.trace + [new_point],
        applied=state.applied + [attempt],
    )


def principal_flow_step(
    state: FlowState,
    data: np.ndarray,
    cfg: RpbConfig,
    atlas: Atlas,
    graph: DenseGraph | None = None,
) -> FlowState:
    """Advance one principal flow by a single Euler step.

    The update direction is the local principal direction plus the
    orthogonal projection of the mean in-ball log, scaled by the
    correction factor: ``W + alpha (I - W W') mean_log``.
    """
    data = np.atleast_2d(np.asarray(data, dtype=float))
    p = state.point
    logs = _ball_logs(atlas, data, p, cfg.h, graph)
    if logs.shape[0] < 2:
        raise FlowStarvationError(
            f"only {logs.shape[0]} data points within radius {cfg.h} of the "
            f"iterate in chart {p.chart}; the flow has left the data"
        )
    w = _consistent_sign(_principal_direction(logs), state.prev_tangent)
    mean_log = logs.mean(axis=0)
    gamma_dot = w + cfg.alpha * (mean_log - w * float(w @ mean_log))
    provider = AtlasChartProvider(atlas)
    return _advance(state, gamma_dot, cfg, atlas, provider)


def _transport_to(
    atlas: Atlas,
    tangent: RepresentativeTangent,
    src: RepresentativePoint,
    dst: RepresentativePoint,
) -> np.ndarray:
    if src.chart == dst.chart:
        return identity_transport(tangent, dst).tau
    try:
        return cross_chart_transport(
            atlas.charts[src.chart],
            src.xi,
            atlas.charts[dst.chart],
            dst.xi,
            tangent.tau,
        )
    except ValueError as exc:
        raise RpbError(
            f"tangent transport from chart {src.chart} to chart "
            f"{dst.chart} failed: {exc}"
        ) from exc


def boundary_step(
    boundary: FlowState,
    flow_p: FlowState,
    flow_m: FlowState,
    cfg: RpbConfig,
    atlas: Atlas,
) -> FlowState:
    """Advance the boundary curve by one Euler step.

    Both flow tangents are transported to the boundary point (identity
    within a chart, differential transport across charts) and averaged
    with equal weights.  A vanishing average means the flows pull in
    opposite directions and the boundary cannot move.

    Raises
    ------
    BoundaryStallError
        If the averaged tangent is numerically zero.
    RpbError
        If a cross-chart transport fails.
    """
    if flow_p.prev_tangent is None or flow_m.prev_tangent is None:
        raise ValueError("both flows must have stepped before the boundary")
    tp = _transport_to(atlas, flow_p.prev_tangent, flow_p.point, boundary.point)
    tm = _transport_to(atlas, flow_m.prev_tangent, flow_m.point, boundary.point)
    avg = cfg.lam * tp + (1.0 - cfg.lam) * tm
    scale = max(float(np.linalg.norm(tp)), float(np.linalg.norm(tm)), 1e-30)
    if float(np.linalg.norm(avg)) <= 1e-12 * scale:
        raise BoundaryStallError(
            "flow tangents cancel at the boundary point; the averaged "
            "update is zero"
        )
    if boundary.prev_tangent is not None:
        if float(avg @ boundary.prev_tangent.tau) < 0.0:
            avg = -avg
    provider = AtlasChartProvider(atlas)
    return _advance(boundary, avg, cfg, atlas, provider)


def _materialize(
    atlas: Atlas,
    trace: Sequence[RepresentativePoint],
    applied: Sequence[np.ndarray],
    readout: Callable[[np.ndarray], Any] | None,
) -> list[TraceSample]:
    out = []
    for i, pt in enumerate(trace):
        amb = embed(atlas.charts[pt.chart], pt.xi)
        out.append(
            TraceSample(
                point=pt,
                ambient=amb,
                params=readout(amb) if readout is not None else None,
                tangent=applied[i] if i < len(applied) else None,
            )
        )
    return out


def run_rpb(
    atlas: Atlas,
    data_plus: np.ndarray,
    data_minus: np.ndarray,
    starts: Sequence[RepresentativePoint],
    cfg: RpbConfig = RpbConfig(),
    graph: DenseGraph | None = None,
    readout: Callable[[np.ndarray], Any] | None = None,
) -> RpbResult:
    """Integrate both principal flows and the boundary in lockstep.

    Parameters
    ----------
    atlas : Atlas
        Learned atlas carrying all geometric structure.
    data_plus, data_minus : numpy.ndarray
        Ambient samples of the two classes, one point per row.
    starts : sequence of RepresentativePoint
        Start representatives in the order (plus flow, minus flow,
        boundary); each must lie inside its chart.
    cfg : RpbConfig
        Integration parameters.
    graph : DenseGraph, optional
        Dense graph for fallback logarithms of badly represented
        samples.
    readout : callable, optional
        Map from an ambient point to interpretable parameters, stored
        with each trace sample.

    Returns
    -------
    RpbResult
        Full traces on success; partial traces with ``error`` set if a
        flow starves, the boundary stalls, or a step fails mid-run.
    """
    if len(starts) != 3:
        raise ValueError(f"expected three start points, got {len(starts)}")
    for s in starts:
        if not 0 <= s.chart < len(atlas.charts):
            raise ValueError(f"start chart {s.chart} is not in the atlas")
        if eval_quartic(atlas.quartics[s.chart], s.xi) >= 0.0:
            raise ValueError(
                f"start point lies outside chart {s.chart} "
                "(boundary quartic is nonnegative)"
            )
    data_plus = np.atleast_2d(np.asarray(data_plus, dtype=float))
    data_minus = np.atleast_2d(np.asarray(data_minus, dtype=float))

    flow_p = FlowState(point=starts[0])
    flow_m = FlowState(point=starts[1])
    bnd = FlowState(point=starts[2])
    error = None
    for it in range(cfg.iterations):
        try:
            flow_p = principal_flow_step(flow_p, data_plus, cfg, atlas, graph)
            flow_m = principal_flow_step(flow_m, data_minus, cfg, atlas, graph)
            bnd = boundary_step(bnd, flow_p, flow_m, cfg, atlas)
        except (RpbError, StepError, InvalidRepresentationError) as exc:
            error = f"iteration {it + 1}: {exc}"
            break
    return RpbResult(
        flow_plus=_materialize(atlas, flow_p.trace, flow_p.applied, readout),
        flow_minus=_materialize(atlas, flow_m.trace, flow_m.applied, readout),
        boundary=_materialize(atlas, bnd.trace, bnd.applied, readout),
        error=error,
    )


def _param_images(theta: float, phi: float) -> np.ndarray:
    """All parameter-plane images of a patch under the gluing maps.

    Shifting theta by pi mirrors phi about pi, and phi is periodic with
    period 2 pi; nine images cover every wrap relevant to points whose
    canonical coordinates lie in the fundamental rectangle.
    """
    images = []
    for k in (-1, 0, 1):
        t = theta + k * np.pi
        f = phi if k % 2 == 0 else 2.0 * np.pi - phi
        for m in (-1, 0, 1):
            images.append((t, f + 2.0 * np.pi * m))
    return np.array(images)


def _gap_side(bnd: np.ndarray, theta: float, phi: float) -> float:
    """Signed transverse offset of a patch from the boundary trace.

    The patch's nearest gluing image against the trace is found first,
    which bounds the offset by pi in the angle transverse to the
    boundary.  The matched trace sample's own frame decides the sign
    convention: samples read out past pi live in the mirrored copy of
    the gap, where the transverse axis runs the other way.
    """
    imgs = _param_images(theta, phi)
    d2 = ((imgs[:, None, :] - bnd[None, :, :]) ** 2).sum(axis=2)
    flat = int(np.argmin(d2))
    img_i, t = divmod(flat, bnd.shape[0])
    dphi = float(imgs[img_i, 1] - bnd[t, 1])
    return dphi if bnd[t, 1] <= np.pi else -dphi


def classify_by_boundary(
    result: RpbResult, point_params: PatchParams
) -> PatchLabel:
    """Label a patch by its side of the learned boundary.

    The decision statistic is the patch's transverse offset from the
    nearest boundary trace sample in the parameter plane, wrap-aware
    under the gluing maps.  Which sign of the offset means which class
    is not assumed: it is calibrated from the first flow's own trace,
    whose samples sit on the class side the flow was integrated over.
    The query then takes that flow's label when its offset sign agrees
    with the calibrated majority and the other label otherwise.

    The traces must carry parameter readouts, which requires running
    the integration with a readout callable.
    """
    if not result.boundary:
        raise ValueError("boundary trace is empty")
    if result.boundary[0].params is None:
        raise ValueError(
            "trace samples carry no parameter readouts; rerun the "
            "integration with a readout"
        )
    bnd = np.array(
        [[s.params.theta, s.params.phi] for s in result.boundary]
    )
    orient = getattr(result, "_gap_orientation", None)
    if orient is None:
        stride = max(1, len(result.flow_plus) // 128)
        votes = 0.0
        for s in result.flow_plus[::stride]:
            votes += np.sign(_gap_side(bnd, s.params.theta, s.params.phi))
        orient = 1.0 if votes >= 0.0 else -1.0
        result._gap_orientation = orient
    side = _gap_side(bnd, point_params.theta, point_params.phi)
    if side * orient >= 0.0:
        return PatchLabel.CONVEX
    return PatchLabel.CONCAVE
