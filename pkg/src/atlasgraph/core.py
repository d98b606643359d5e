"""Chart-agnostic atlas-graph primitives.

An atlas graph stores a manifold as a collection of compressed Euclidean
chart domains plus transition maps between them. A point is represented by
a chart id and a coordinate vector in that chart; a tangent vector by a
chart id and a component vector. The operations here (quasi-Euclidean
stepping, identity vector transport, local retraction logarithm, pullback
metric) are parameterized over a chart provider object supplied by the
grassmann or charts modules, so they work identically on exact Grassmann
charts and on charts learned from point clouds.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

ChartId = int


class ChartMismatchError(ValueError):
    """Raised when an operation receives a point and tangent in different charts."""


class DegenerateMetricError(ValueError):
    """Raised when a chart differential is rank deficient and the pullback metric collapses."""


class StepError(RuntimeError):
    """Raised when a quasi-Euclidean step cannot be completed.

    Attributes
    ----------
    last_point : RepresentativePoint
        The last valid representative reached before the failure, kept for
        diagnostics.
    """

    def __init__(self, message: str, last_point: "RepresentativePoint"):
        super().__init__(message)
        self.last_point = last_point


@dataclass(frozen=True, eq=False)
class RepresentativePoint:
    """A manifold point represented inside one chart.

    Attributes
    ----------
    chart : ChartId
        Integer handle of the chart the coordinates live in.
    xi : numpy.ndarray
        Coordinate vector in the chart's compressed Euclidean domain.
    """

    chart: ChartId
    xi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=float))
        if not np.all(np.isfinite(self.xi)):
            raise ValueError("representative coordinates must be finite")


@dataclass(frozen=True, eq=False)
class RepresentativeTangent:
    """A tangent vector represented by its components in one chart.

    Attributes
    ----------
    chart : ChartId
        Integer handle of the chart the components live in.
    tau : numpy.ndarray
        Component vector, same length as the chart dimension.
    """

    chart: ChartId
    tau: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "tau", np.asarray(self.tau, dtype=float))
        if not np.all(np.isfinite(self.tau)):
            raise ValueError("tangent components must be finite")


@runtime_checkable
class ChartProvider(Protocol):
    """Minimal contract an atlas must satisfy to support stepping.

    A provider exposes the intrinsic dimension, a transition predicate, a
    transition map, and (optionally, needed only for the pullback metric)
    the differential of the chart's inverse map into ambient space.

    Single-chart providers may ignore the ``chart`` argument; multi-chart
    atlases dispatch on it.
    """

    @property
    def dim(self) -> int: ...

    def needs_transition(self, xi: np.ndarray, chart: ChartId = 0) -> bool: ...

    def transition(self, point: RepresentativePoint) -> RepresentativePoint: ...

    def differential(self, xi: np.ndarray, chart: ChartId = 0) -> np.ndarray: ...


# Bounded retries for chained transitions inside one step: a cycle of
# transitions must surface as an error instead of hanging.
MAX_TRANSITIONS_PER_STEP = 8


def quasi_euclidean_step(
    p: RepresentativePoint,
    t: RepresentativeTangent,
    provider: ChartProvider,
    max_transitions: int = MAX_TRANSITIONS_PER_STEP,
) -> RepresentativePoint:
    """Advance a representative point by adding tangent components in-chart.

    The update is ``xi' = p.xi + t.tau``. If the provider reports that the
    new coordinates lie outside the chart's domain, the provider's
    transition map is applied repeatedly (at most ``max_transitions`` times)
    until the representative is interior again.

    Parameters
    ----------
    p : RepresentativePoint
        Start point.
    t : RepresentativeTangent
        Tangent in the same chart as ``p``.
    provider : ChartProvider
        Atlas callbacks used for the boundary test and transitions.
    max_transitions : int
        Bound on chained transitions within this single step.

    Returns
    -------
    RepresentativePoint
        The stepped point, possibly in a different chart.

    Raises
    ------
    ChartMismatchError
        If ``p`` and ``t`` live in different charts or disagree in dimension.
    StepError
        If a transition fails or the retry bound is exceeded; carries the
        last valid representative point.
    """
    if p.chart != t.chart:
        raise ChartMismatchError(
            f"point in chart {p.chart} but tangent in chart {t.chart}"
        )
    if p.xi.shape != t.tau.shape:
        raise ChartMismatchError(
            f"dimension mismatch: point has d={p.xi.size}, tangent d={t.tau.size}"
        )
    current = RepresentativePoint(p.chart, p.xi + t.tau)
    transitions = 0
    while provider.needs_transition(current.xi, current.chart):
        if transitions >= max_transitions:
            raise StepError(
                f"transition retry bound {max_transitions} exceeded in chart "
                f"{current.chart}",
                last_point=current,
            )
        try:
            current = provider.transition(current)
        except Exception as exc:
            raise StepError(
                f"transition failed in chart {current.chart}: {exc}",
                last_point=current,
            ) from exc
        transitions += 1
    return current


def identity_transport(
    t: RepresentativeTangent, target: RepresentativePoint
) -> RepresentativeTangent:
    """Transport a tangent to another point of the same chart.

    The identity vector transport keeps the component vector bit-for-bit
    unchanged; only the base point moves. Transport across charts is a
    different operation (see ``charts.cross_chart_transport``).

    Raises
    ------
    ChartMismatchError
        If the tangent and the target point live in different charts.
    """
    if t.chart != target.chart:
        raise ChartMismatchError(
            f"cannot identity-transport from chart {t.chart} to chart "
            f"{target.chart}; re-represent across charts first"
        )
    return RepresentativeTangent(target.chart, t.tau)


def retraction_log_local(
    p: RepresentativePoint, q: RepresentativePoint
) -> RepresentativeTangent:
    """Local inverse of the quasi-Euclidean step within one chart.

    Returns the tangent ``q.xi - p.xi`` at ``p``. Both points must be
    represented in the same chart; the graph-based logarithm in the
    distances module handles the general case.
    """
    if p.chart != q.chart:
        raise ChartMismatchError(
            f"retraction log needs both points in one chart, got {p.chart} "
            f"and {q.chart}"
        )
    return RepresentativeTangent(p.chart, q.xi - p.xi)


def pullback_metric(
    provider: ChartProvider, xi: np.ndarray, chart: ChartId = 0
) -> np.ndarray:
    """Metric tensor induced on chart coordinates by the ambient embedding.

    With J the ambient-by-d differential of the chart's inverse map at
    ``xi``, the metric is the Gram matrix ``G = J^T J``.

    Returns
    -------
    numpy.ndarray
        Symmetric positive definite d-by-d matrix.

    Raises
    ------
    DegenerateMetricError
        If the differential is rank deficient at ``xi``.
    """
    xi = np.asarray(xi, dtype=float)
    jac = provider.differential(xi, chart)
    if jac is None:
        raise DegenerateMetricError("provider exposes no differential")
    jac = np.asarray(jac, dtype=float)
    gram = jac.T @ jac
    gram = 0.5 * (gram + gram.T)
    d = gram.shape[0]
    eigvals = np.linalg.eigvalsh(gram)
    if eigvals[0] <= d * np.finfo(float).eps * max(eigvals[-1], 1.0):
        raise DegenerateMetricError(
            f"differential is rank deficient at xi={xi!r}: min eigenvalue "
            f"{eigvals[0]:.3e}"
        )
    return gram
