"""Atlas-graph representation of Riemannian manifolds.

A manifold is stored as compressed Euclidean chart domains plus transition
maps. On this representation the package provides first-order optimization
primitives on the Grassmann manifold (streaming Frechet means with
quasi-Euclidean updates), learning of approximate quadratic charts from
point clouds with quartic transition boundaries, approximate geodesic
machinery (closed-form path lengths, a dense geodesic graph, shortest
paths, an approximate Riemannian logarithm), the Klein-bottle atlas of
high-contrast image patches, and the Riemannian principal-boundary
classifier. The ``atlasgraph`` command line reproduces the experiments at
desk scale.
"""

from .charts import (
    AmbientQuadraticSeparator,
    Atlas,
    AtlasChartProvider,
    BoundaryQuartic,
    NoAdmissibleChartError,
    QuadraticChart,
    assign_membership,
    cross_chart_transport,
    differential,
    embed,
    eval_quartic,
    fit_local_quadratic,
    needs_transition,
    precompute_quartic,
    project_to_chart,
    represent_point,
    residual,
    separator_value,
    svm_to_quadratic,
    transition_map,
)
from .core import (
    ChartId,
    ChartMismatchError,
    ChartProvider,
    DegenerateMetricError,
    RepresentativePoint,
    RepresentativeTangent,
    StepError,
    identity_transport,
    pullback_metric,
    quasi_euclidean_step,
    retraction_log_local,
)
from .distances import (
    DenseGraph,
    DisconnectedGraphError,
    GraphLogSolver,
    InvalidRepresentationError,
    NaiveDistanceTerms,
    approx_riemannian_log,
    build_dense_graph,
    distance_from_terms,
    naive_distance,
    naive_distance_terms,
    nearest_vertex,
    shortest_path,
)
from .serialize import (
    SCHEMA_VERSION,
    atlas_from_dict,
    atlas_to_dict,
    graph_from_dict,
    graph_to_dict,
    load_atlas,
    load_graph,
    read_csv,
    save_atlas,
    save_graph,
    write_csv,
)
from .svm import (
    SmoSolution,
    SvmConvergenceError,
    SvmModel,
    dual_objective,
    kernel_gram,
    kkt_residuals,
    quadratic_kernel,
    smo_solve,
    svm_decision,
    train_boundary_svm,
)

__all__ = [
    "AmbientQuadraticSeparator",
    "Atlas",
    "AtlasChartProvider",
    "BoundaryQuartic",
    "ChartId",
    "ChartMismatchError",
    "ChartProvider",
    "DegenerateMetricError",
    "DenseGraph",
    "DisconnectedGraphError",
    "GraphLogSolver",
    "InvalidRepresentationError",
    "NaiveDistanceTerms",
    "NoAdmissibleChartError",
    "QuadraticChart",
    "RepresentativePoint",
    "RepresentativeTangent",
    "SCHEMA_VERSION",
    "SmoSolution",
    "StepError",
    "SvmConvergenceError",
    "SvmModel",
    "approx_riemannian_log",
    "assign_membership",
    "atlas_from_dict",
    "atlas_to_dict",
    "build_dense_graph",
    "cross_chart_transport",
    "differential",
    "distance_from_terms",
    "dual_objective",
    "embed",
    "eval_quartic",
    "fit_local_quadratic",
    "graph_from_dict",
    "graph_to_dict",
    "identity_transport",
    "kernel_gram",
    "kkt_residuals",
    "load_atlas",
    "load_graph",
    "naive_distance",
    "naive_distance_terms",
    "nearest_vertex",
    "needs_transition",
    "precompute_quartic",
    "project_to_chart",
    "pullback_metric",
    "quadratic_kernel",
    "quasi_euclidean_step",
    "read_csv",
    "represent_point",
    "residual",
    "retraction_log_local",
    "save_atlas",
    "save_graph",
    "separator_value",
    "shortest_path",
    "smo_solve",
    "svm_decision",
    "svm_to_quadratic",
    "train_boundary_svm",
    "transition_map",
    "write_csv",
]
