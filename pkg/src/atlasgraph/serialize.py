"""Durable file formats for atlases, dense graphs, and result tables.

JSON carries structure (versioned schema, matrices as row-major nested
arrays of doubles); CSV carries experiment rows (UTF-8, header row,
period decimal point).  Floats are rendered with ``repr``, whose
shortest round-trip form reparses to the identical IEEE double, so a
save/load cycle is bitwise faithful.  All writes are whole-file
atomic: content goes to a sibling temporary file that is renamed over
the target, so readers never observe a half-written file.
"""

from __future__ import annotations

import json
import os
import tempfile
from typing import Iterable, Sequence

import numpy as np

from .charts import Atlas, BoundaryQuartic, QuadraticChart
from .distances import DenseGraph

SCHEMA_VERSION = 1


# --------------------------------------------------------------------------
# atomic writes
# --------------------------------------------------------------------------


def atomic_write_text(path: str, text: str) -> None:
    """Write text to path through a temporary file and rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def write_csv(
    path: str,
    columns: Sequence[str],
    rows: Iterable[Sequence],
    preamble: Sequence[str] = (),
    trailer: Sequence[str] = (),
) -> None:
    """Write a CSV file with optional '#'-prefixed comment lines.

    Parameters
    ----------
    path : str
        Destination file.
    columns : sequence of str
        Header row names.
    rows : iterable of sequences
        Data rows; floats are rendered in round-trip form.
    preamble, trailer : sequence of str
        Comment lines (without the leading '#') placed before the
        header and after the data.
    """
    lines = [f"# {c}" for c in preamble]
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    lines.extend(f"# {c}" for c in trailer)
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_csv(path: str) -> tuple[list[str], list[list[str]], list[str]]:
    """Read a CSV written by write_csv.

    Returns
    -------
    (columns, rows, comments) : tuple
        Header names, data rows as strings, and comment lines with the
        '#' prefix stripped.
    """
    columns: list[str] = []
    rows: list[list[str]] = []
    comments: list[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                comments.append(line[1:].strip())
            elif not columns:
                columns = line.split(",")
            else:
                rows.append(line.split(","))
    return columns, rows, comments


# --------------------------------------------------------------------------
# atlas JSON
# --------------------------------------------------------------------------


def atlas_to_dict(atlas: Atlas) -> dict:
    """Schema-versioned plain dictionary form of an atlas."""
    charts = []
    for cid, (chart, quartic) in enumerate(zip(atlas.charts, atlas.quartics)):
        entry = {
            "id": cid,
            "center": chart.center.tolist(),
            "L": chart.L.tolist(),
            "M": chart.M.tolist(),
            "K": chart.K.tolist(),
            "a": chart.a.tolist(),
            "radius": chart.radius,
            "quartic": {
                "A4": quartic.A4.tolist(),
                "A3": quartic.A3.tolist(),
                "A2a": quartic.A2a.tolist(),
                "A2b": quartic.A2b.tolist(),
                "A1": quartic.A1.tolist(),
                "a0": quartic.a0,
            },
        }
        if atlas.extended[cid]:
            entry["extended_linear"] = True
        charts.append(entry)
    return {
        "schema_version": SCHEMA_VERSION,
        "ambient_dim": atlas.ambient_dim,
        "dim": atlas.dim,
        "charts": charts,
        "adjacency": [[int(i), int(j)] for i, j in atlas.adjacency],
    }


def atlas_from_dict(data: dict) -> Atlas:
    """Rebuild an atlas from its dictionary form."""
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(
            f"unsupported atlas schema version {version!r}; "
            f"expected {SCHEMA_VERSION}"
        )
    charts: list[QuadraticChart] = []
    quartics: list[BoundaryQuartic] = []
    extended: list[bool] = []
    entries = sorted(data["charts"], key=lambda e: e["id"])
    for expect, entry in enumerate(entries):
        if entry["id"] != expect:
            raise ValueError(
                f"chart ids must be 0..{len(entries) - 1}, found {entry['id']}"
            )
        charts.append(
            QuadraticChart(
                center=np.asarray(entry["center"], dtype=float),
                L=np.asarray(entry["L"], dtype=float),
                M=np.asarray(entry["M"], dtype=float),
                K=np.asarray(entry["K"], dtype=float),
                a=np.asarray(entry["a"], dtype=float),
                radius=float(entry["radius"]),
            )
        )
        q = entry["quartic"]
        quartics.append(
            BoundaryQuartic(
                A4=np.asarray(q["A4"], dtype=float),
                A3=np.asarray(q["A3"], dtype=float),
                A2a=np.asarray(q["A2a"], dtype=float),
                A2b=np.asarray(q["A2b"], dtype=float),
                A1=np.asarray(q["A1"], dtype=float),
                a0=float(q["a0"]),
            )
        )
        extended.append(bool(entry.get("extended_linear", False)))
    return Atlas(
        ambient_dim=int(data["ambient_dim"]),
        dim=int(data["dim"]),
        charts=charts,
        quartics=quartics,
        adjacency=[(int(i), int(j)) for i, j in data["adjacency"]],
        extended=extended,
    )


def save_atlas(path: str, atlas: Atlas) -> None:
    """Serialize an atlas to a JSON file atomically."""
    atomic_write_text(path, json.dumps(atlas_to_dict(atlas), indent=1) + "\n")


def load_atlas(path: str) -> Atlas:
    """Load an atlas saved by save_atlas."""
    with open(path, "r", encoding="utf-8") as fh:
        return atlas_from_dict(json.load(fh))


# --------------------------------------------------------------------------
# dense graph JSON
# --------------------------------------------------------------------------


def graph_to_dict(graph: DenseGraph) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "points": graph.points.tolist(),
        "chart_ids": graph.chart_ids.tolist(),
        "coords": graph.coords.tolist(),
        "edge_u": graph.edge_u.tolist(),
        "edge_v": graph.edge_v.tolist(),
        "edge_w": graph.edge_w.tolist(),
    }


def graph_from_dict(data: dict) -> DenseGraph:
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(
            f"unsupported graph schema version {version!r}; "
            f"expected {SCHEMA_VERSION}"
        )
    return DenseGraph(
        points=np.asarray(data["points"], dtype=float),
        chart_ids=np.asarray(data["chart_ids"], dtype=int),
        coords=np.asarray(data["coords"], dtype=float),
        edge_u=np.asarray(data["edge_u"], dtype=int),
        edge_v=np.asarray(data["edge_v"], dtype=int),
        edge_w=np.asarray(data["edge_w"], dtype=float),
    )


def save_graph(path: str, graph: DenseGraph) -> None:
    """Serialize a dense graph to a JSON file atomically."""
    atomic_write_text(path, json.dumps(graph_to_dict(graph)) + "\n")


def load_graph(path: str) -> DenseGraph:
    """Load a graph saved by save_graph."""
    with open(path, "r", encoding="utf-8") as fh:
        return graph_from_dict(json.load(fh))
