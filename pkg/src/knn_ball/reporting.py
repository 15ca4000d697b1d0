import os
import sys
import json
import math
import platform
import logging

import numpy as np
import pandas as pd
import networkx as nx

from dataclasses import asdict
from typing import Union

from NeighborSearch.torus_geometry import PointSet
from src.errors import ConfigError
from src.knn_ball.nnball_process import MarkedPointSet
from src.knn_ball.stats_utils import EstimateReport
from src.utils import float_format

logger = logging.getLogger(__name__)


def to_jsonable(value):
    """Plain JSON types; non-finite floats become the strings "inf", "-inf" and "nan"."""
    if isinstance(value, dict):
        return {str(key): to_jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(item) for item in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    return value


def report_payload(report: EstimateReport) -> dict:
    """The deterministic part of a report; timestamps go to the metadata sidecar."""
    return to_jsonable({
        "estimator": report.estimator,
        "config": report.config,
        "records": [asdict(record) for record in report.records],
        "trends": report.trends,
        "warnings": list(report.warnings),
        "passed": report.passed,
    })


def records_frame(report: EstimateReport) -> pd.DataFrame:
    return pd.DataFrame([asdict(record) for record in report.records])


def _ensure_dir(path: str):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {path}: {e}")
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory {path} is not writable")


def write_report(report: EstimateReport, out_dir: str) -> str:
    """
    Writes report.json, report.csv and meta.json into out_dir.

    Args:
        report: the EstimateReport of one estimator run
        out_dir: target folder, created if missing

    Returns:
        the path of report.json

    """
    _ensure_dir(out_dir)
    json_path = os.path.join(out_dir, "report.json")
    with open(json_path, "w") as f:
        json.dump(report_payload(report), f, sort_keys=True, indent=2)
        f.write("\n")

    records_frame(report).to_csv(os.path.join(out_dir, "report.csv"), float_format=float_format, index=False)

    meta = {
        "start_time": report.start_time,
        "end_time": report.end_time,
        "wall_seconds": report.get_total_time_sec(),
        "threads": report.config.get("threads"),
        "python": sys.version.split()[0],
        "platform": platform.platform(),
        "numpy": np.__version__,
        "pandas": pd.__version__,
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as f:
        json.dump(to_jsonable(meta), f, sort_keys=True, indent=2)
        f.write("\n")

    logger.info("wrote %s", json_path)
    return json_path


def write_point_set(ps: Union[PointSet, MarkedPointSet], path: str):
    """CSV with header x_1..x_d, plus a mark column for marked sets."""
    frame = pd.DataFrame(ps.coords, columns=[f"x_{axis + 1}" for axis in range(ps.dim)])
    if isinstance(ps, MarkedPointSet):
        frame["mark"] = ps.marks
    parent = os.path.dirname(os.path.abspath(path))
    _ensure_dir(parent)
    frame.to_csv(path, float_format=float_format, index=False)


def write_graph(graph: nx.Graph, path: str):
    """Edge list CSV with columns i, j, distance; isolated vertices do not appear."""
    frame = nx.to_pandas_edgelist(graph, source="i", target="j")
    frame = frame.rename(columns={"weight": "distance"}).reindex(columns=["i", "j", "distance"])
    _ensure_dir(os.path.dirname(os.path.abspath(path)))
    frame.to_csv(path, float_format=float_format, index=False)


def read_point_set(path: str) -> Union[PointSet, MarkedPointSet]:
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ConfigError(f"cannot read point set {path}: {e}")

    axes = [column for column in frame.columns if column.startswith("x_")]
    if not axes:
        raise ConfigError(f"{path} has no x_1..x_d columns")
    coords = frame[axes].to_numpy(dtype=np.float64)
    if "mark" in frame.columns:
        return MarkedPointSet(len(axes), coords, frame["mark"].to_numpy(dtype=np.float64))
    return PointSet(len(axes), coords)
