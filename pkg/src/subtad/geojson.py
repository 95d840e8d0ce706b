"""GeoJSON rendering of detection results: labelled segments plus frequent-cell polygons."""
from __future__ import annotations

from typing import Sequence

from .itinerary import ItineraryStats
from .spatial import CellIndexer

NORMAL_STYLE = {"status": "normal", "stroke": "#1f77b4", "stroke-width": 3}
ANOMALY_STYLE = {"status": "anomalous", "stroke": "#d62728", "stroke-width": 3, "stroke-dasharray": "6 4"}


def label_runs(labels: Sequence[int]) -> list[tuple[int, int, int]]:
    """Maximal runs ``(start, end_inclusive, label)`` covering every index once."""
    runs = []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            runs.append((start, i - 1, int(labels[start])))
            start = i
    return runs


def _position(indexer: CellIndexer, cell: int) -> list[float]:
    lon, lat = indexer.center(cell)
    return [lon, lat]


def segment_features(traj_id: str, cells: Sequence[int], labels: Sequence[int],
                     indexer: CellIndexer) -> list[dict]:
    if len(cells) != len(labels):
        raise ValueError("cells and labels differ in length")
    feats = []
    for start, end, lab in label_runs(labels):
        coords = [_position(indexer, c) for c in cells[start:end + 1]]
        geom = {"type": "Point", "coordinates": coords[0]} if len(coords) == 1 else \
            {"type": "LineString", "coordinates": coords}
        props = {"traj_id": traj_id, "label": lab, "start_index": start, "end_index": end,
                 **(ANOMALY_STYLE if lab else NORMAL_STYLE)}
        feats.append({"type": "Feature", "geometry": geom, "properties": props})
    return feats


def frequent_cell_features(stats: ItineraryStats, indexer: CellIndexer) -> list[dict]:
    feats = []
    for c in stats.sorted_pos():
        ring = [list(p) for p in indexer.boundary(c)]
        ring.append(ring[0])
        feats.append({"type": "Feature", "geometry": {"type": "Polygon", "coordinates": [ring]},
                      "properties": {"kind": "frequent_cell", "cell": int(c), "od": stats.od,
                                     "fill": "#9ecae1", "fill-opacity": 0.3, "stroke-width": 0}})
    return feats


def detection_collection(detections: Sequence[dict], indexer: CellIndexer,
                         stats: dict | None = None) -> dict:
    """One FeatureCollection; ``detections`` hold ``traj_id``, ``route_id``, ``cells``, ``labels``."""
    feats: list[dict] = []
    ods = []
    for d in detections:
        feats.extend(segment_features(d["traj_id"], d["cells"], d["labels"], indexer))
        if d.get("route_id") not in ods:
            ods.append(d.get("route_id"))
    if stats:
        for od in ods:
            if od in stats:
                feats.extend(frequent_cell_features(stats[od], indexer))
    return {"type": "FeatureCollection", "features": feats}
