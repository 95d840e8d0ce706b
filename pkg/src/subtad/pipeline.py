"""Pipeline stages, in memory and against versioned run directories.

Layout of a run directory::

    <root>/
      ingest-v1/       cells.ndjson, stats.json, indexer.txt, manifest.json
      build-graph-v1/  graph.csv, embeddings.bin, manifest.json
      pretrain-v1/     encoder.pt, pretrain_log.ndjson, manifest.json
      cluster-v1/      pseudo/pseudo_<od>.tsv, manifest.json
      train-dqn-v1/    qmodel.pt, dqn_log.ndjson, manifest.json
      synth-v1/        testset.ndjson, testset.manifest.json, manifest.json
      eval-v1/         scores.tsv, detections.ndjson, delta_p.json, manifest.json

Re-running a stage creates ``<stage>-v2`` and so on; earlier versions are
never touched. Manifests hold the seed, a hash of the resolved config and
content hashes of inputs and outputs, and no wall-clock data, so two runs
with one seed and one input produce identical manifests.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import re
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Hashable, Iterable, Mapping, Sequence, TextIO

import numpy as np
import torch

from .augment import NegativeContext
from .config import (config_hash, dqn_config, encoder_config, pretrain_config, synth_config,
                     walk_params)
from .encoder import Vocabulary, WindowEncoder, load_encoder, save_encoder
from .evaluation import run_detector, score_items, tune_delta_p, write_score_table
from .graphs import (CellEmbeddingTable, HierarchicalGraph, SourceGraph, build_mobility_graph,
                     load_embeddings, map_graph, merge_graphs, read_context_graph, read_graph,
                     read_road_network, road_graph_from_grid, save_embeddings, train_cell_embeddings,
                     write_graph)
from .itinerary import ItineraryStats, load_stats, route_subgraph, save_stats, stats_by_od
from .offline import PseudoLabelSet, load_pseudo_labels, pseudo_label_dataset, save_pseudo_labels
from .online import (OrderingError, PointStream, QModel, StreamDetector, load_qmodel, save_qmodel,
                     train_dqn)
from .pretrain import pretrain
from .spatial import (CellIndexer, CellTrajectory, GeoPoint, H3Indexer, HexGridIndexer,
                      InvalidCoordinateError, indexer_from_manifest, match_trajectory,
                      read_cell_trajectories, read_trajectories, write_cell_trajectories,
                      write_trajectories_csv)
from .synth import (LabeledTrajectory, MicroWorldConfig, SynthConfig, build_micro_world, gen_testset,
                    read_testset, to_gps, write_testset)

log = logging.getLogger(__name__)

STAGES = ("ingest", "build-graph", "pretrain", "cluster", "train-dqn", "synth", "eval")


class MissingArtifactError(FileNotFoundError):
    pass


class DataError(ValueError):
    pass


# ---- in-memory building blocks ----

def make_indexer(cfg: Mapping) -> CellIndexer:
    s = cfg["spatial"]
    if s["indexer"] == "hexgrid":
        return HexGridIndexer(s["width"], s["height"], s["size"], (s["origin_lon"], s["origin_lat"]),
                              s["resolution"])
    return H3Indexer(s["resolution"])


def compute_stats(trajs: Sequence[CellTrajectory], cfg: Mapping, resolution: int) -> dict[Hashable, ItineraryStats]:
    return stats_by_od(trajs, cfg["itinerary"]["delta_od"], resolution)


def build_graph(trajs: Sequence[CellTrajectory], indexer: CellIndexer, road: SourceGraph | None = None,
                context: SourceGraph | None = None, grid_road: bool = False) -> HierarchicalGraph:
    parts = [build_mobility_graph(trajs, indexer.resolution)]
    if grid_road:
        universe = indexer.universe()
        if universe is None:
            raise DataError("a grid road graph needs an indexer with a finite cell universe")
        road = road_graph_from_grid(indexer, universe)
    for g in (road, context):
        if g is not None:
            parts.append(map_graph(g, indexer) if g.resolution is None else g)
    return merge_graphs(parts)


def vocabulary_cells(graph: HierarchicalGraph, trajs: Iterable[CellTrajectory]) -> list[int]:
    cells = set(graph.vertices)
    for t in trajs:
        cells.update(t.cells)
    return sorted(cells)


def build_encoder(cfg: Mapping, stats: Mapping[Hashable, ItineraryStats], graph: HierarchicalGraph,
                  emb: CellEmbeddingTable | None, cells: Sequence[int]) -> WindowEncoder:
    ecfg = encoder_config(cfg)
    subgraphs = {od: route_subgraph(s, graph) for od, s in stats.items()}
    base = emb if ecfg.base_embedding == "graph" else None
    return WindowEncoder(ecfg, Vocabulary(cells), sorted(stats, key=str), subgraphs, base, seed=cfg["seed"])


def negative_contexts(stats: Mapping[Hashable, ItineraryStats], indexer: CellIndexer,
                      cells: Sequence[int]) -> dict[Hashable, NegativeContext]:
    return {od: NegativeContext(s, indexer, cells) for od, s in stats.items()}


def fixed_delta_p(cfg: Mapping) -> int | None:
    dp = cfg["detect"]["delta_p"]
    return None if dp == "auto" else int(dp)


def choose_delta_p(qmodel: QModel, val_items: Sequence[LabeledTrajectory] | None,
                   stats: Mapping[Hashable, ItineraryStats], cfg: Mapping) -> int:
    fixed = fixed_delta_p(cfg)
    if fixed is not None:
        return fixed
    if val_items:
        return tune_delta_p(run_detector(qmodel, val_items), stats, qmodel.window)
    return math.ceil(qmodel.window / 2)


@dataclass
class FittedPipeline:
    cfg: dict
    indexer: CellIndexer
    stats: dict
    graph: HierarchicalGraph
    embeddings: CellEmbeddingTable
    encoder: WindowEncoder
    pseudo: PseudoLabelSet
    qmodel: QModel
    delta_p: int


def fit_pipeline(trajs: Sequence[CellTrajectory], indexer: CellIndexer, cfg: Mapping,
                 road: SourceGraph | None = None, context: SourceGraph | None = None,
                 grid_road: bool = False, val_items: Sequence[LabeledTrajectory] | None = None) -> FittedPipeline:
    """Every training stage in one call, without touching disk."""
    torch.set_num_threads(1)
    stats = compute_stats(trajs, cfg, indexer.resolution)
    graph = build_graph(trajs, indexer, road, context, grid_road)
    emb = train_cell_embeddings(graph, cfg["encoder"]["d_c"], walk_params(cfg))
    cells = vocabulary_cells(graph, trajs)
    enc = build_encoder(cfg, stats, graph, emb, cells)
    pretrain(enc, trajs, stats, negative_contexts(stats, indexer, cells), pretrain_config(cfg))
    enc.cache_tables(True)
    c = cfg["cluster"]
    pseudo = pseudo_label_dataset(trajs, enc, c["eps"], c["min_pts"], c["sample_cap"], cfg["seed"])
    stats = {od: s.with_counts(*pseudo.counts()[od]) if od in pseudo else s for od, s in stats.items()}
    q, _ = train_dqn(enc, trajs, pseudo.lookup(), pseudo.counts(), dqn_config(cfg))
    q.encoder.cache_tables(True)
    dp = choose_delta_p(q, val_items, stats, cfg)
    return FittedPipeline(dict(cfg), indexer, stats, graph, emb, enc, pseudo, q, dp)


# ---- run directories ----

def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_hashes(stage_dir: Path, skip: Iterable[str] = ()) -> dict[str, str]:
    skip = set(skip) | {"manifest.json"}
    return {str(p.relative_to(stage_dir)): file_hash(p) for p in sorted(stage_dir.rglob("*"))
            if p.is_file() and p.name not in skip}


class RunDir:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def versions(self, stage: str) -> list[int]:
        if not self.root.exists():
            return []
        pat = re.compile(rf"^{re.escape(stage)}-v(\d+)$")
        return sorted(int(m.group(1)) for p in self.root.iterdir() if (m := pat.match(p.name)))

    def new_stage(self, stage: str) -> Path:
        v = (self.versions(stage) or [0])[-1] + 1
        d = self.root / f"{stage}-v{v}"
        d.mkdir(parents=True)
        return d

    def latest(self, stage: str, needed_by: str | None = None) -> Path:
        vs = self.versions(stage)
        if not vs:
            who = f" (needed by {needed_by})" if needed_by else ""
            raise MissingArtifactError(f"no {stage} artifacts in {self.root}{who}; run `{stage}` first")
        return self.root / f"{stage}-v{vs[-1]}"


def write_manifest(stage_dir: Path, stage: str, cfg: Mapping, inputs: Mapping[str, str],
                   parents: Mapping[str, str] | None = None, extra: Mapping | None = None,
                   skip: Iterable[str] = ()) -> dict:
    m = {
        "stage": stage,
        "version": int(stage_dir.name.rsplit("-v", 1)[1]),
        "seed": cfg["seed"],
        "config_hash": config_hash(cfg),
        "config": cfg,
        "inputs": dict(inputs),
        "parents": dict(parents or {}),
        "outputs": tree_hashes(stage_dir, skip),
    }
    if extra:
        m["extra"] = dict(extra)
    (stage_dir / "manifest.json").write_text(json.dumps(m, indent=1, sort_keys=True))
    return m


def _parent_hashes(dirs: Mapping[str, Path]) -> dict[str, str]:
    return {name: file_hash(d / "manifest.json") for name, d in dirs.items()}


def load_indexer(run: RunDir) -> CellIndexer:
    return indexer_from_manifest((run.latest("ingest") / "indexer.txt").read_text())


def load_run_stats(run: RunDir) -> dict[Hashable, ItineraryStats]:
    return load_stats(run.latest("ingest") / "stats.json")


def stats_with_counts(run: RunDir) -> dict[Hashable, ItineraryStats]:
    stats = load_run_stats(run)
    try:
        counts = load_pseudo_labels(run.latest("cluster") / "pseudo").counts()
    except MissingArtifactError:
        return stats
    return {od: s.with_counts(*counts[od]) if od in counts else s for od, s in stats.items()}


def load_run_qmodel(run: RunDir) -> QModel:
    emb = load_embeddings(run.latest("build-graph") / "embeddings.bin")
    q = load_qmodel(run.latest("train-dqn", "detect") / "qmodel.pt", emb, load_run_stats(run))
    q.encoder.cache_tables(True)
    return q


# ---- stages ----

def stage_ingest(run: RunDir, cfg: Mapping, points_path: str | Path) -> Path:
    indexer = make_indexer(cfg)
    try:
        raw = read_trajectories(points_path)
        trajs = [match_trajectory(t, indexer) for t in raw]
    except (InvalidCoordinateError, KeyError, ValueError) as exc:
        raise DataError(f"cannot ingest {points_path}: {exc}") from exc
    if not trajs:
        raise DataError(f"{points_path} holds no trajectories")
    d = run.new_stage("ingest")
    write_cell_trajectories(trajs, d / "cells.ndjson")
    save_stats(compute_stats(trajs, cfg, indexer.resolution), d / "stats.json",
               cfg["pretrain"]["delta1"], cfg["pretrain"]["delta2"])
    (d / "indexer.txt").write_text(indexer.manifest())
    write_manifest(d, "ingest", cfg, {"points": file_hash(points_path)},
                   extra={"trajectories": len(trajs)})
    return d


def stage_build_graph(run: RunDir, cfg: Mapping, road_nodes: str | Path | None = None,
                      road_edges: str | Path | None = None, context_path: str | Path | None = None,
                      grid_road: bool = False) -> Path:
    ing = run.latest("ingest", "build-graph")
    indexer = load_indexer(run)
    trajs = read_cell_trajectories(ing / "cells.ndjson")
    inputs = {}
    road = context = None
    if (road_nodes is None) != (road_edges is None):
        raise DataError("road nodes and road edges must be given together")
    try:
        if road_nodes is not None:
            road = read_road_network(road_nodes, road_edges)
            inputs["road_nodes"] = file_hash(road_nodes)
            inputs["road_edges"] = file_hash(road_edges)
        if context_path is not None:
            context = read_context_graph(context_path)
            inputs["context"] = file_hash(context_path)
        graph = build_graph(trajs, indexer, road, context, grid_road)
    except (InvalidCoordinateError, KeyError, ValueError) as exc:
        raise DataError(f"cannot build the graph: {exc}") from exc
    torch.set_num_threads(1)
    emb = train_cell_embeddings(graph, cfg["encoder"]["d_c"], walk_params(cfg))
    d = run.new_stage("build-graph")
    write_graph(graph, d / "graph.csv")
    save_embeddings(emb, d / "embeddings.bin")
    write_manifest(d, "build-graph", cfg, inputs, _parent_hashes({"ingest": ing}),
                   extra={"vertices": len(graph.vertices), "edges": len(graph.edges), "grid_road": grid_road})
    return d


def stage_pretrain(run: RunDir, cfg: Mapping) -> Path:
    ing = run.latest("ingest", "pretrain")
    bg = run.latest("build-graph", "pretrain")
    indexer = load_indexer(run)
    trajs = read_cell_trajectories(ing / "cells.ndjson")
    stats = load_stats(ing / "stats.json")
    graph = read_graph(bg / "graph.csv")
    emb = load_embeddings(bg / "embeddings.bin")
    cells = vocabulary_cells(graph, trajs)
    torch.set_num_threads(1)
    enc = build_encoder(cfg, stats, graph, emb, cells)
    d = run.new_stage("pretrain")
    pretrain(enc, trajs, stats, negative_contexts(stats, indexer, cells), pretrain_config(cfg),
             d / "pretrain_log.ndjson")
    save_encoder(enc, d / "encoder.pt")
    write_manifest(d, "pretrain", cfg, {}, _parent_hashes({"ingest": ing, "build-graph": bg}),
                   skip=("pretrain_log.ndjson",))
    return d


def _load_encoder(run: RunDir, needed_by: str) -> WindowEncoder:
    emb = load_embeddings(run.latest("build-graph", needed_by) / "embeddings.bin")
    enc = load_encoder(run.latest("pretrain", needed_by) / "encoder.pt", emb, load_run_stats(run))
    enc.cache_tables(True)
    return enc


def stage_cluster(run: RunDir, cfg: Mapping) -> Path:
    ing = run.latest("ingest", "cluster")
    pre = run.latest("pretrain", "cluster")
    trajs = read_cell_trajectories(ing / "cells.ndjson")
    torch.set_num_threads(1)
    enc = _load_encoder(run, "cluster")
    c = cfg["cluster"]
    pl = pseudo_label_dataset(trajs, enc, c["eps"], c["min_pts"], c["sample_cap"], cfg["seed"])
    d = run.new_stage("cluster")
    save_pseudo_labels(pl, d / "pseudo")
    write_manifest(d, "cluster", cfg, {}, _parent_hashes({"ingest": ing, "pretrain": pre}),
                   extra={"counts": {str(od): list(v) for od, v in pl.counts().items()}})
    return d


def stage_train_dqn(run: RunDir, cfg: Mapping) -> Path:
    ing = run.latest("ingest", "train-dqn")
    pre = run.latest("pretrain", "train-dqn")
    clu = run.latest("cluster", "train-dqn")
    trajs = read_cell_trajectories(ing / "cells.ndjson")
    pl = load_pseudo_labels(clu / "pseudo")
    torch.set_num_threads(1)
    enc = _load_encoder(run, "train-dqn")
    d = run.new_stage("train-dqn")
    q, _ = train_dqn(enc, trajs, pl.lookup(), pl.counts(), dqn_config(cfg), d / "dqn_log.ndjson")
    save_qmodel(q, d / "qmodel.pt")
    write_manifest(d, "train-dqn", cfg, {}, _parent_hashes({"ingest": ing, "pretrain": pre, "cluster": clu}),
                   skip=("dqn_log.ndjson",))
    return d


def stage_synth_testset(run: RunDir, cfg: Mapping, bases_path: str | Path,
                        synth: SynthConfig | None = None, name: str = "testset") -> Path:
    ing = run.latest("ingest", "synth")
    indexer = load_indexer(run)
    stats = load_run_stats(run)
    bases: dict[Hashable, list[CellTrajectory]] = {}
    for t in read_cell_trajectories(bases_path):
        bases.setdefault(t.od, []).append(t)
    missing = set(bases) - set(stats)
    if missing:
        raise DataError(f"base trajectories reference unknown OD pairs {sorted(map(str, missing))}")
    graph_cells = None
    if run.versions("build-graph"):
        graph_cells = sorted(read_graph(run.latest("build-graph") / "graph.csv").vertices)
    scfg = synth or synth_config(cfg)
    items = gen_testset(bases, stats, indexer, scfg, graph_cells if indexer.universe() is None else None)
    d = run.new_stage("synth")
    write_testset(items, d / f"{name}.ndjson", scfg)
    write_manifest(d, "synth", cfg, {"bases": file_hash(bases_path)}, _parent_hashes({"ingest": ing}),
                   extra={"synth": asdict(scfg), "count": len(items)})
    return d


def detection_records(scored, delta_p: int, stats) -> list[dict]:
    from .evaluation import point_predictions
    out = []
    for s in scored:
        it = s.item
        out.append({"traj_id": it.traj.traj_id, "route_id": it.traj.od, "kind": it.kind,
                    "cells": it.traj.cells, "actions": s.actions.tolist(), "votes": s.votes.tolist(),
                    "labels": point_predictions(s, delta_p, stats.get(it.traj.od)).tolist(),
                    "truth": list(it.point_labels)})
    return out


def stage_eval(run: RunDir, cfg: Mapping, testset_path: str | Path, val_path: str | Path | None = None) -> Path:
    q = load_run_qmodel(run)
    stats = stats_with_counts(run)
    try:
        test = read_testset(testset_path)
        val = read_testset(val_path) if val_path else None
    except (KeyError, ValueError) as exc:
        raise DataError(f"cannot read labelled trajectories: {exc}") from exc
    dp = choose_delta_p(q, val, stats, cfg)
    scored = run_detector(q, test)
    scores = score_items(scored, stats, dp, q.window)
    d = run.new_stage("eval")
    write_score_table(scores, d / "scores.tsv")
    with (d / "detections.ndjson").open("w") as fh:
        for rec in detection_records(scored, dp, stats):
            fh.write(json.dumps(rec) + "\n")
    (d / "delta_p.json").write_text(json.dumps({"delta_p": dp, "tuned": val is not None
                                                and fixed_delta_p(cfg) is None}))
    inputs = {"testset": file_hash(testset_path)}
    if val_path:
        inputs["validation"] = file_hash(val_path)
    write_manifest(d, "eval", cfg, inputs, _parent_hashes({"train-dqn": run.latest("train-dqn")}))
    return d


def run_delta_p(run: RunDir, cfg: Mapping) -> int:
    fixed = fixed_delta_p(cfg)
    if fixed is not None:
        return fixed
    if run.versions("eval"):
        return int(json.loads((run.latest("eval") / "delta_p.json").read_text())["delta_p"])
    return math.ceil(cfg["encoder"]["window"] / 2)


# ---- streaming ----

def stream_detect(lines: Iterable[str], out: TextIO, qmodel: QModel, stats: Mapping[Hashable, ItineraryStats],
                  indexer: CellIndexer, delta_p: int, err: TextIO | None = None) -> int:
    """Run the NDJSON protocol; returns the number of rejected input records."""
    streams: dict[str, PointStream] = {}
    rejected = 0

    def emit(records):
        for r in records:
            out.write(json.dumps(r) + "\n")
        out.flush()

    def reject(tid, msg):
        nonlocal rejected
        rejected += 1
        if err is not None:
            err.write(json.dumps({"traj_id": tid, "error": msg}) + "\n")

    for line in lines:
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            tid = str(rec["traj_id"])
        except (ValueError, KeyError, TypeError) as exc:
            reject(None, f"malformed record: {exc}")
            continue
        if rec.get("event") == "end":
            if tid in streams:
                emit(streams.pop(tid).close())
            continue
        try:
            if tid not in streams:
                od = str(rec["route_id"])
                if od not in stats:
                    raise KeyError(f"unknown route {od!r}")
                streams[tid] = PointStream(StreamDetector(qmodel, stats[od], od, delta_p, tid), indexer)
            p = GeoPoint(float(rec["lon"]), float(rec["lat"]), float(rec["timestamp"]))
            emit(streams[tid].push(p))
        except (OrderingError, InvalidCoordinateError, KeyError, ValueError) as exc:
            reject(tid, str(exc))
    for tid in list(streams):
        emit(streams.pop(tid).close())
    return rejected


# ---- micro world on disk ----

def write_micro_world(out_dir: str | Path, wcfg: MicroWorldConfig | None = None) -> dict[str, Path]:
    """Training GPS CSV, route stop lists, base trajectories and noise ground truth."""
    wcfg = wcfg or MicroWorldConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = build_micro_world(wcfg)
    rng = np.random.default_rng([wcfg.seed, 7])
    paths = {"train": out / "train.csv", "routes": out / "routes.csv", "val_bases": out / "val_bases.ndjson",
             "test_bases": out / "test_bases.ndjson", "train_truth": out / "train_truth.ndjson",
             "world": out / "world.json"}
    write_trajectories_csv([to_gps(lt.traj, world.indexer, rng) for lt in world.train], paths["train"])
    with paths["routes"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("route_id", "seq", "lon", "lat"))
        for od, cells in world.routes.items():
            for i, c in enumerate(cells):
                lon, lat = world.indexer.center(c)
                w.writerow((od, i, repr(lon), repr(lat)))
    write_cell_trajectories(world.val, paths["val_bases"])
    write_cell_trajectories([t for ts in world.test_bases.values() for t in ts], paths["test_bases"])
    write_testset(world.train, paths["train_truth"])
    paths["world"].write_text(json.dumps({"config": asdict(wcfg), "routes": world.routes}, indent=1))
    return paths


def run_micro_benchmark(root: str | Path, cfg: Mapping, world: MicroWorldConfig | None = None,
                        n_val_per_od: int = 25) -> dict:
    """World generation, every training stage, test and validation sets, evaluation."""
    root = Path(root)
    world = world or MicroWorldConfig(seed=cfg["seed"])
    timings = {}
    t = time.perf_counter()
    data = write_micro_world(root / "data", world)
    run = RunDir(root / "run")
    stage_ingest(run, cfg, data["train"])
    stage_build_graph(run, cfg, context_path=data["routes"], grid_road=True)
    timings["prepare"] = time.perf_counter() - t
    for name, fn in (("pretrain", stage_pretrain), ("cluster", stage_cluster), ("train-dqn", stage_train_dqn)):
        t = time.perf_counter()
        fn(run, cfg)
        timings[name] = time.perf_counter() - t
    t = time.perf_counter()
    test_dir = stage_synth_testset(run, cfg, data["test_bases"])
    vcfg = synth_config(cfg)
    vcfg.n_per_od, vcfg.seed = n_val_per_od, cfg["seed"] + 1
    val_dir = stage_synth_testset(run, cfg, data["val_bases"], vcfg, name="validation")
    ev = stage_eval(run, cfg, test_dir / "testset.ndjson", val_dir / "validation.ndjson")
    timings["eval"] = time.perf_counter() - t
    return {"run": run, "data": data, "eval": ev, "timings": timings,
            "testset": test_dir / "testset.ndjson", "validation": val_dir / "validation.ndjson"}
