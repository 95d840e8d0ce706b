"""Command-line entry point: ``subtad <command>``.

Exit codes: 0 success, 2 usage error or unknown command, 3 invalid
config, 4 missing upstream artifact, 5 bad input data.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from .config import ConfigError, load_config, synth_config
from .geojson import detection_collection
from .synth import MicroWorldConfig

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_MISSING, EXIT_DATA = 0, 2, 3, 4, 5

log = logging.getLogger("subtad")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="subtad", description="Sub-trajectory anomaly detection pipeline")
    p.add_argument("--config", type=Path, help="YAML config file")
    p.add_argument("--preset", default="default", help="packaged base config (default, micro)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key, e.g. --set dqn.steps=1000")
    p.add_argument("--run", type=Path, default=Path("run"), help="run directory (default: ./run)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("ingest", help="GPS points to deduplicated cell sequences and itinerary stats")
    s.add_argument("--input", type=Path, required=True, help="CSV or NDJSON of traj_id,route_id,lon,lat,timestamp")

    s = sub.add_parser("build-graph", help="merge road/context/mobility graphs and embed cells")
    s.add_argument("--road-nodes", type=Path)
    s.add_argument("--road-edges", type=Path)
    s.add_argument("--context", type=Path, help="CSV route_id,seq,lon,lat")
    s.add_argument("--grid-road", action="store_true", help="use full cell adjacency as the road graph")

    sub.add_parser("pretrain", help="contrastive and reconstruction pre-training")
    sub.add_parser("cluster", help="density clustering and pseudo-labels")
    sub.add_parser("train-dqn", help="fit the Q-network on pseudo-labelled windows")

    s = sub.add_parser("detect", help="streaming detection, NDJSON on stdin and stdout")
    s.add_argument("--input", type=Path, help="read records from a file instead of stdin")
    s.add_argument("--delta-p", type=int, help="voting threshold; defaults to the last eval's choice")

    s = sub.add_parser("synth", help="synthetic data")
    s.add_argument("action", choices=("world", "testset"))
    s.add_argument("--out", type=Path, help="world: output directory")
    s.add_argument("--bases", type=Path, help="testset: NDJSON cell trajectories to perturb")
    s.add_argument("--name", default="testset", help="testset: output file stem")
    s.add_argument("--n-per-od", type=int, help="testset: override synth.n_per_od")

    s = sub.add_parser("eval", help="score a labelled test set; writes a per-kind P/R/F1 table")
    s.add_argument("--testset", type=Path, required=True)
    s.add_argument("--val", type=Path, help="labelled validation set for tuning the voting threshold")

    s = sub.add_parser("viz", help="GeoJSON of detections and frequent cells")
    s.add_argument("--detections", type=Path, required=True,
                   help="eval detections.ndjson or detect output")
    s.add_argument("--traj-id", action="append", default=[], help="restrict to these trajectories")
    s.add_argument("--route", help="route id for detect-output records, which carry none")
    s.add_argument("--out", type=Path, required=True)
    return p


def _read_detections(path: Path, route: str | None) -> list[dict]:
    recs = [json.loads(ln) for ln in path.read_text().splitlines() if ln.strip()]
    if recs and "point_index" in recs[0]:
        grouped: dict[str, list[dict]] = {}
        for r in recs:
            grouped.setdefault(r["traj_id"], []).append(r)
        out = []
        for tid, rs in grouped.items():
            rs.sort(key=lambda r: r["point_index"])
            out.append({"traj_id": tid, "route_id": route, "cells": [r["cell"] for r in rs],
                        "labels": [r["label"] for r in rs]})
        return out
    return recs


def run_command(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.overrides, base=args.preset)
    run = pl.RunDir(args.run)
    cmd = args.command
    if cmd == "ingest":
        print(pl.stage_ingest(run, cfg, args.input))
    elif cmd == "build-graph":
        print(pl.stage_build_graph(run, cfg, args.road_nodes, args.road_edges, args.context, args.grid_road))
    elif cmd == "pretrain":
        print(pl.stage_pretrain(run, cfg))
    elif cmd == "cluster":
        print(pl.stage_cluster(run, cfg))
    elif cmd == "train-dqn":
        print(pl.stage_train_dqn(run, cfg))
    elif cmd == "detect":
        q = pl.load_run_qmodel(run)
        dp = args.delta_p or pl.run_delta_p(run, cfg)
        if not 1 <= dp <= q.window:
            raise ConfigError(f"--delta-p must lie in [1, {q.window}]")
        src = args.input.open() if args.input else sys.stdin
        try:
            bad = pl.stream_detect(src, sys.stdout, q, pl.load_run_stats(run), pl.load_indexer(run), dp, sys.stderr)
        finally:
            if args.input:
                src.close()
        return EXIT_DATA if bad else EXIT_OK
    elif cmd == "synth":
        if args.action == "world":
            if args.out is None:
                raise ConfigError("synth world needs --out")
            paths = pl.write_micro_world(args.out, MicroWorldConfig(seed=cfg["seed"]))
            print(json.dumps({k: str(v) for k, v in paths.items()}, indent=1))
        else:
            if args.bases is None:
                raise ConfigError("synth testset needs --bases")
            scfg = synth_config(cfg)
            if args.n_per_od:
                scfg.n_per_od = args.n_per_od
            print(pl.stage_synth_testset(run, cfg, args.bases, scfg, args.name))
    elif cmd == "eval":
        d = pl.stage_eval(run, cfg, args.testset, args.val)
        print((d / "scores.tsv").read_text(), end="")
        print(d)
    elif cmd == "viz":
        dets = _read_detections(args.detections, args.route)
        if args.traj_id:
            keep = set(args.traj_id)
            dets = [d for d in dets if d["traj_id"] in keep]
        if not dets:
            raise pl.DataError("no matching detections")
        fc = detection_collection(dets, pl.load_indexer(run), pl.load_run_stats(run))
        args.out.write_text(json.dumps(fc))
        print(args.out)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return run_command(args)
    except ConfigError as exc:
        log.error("invalid config: %s", exc)
        return EXIT_CONFIG
    except pl.MissingArtifactError as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except (pl.DataError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
