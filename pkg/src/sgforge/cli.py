"""Command-line entry point: ``sgforge build|evaluate-rooms|query|export``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, PipelineConfig
from .formats import FormatError
from .graph import SceneGraphError
from .llm import ClientError, MockFixtureStore, TemplateError
from .objects import ObjectLayerError
from .fundamental import FundamentalLayerError
from .rooms import RoomLayerError

_HANDLED = (pipeline.PipelineError, ConfigError, FormatError, SceneGraphError, ClientError,
            TemplateError, ObjectLayerError, FundamentalLayerError, RoomLayerError, OSError,
            ValueError)


def _load_config(path: str | None) -> tuple[PipelineConfig, Path | None]:
    if path is None:
        return PipelineConfig(), None
    return PipelineConfig.from_toml(path), Path(path).resolve().parent


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, ensure_ascii=False))


def cmd_build(args) -> int:
    cfg, base = _load_config(args.config)
    res = pipeline.build(cfg, args.frames, args.out, config_dir=base)
    _print({"graph": str(Path(args.out) / "graph.json"), "layer_counts": res.report["layer_counts"],
            "config_hash": res.report["config_hash"]})
    return 0


def cmd_evaluate(args) -> int:
    cfg, base = _load_config(args.config)
    metrics = pipeline.evaluate_rooms(cfg, args.records, strategy=args.strategy, out_dir=args.out,
                                      config_dir=base)
    _print({k: metrics[k] for k in ("strategy", "total_rooms", "annotated", "correct", "accuracy",
                                    "abstentions", "malformed_records")})
    return 0


def cmd_query(args) -> int:
    cfg, base = _load_config(args.config)
    client = cfg.client.make_client(base) if args.mode == "llm" else None
    res = pipeline.query(args.graph, args.text, args.mode, client=client, config=cfg)
    _print(res.to_dict())
    return 0


def cmd_export(args) -> int:
    files = pipeline.export(args.graph, args.format, args.out)
    for f in files:
        print(f)
    return 0


def cmd_synth(args) -> int:
    from .synthetic import ground_truth, two_room_scene, write_frame_log

    scene = two_room_scene()
    log = write_frame_log(scene, args.out)
    (Path(args.out) / "ground_truth.json").write_text(json.dumps(ground_truth(scene), indent=2) + "\n")
    print(log)
    return 0


def cmd_harvest(args) -> int:
    store = MockFixtureStore.from_audit(args.audit)
    store.save(args.out)
    print(f"{len(store.responses)} fixtures -> {args.out}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgforge", description="Hierarchical 3D scene graphs from posed RGB-D frame logs.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="build a scene graph from a frame log")
    b.add_argument("--config")
    b.add_argument("--frames", required=True)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build)

    e = sub.add_parser("evaluate-rooms", help="score room labelling on harness records")
    e.add_argument("--config")
    e.add_argument("--records", required=True)
    e.add_argument("--out")
    e.add_argument("--strategy", choices=["polling", "direct"], default="polling")
    e.set_defaults(func=cmd_evaluate)

    q = sub.add_parser("query", help="semantic search over a built graph")
    q.add_argument("--graph", required=True)
    q.add_argument("--text", required=True)
    q.add_argument("--mode", choices=["llm", "lexical"], default="lexical")
    q.add_argument("--config")
    q.set_defaults(func=cmd_query)

    x = sub.add_parser("export", help="export a graph")
    x.add_argument("--graph", required=True)
    x.add_argument("--format", required=True)
    x.add_argument("--out")
    x.set_defaults(func=cmd_export)

    s = sub.add_parser("synth", help="render the synthetic two-room scene as a frame log")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    h = sub.add_parser("harvest-fixtures", help="turn an LLM audit log into mock fixtures")
    h.add_argument("--audit", required=True)
    h.add_argument("--out", required=True)
    h.set_defaults(func=cmd_harvest)
    return p


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _HANDLED as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return pipeline.exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
