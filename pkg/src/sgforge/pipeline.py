"""Batch orchestration: build, room-label evaluation, query and export."""

from __future__ import annotations

import csv
import json
import logging
import re
import shutil
import time
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from filelock import FileLock
from filelock import Timeout as LockTimeout

from . import plotting
from .config import ConfigError, PipelineConfig
from .formats import FormatError, iter_frame_log, write_mesh, write_ply
from .fundamental import (FundamentalLayerError, TsdfGrid, extract_mesh, integrate_frame,
                          build_places_graph)
from .graph import (KIND_LAYER, DescriptionSet, GraphNode, InvariantViolation, ParseError,
                    SceneGraph, SceneGraphError, SchemaError, deserialize, id_sort_key,
                    serialize)
from .llm import ChatClient, ClientError, PromptTemplate, TemplateError, render
from .objects import (MissingEmbedding, ObjectLayerError, ObjectMap, TooFewPoints,
                      caption_crops, extract_instance, summarize_node)
from .rooms import (IncompletePoll, RoomLayerError, RoomNode, _norm, assign_objects,
                    caption_floor, caption_room, cluster_floors, decide_label, poll_room,
                    segment_rooms)

logger = logging.getLogger(__name__)

DEVIATIONS = (
    "places: medial-axis ridge of a 2D clearance slice stands in for a full 3D GVD",
    "rooms: 0-dim persistence sweep over place clearance, seeds grown by shortest path",
    "objects: captions come from saved crop references in an offline batch pass",
)
_ID_TOKEN = re.compile(r"\bL\d+_\d+\b")


class PipelineError(Exception):
    pass


class EmptyInput(PipelineError):
    pass


class MalformedRecord(PipelineError):
    pass


class UnknownFormat(PipelineError):
    pass


class PipelineBusy(PipelineError):
    pass


class StageError(PipelineError):
    """Module error annotated with the stage and frame/node it happened on."""

    def __init__(self, stage: str, context: str, cause: Exception):
        super().__init__(f"{stage} [{context}]: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.context = context
        self.cause = cause


def exit_code(exc: BaseException) -> int:
    """CLI exit code: 1 input error, 2 backend error, 3 invariant violation."""
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, ClientError):
        return 2
    if isinstance(exc, (ParseError, SchemaError)):
        return 1
    if isinstance(exc, SceneGraphError):
        return 3
    return 1


def _round3(v) -> tuple[float, float, float]:
    return tuple(round(float(x), 6) for x in v)


# -- build --------------------------------------------------------------------

@dataclass
class BuildResult:
    graph: SceneGraph
    out_dir: Path
    report: dict
    grid: TsdfGrid | None = None
    places: object = None
    objects: list = field(default_factory=list)
    rooms: list[RoomNode] = field(default_factory=list)
    floors: list = field(default_factory=list)


class _Templates:
    def __init__(self, directory: str | None):
        self.directory = directory

    def __getitem__(self, name: str) -> PromptTemplate:
        if self.directory and (Path(self.directory) / f"{name}.txt").exists():
            return PromptTemplate.load(name, self.directory)
        return PromptTemplate.load(name)


def build(config: PipelineConfig, frame_log, out_dir, client: ChatClient | None = None,
          config_dir: Path | None = None) -> BuildResult:
    """Run every layer pass in order and write the graph plus its artifacts.

    Outputs in ``out_dir``: ``graph.json``, ``mesh.ply``, ``objects/*.ply``,
    ``report.json``, ``report/*.csv`` with a plan-view figure, and the LLM
    transcripts. On failure the outputs written so far are kept and
    ``report.json`` records the failing stage.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out_dir / ".sgforge.lock"), timeout=0)
    try:
        lock.acquire()
    except LockTimeout as exc:
        raise PipelineBusy(f"another build holds {out_dir}") from exc
    try:
        return _Build(config, Path(frame_log), out_dir, client, config_dir).run()
    finally:
        lock.release()


class _Build:
    def __init__(self, config, frame_log, out_dir, client, config_dir):
        self.config = config
        self.frame_log = frame_log
        self.out = out_dir
        self.client = client
        self.config_dir = config_dir
        self.templates = _Templates(config.templates_dir)
        self.stage = "setup"
        self.report = {
            "status": "running",
            "started_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "frame_log": str(frame_log),
            "config_hash": config.digest(),
            "deviations": list(DEVIATIONS),
            "timings_s": {},
            "skipped_instances": {},
        }
        self.metadata: dict = {}

    def _client(self) -> ChatClient:
        if self.client is None:
            self.client = self.config.client.make_client(self.config_dir)
        return self.client

    def _timed(self, stage, fn, *args):
        self.stage = stage
        t0 = time.perf_counter()
        out = fn(*args)
        self.report["timings_s"][stage] = round(time.perf_counter() - t0, 3)
        return out

    def run(self) -> BuildResult:
        try:
            return self._run()
        except BaseException as exc:
            self.report["status"] = "failed"
            self.report["failed_stage"] = self.stage
            self.report["error"] = f"{type(exc).__name__}: {exc}"
            self._write_report()
            raise

    def _run(self) -> BuildResult:
        for name in ("transcripts", "objects"):
            shutil.rmtree(self.out / name, ignore_errors=True)
        (self.out / "transcripts").mkdir()
        frames = self._timed("read_frames", self._read_frames)
        grid = self._timed("integrate", self._integrate, frames)
        mesh = self._timed("mesh", extract_mesh, grid)
        write_mesh(self.out / "mesh.ply", mesh)
        places, free = self._timed("places", self._places, grid)
        objmap = self._timed("objects", self._objects, frames)
        if self.config.captioning:
            self._timed("captions", self._captions, objmap)
        rooms = self._timed("rooms", self._rooms, places, objmap)
        floors = []
        if self.config.floors:
            floors = self._timed("floors", self._floors, rooms, objmap, places)
        self.stage = "assemble"
        graph = self._assemble(frames, places, objmap, rooms, floors)
        (self.out / "graph.json").write_text(serialize(graph), encoding="utf-8", newline="\n")
        self.stage = "report"
        self.report["status"] = "ok"
        self.report["layer_counts"] = {str(k): v for k, v in sorted(graph.layer_counts().items())}
        self.report["mesh"] = {"vertices": int(len(mesh.vertices)),
                               "triangles": int(len(mesh.triangles))}
        self._write_tables(graph, rooms)
        plotting.plan_view(places, self.metadata["room_places"], objmap.nodes,
                           self.out / "report" / "plan.png", free)
        self._write_report()
        return BuildResult(graph, self.out, self.report, grid, places, objmap.nodes, rooms, floors)

    def _write_report(self):
        (self.out / "report.json").write_text(json.dumps(self.report, indent=2, sort_keys=True) + "\n",
                                              encoding="utf-8")

    # passes

    def _read_frames(self):
        if not self.frame_log.exists():
            raise FormatError(f"frame log {self.frame_log} not found")
        frames = list(iter_frame_log(self.frame_log))
        if not frames:
            raise EmptyInput(f"{self.frame_log} holds no frames")
        self.report["frames"] = len(frames)
        return frames

    def _integrate(self, frames):
        grid = TsdfGrid(self.config.voxel_size, self.config.truncation)
        for line_no, frame in frames:
            try:
                integrate_frame(grid, frame)
            except FundamentalLayerError as exc:
                raise StageError("integrate", f"frame log line {line_no}", exc) from exc
        self.report["voxels"] = len(grid)
        self.report["empty_frames"] = grid.empty_frames
        return grid

    def _places(self, grid):
        try:
            return build_places_graph(grid, self.config.agent_height, self.config.slice_height,
                                      return_slice=True)
        except FundamentalLayerError as exc:
            raise StageError("places", "free-space slice", exc) from exc

    def _objects(self, frames):
        cfg = self.config
        objmap = ObjectMap(cfg.voxel_size, cfg.association_threshold, cfg.w_geometric, cfg.w_semantic)
        skipped = Counter()
        background = set(cfg.background_classes)
        for line_no, frame in frames:
            for mask in frame.masks:
                if mask.class_name in background:
                    continue
                try:
                    inst = extract_instance(frame, mask, cfg.min_points)
                except TooFewPoints:
                    skipped["too_few_points"] += 1
                    continue
                except MissingEmbedding:
                    skipped["missing_embedding"] += 1
                    continue
                try:
                    objmap.add(inst)
                except (ObjectLayerError, ValueError) as exc:
                    raise StageError("objects", f"frame log line {line_no}, mask {mask.class_name}",
                                     exc) from exc
        self.report["skipped_instances"] = dict(sorted(skipped.items()))
        return objmap

    def _captions(self, objmap):
        client = self._client()
        k = self.config.max_captions_per_node
        todo = [(node, crop) for node in objmap.nodes for crop in node.crops[:k]]
        try:
            caps = caption_crops(client, [c for _, c in todo], self.templates["caption_instance"])
        except ClientError as exc:
            raise StageError("captions", "instance captioning", exc) from exc
        with open(self.out / "transcripts" / "captions.jsonl", "w", encoding="utf-8") as fh:
            for (node, (cls, ref)), cap in zip(todo, caps):
                node.instance_captions.append(cap)
                fh.write(json.dumps({"node_id": node.node_id, "class_name": cls, "crop_ref": ref,
                                     "descriptions": cap.to_list()}, ensure_ascii=False) + "\n")
        for node in objmap.nodes:
            if not node.instance_captions:
                continue
            try:
                summarize_node(client, node, self.templates["summarize_object"])
            except ClientError as exc:
                raise StageError("captions", node.node_id, exc) from exc

    def _rooms(self, places, objmap):
        try:
            rooms = segment_rooms(places, self.config.persistence_min)
        except RoomLayerError as exc:
            raise StageError("rooms", "segmentation", exc) from exc
        assign_objects(rooms, objmap.nodes, places, self.metadata)
        if not self.config.captioning:
            return rooms
        client = self._client()
        objects = {n.node_id: n for n in objmap.nodes}
        labels = self.config.labels
        incomplete = []
        for room in rooms:
            if room.object_members:
                poll = poll_room(client, room, objects, labels, self.config.poll_rounds,
                                 self.templates["room_label"],
                                 transcript_path=str(self.out / "transcripts" / "room_polls.jsonl"))
                try:
                    room.label = decide_label(poll, labels)
                except IncompletePoll:
                    incomplete.append(room.node_id)
            try:
                caption_room(client, room, objects, self.templates["room_caption"])
            except ClientError as exc:
                raise StageError("rooms", room.node_id, exc) from exc
        if incomplete:
            self.metadata["incomplete_polls"] = incomplete
        return rooms

    def _floors(self, rooms, objmap, places):
        objects = {n.node_id: n for n in objmap.nodes}
        floors = cluster_floors(rooms, objects, self.config.floor_gap, places)
        if self.config.captioning:
            by_id = {r.node_id: r for r in rooms}
            for fl in floors:
                try:
                    caption_floor(self._client(), fl, by_id, self.templates["floor_caption"])
                except ClientError as exc:
                    raise StageError("floors", fl.node_id, exc) from exc
        return floors

    def _assemble(self, frames, places, objmap, rooms, floors) -> SceneGraph:
        cfg = self.config
        ts = [f.timestamp for _, f in frames]
        meta = {
            "dataset": self.frame_log.stem,
            "frames": len(frames),
            "time_range": [min(ts), max(ts)],
            "config_hash": cfg.digest(),
            "parameters": {k: getattr(cfg, k) for k in (
                "voxel_size", "truncation", "agent_height", "association_threshold",
                "w_geometric", "w_semantic", "poll_rounds", "persistence_min", "floor_gap",
                "typical_labels", "captioning", "floors")},
            "deviations": list(DEVIATIONS),
            "mesh": "mesh.ply",
        }
        g = SceneGraph(num_layers=5 if cfg.floors else 3, metadata=meta)
        place_ids = [f"L1_{i}" for i in range(len(places))]
        for i, pid in enumerate(place_ids):
            g.add_node(GraphNode(pid, 1, "place", _round3(places.positions[i])))
        for a, b in places.edges:
            g.add_edge(place_ids[a], place_ids[b])
        meta["place_clearance"] = {pid: round(float(c), 4) for pid, c in zip(place_ids, places.clearance)}

        (self.out / "objects").mkdir(exist_ok=True)
        for node in objmap.nodes:
            ref = f"objects/{node.node_id}.ply"
            write_ply(self.out / ref, node.cloud)
            g.add_node(GraphNode(node.node_id, 2, "object", _round3(node.centroid),
                                 DescriptionSet(node.summary), ref, node.class_name))
            d = np.linalg.norm(places.positions - node.centroid, axis=1)
            g.add_edge(node.node_id, place_ids[int(np.argmin(d))])

        place_room = {}
        for room in rooms:
            members = sorted(room.place_members)
            for p in members:
                place_room[p] = room.node_id
            g.add_node(GraphNode(room.node_id, 3, "room", _round3(places.positions[members].mean(axis=0)),
                                 DescriptionSet(room.description), None, room.label))
            for oid in sorted(room.object_members, key=id_sort_key):
                g.add_edge(room.node_id, oid)
        for a, b in places.edges:
            ra, rb = place_room.get(a), place_room.get(b)
            if ra and rb and ra != rb:
                g.add_edge(ra, rb)
        meta["room_places"] = {r.node_id: [place_ids[p] for p in sorted(r.place_members)] for r in rooms}
        meta["room_polls"] = {r.node_id: r.poll.summary(cfg.labels) for r in rooms if r.poll is not None}
        self.metadata = {**self.metadata, "room_places": {r.node_id: sorted(r.place_members) for r in rooms}}
        for key in ("unreachable_objects", "incomplete_polls"):
            if key in self.metadata:
                meta[key] = self.metadata[key]

        if cfg.floors:
            room_c = {r.node_id: np.asarray(g.nodes[r.node_id].centroid) for r in rooms}
            for fl in floors:
                c = np.mean([room_c[r] for r in fl.room_members], axis=0)
                c[2] = fl.height
                g.add_node(GraphNode(fl.node_id, 4, "floor", _round3(c), DescriptionSet(fl.description)))
                for rid in fl.room_members:
                    g.add_edge(fl.node_id, rid)
            desc = DescriptionSet()
            if cfg.captioning:
                n_rooms = len(rooms)
                desc.add("summary", f"building with {len(floors)} floor(s) and {n_rooms} room(s)")
            c = np.mean([g.nodes[f.node_id].centroid for f in floors], axis=0) if floors else np.zeros(3)
            g.add_node(GraphNode("L5_0", 5, "building", _round3(c), desc))
            for fl in floors:
                g.add_edge("L5_0", fl.node_id)
        return g

    def _write_tables(self, graph, rooms):
        rep = self.out / "report"
        rep.mkdir(exist_ok=True)
        inv = {v: k for k, v in KIND_LAYER.items()}
        with open(rep / "layer_counts.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "kind", "nodes"])
            for layer, n in sorted(graph.layer_counts().items()):
                w.writerow([layer, inv.get(layer, ""), n])
        with open(rep / "rooms.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["room_id", "label", "places", "objects", "poll"])
            for r in rooms:
                w.writerow([r.node_id, r.label or "", len(r.place_members), len(r.object_members),
                            r.poll.summary(self.config.labels) if r.poll else ""])


# -- evaluation ---------------------------------------------------------------

@dataclass
class RecordObject:
    node_id: str
    class_name: str
    summary: DescriptionSet
    centroid: tuple = (0.0, 0.0, 0.0)


def _parse_record(line: str, n: int) -> tuple[RoomNode, dict, str]:
    try:
        rec = json.loads(line)
        room_id = rec["room_id"]
        truth = rec["ground_truth_label"]
        raw = rec["objects"]
        if not isinstance(room_id, str) or not isinstance(truth, str) or not isinstance(raw, list):
            raise TypeError("room_id/ground_truth_label must be strings, objects a list")
        objects = {}
        for k, o in enumerate(raw):
            oid = f"{room_id}/o{k}"
            if isinstance(o, str):
                objects[oid] = RecordObject(oid, o, DescriptionSet())
            else:
                name = o.get("class_name") or o.get("label")
                if not isinstance(name, str) or not name:
                    raise TypeError(f"object {k} has no class_name")
                objects[oid] = RecordObject(oid, name, DescriptionSet.from_list(o.get("descriptions", [])))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as exc:
        raise MalformedRecord(f"line {n}: {exc}") from exc
    room = RoomNode(room_id, {0}, set(objects))
    return room, objects, truth


def _rate(correct: int, annotated: int):
    return correct / annotated if annotated else None


def evaluate_rooms(config: PipelineConfig, records, client: ChatClient | None = None,
                   strategy: str = "polling", out_dir=None, config_dir: Path | None = None) -> dict:
    """Label every record's room and score the labels against ground truth.

    ``polling`` uses the full-score rule over ``poll_rounds`` rounds; ``direct``
    takes a single reply as the label. Accuracy is over annotated rooms and is
    ``"n/a"`` when nothing was annotated.
    """
    if strategy not in ("polling", "direct"):
        raise ValueError(f"unknown strategy {strategy!r}")
    records = Path(records)
    if not records.exists():
        raise FormatError(f"records file {records} not found")
    client = client or config.client.make_client(config_dir)
    labels = config.labels
    template = _Templates(config.templates_dir)["room_label"]
    rounds = config.poll_rounds if strategy == "polling" else 1
    out_dir = Path(out_dir) if out_dir else records.with_name(records.stem + "_eval")
    out_dir.mkdir(parents=True, exist_ok=True)
    transcript = out_dir / "transcripts.jsonl"
    transcript.unlink(missing_ok=True)

    malformed = []
    rows = []
    for n, line in enumerate(records.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            room, objects, truth = _parse_record(line, n)
        except MalformedRecord as exc:
            logger.warning("skipping malformed record: %s", exc)
            malformed.append(str(exc))
            continue
        poll = poll_room(client, room, objects, labels, rounds, template,
                         transcript_path=str(transcript))
        status = "ok"
        pred = None
        if not poll.complete:
            status = "incomplete"
        elif strategy == "polling":
            pred = decide_label(poll, labels)
        else:
            pred = labels.labels[int(np.argmax(poll.counts))]
        rows.append({"room_id": room.node_id, "truth": truth, "pred": pred, "status": status,
                     "poll": poll.summary(labels),
                     "categories": sorted({o.class_name for o in objects.values()})})

    annotated = [r for r in rows if r["pred"] is not None]
    correct = [r for r in annotated if _norm(r["pred"]) == _norm(r["truth"])]
    acc = _rate(len(correct), len(annotated))

    def breakdown(key_fn):
        table: dict[str, list[int]] = {}
        for r in rows:
            for c in key_fn(r):
                t = table.setdefault(c, [0, 0, 0])
                t[0] += 1
                if r["pred"] is not None:
                    t[1] += 1
                    t[2] += _norm(r["pred"]) == _norm(r["truth"])
        return [{"category": c, "rooms": t[0], "annotated": t[1], "correct": t[2],
                 "accuracy": _rate(t[2], t[1])} for c, t in sorted(table.items())]

    per_object = breakdown(lambda r: r["categories"])
    per_room = breakdown(lambda r: [r["truth"]])
    metrics = {
        "strategy": strategy,
        "rounds": rounds,
        "total_rooms": len(rows),
        "annotated": len(annotated),
        "correct": len(correct),
        "accuracy": acc if acc is not None else "n/a",
        "abstentions": [r["room_id"] for r in rows if r["pred"] is None and r["status"] == "ok"],
        "incomplete": [r["room_id"] for r in rows if r["status"] == "incomplete"],
        "malformed_records": len(malformed),
        "malformed": malformed,
        "per_object_category": per_object,
        "per_room_category": per_room,
    }
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n", encoding="utf-8")
    for name, table in (("per_object_category", per_object), ("per_room_category", per_room)):
        with open(out_dir / f"{name}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["category", "rooms", "annotated", "correct", "accuracy"])
            for t in table:
                w.writerow([t["category"], t["rooms"], t["annotated"], t["correct"],
                            "n/a" if t["accuracy"] is None else f"{t['accuracy']:.4f}"])
        plotting.category_accuracy(table, out_dir / f"{name}.png", name.replace("_", " "))
    with open(out_dir / "rooms.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["room_id", "ground_truth", "predicted", "status", "poll"])
        for r in rows:
            w.writerow([r["room_id"], r["truth"], r["pred"] or "", r["status"], r["poll"]])
    return metrics


# -- query / export -------------------------------------------------------------

@dataclass
class QueryResult:
    query: str
    matched_nodes: list[tuple[str, float, str]]
    mode: str
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"query": self.query, "mode": self.mode, "flags": self.flags,
                "matched_nodes": [{"id": i, "score": s, "rationale": r} for i, s, r in self.matched_nodes]}


def load_graph(path) -> SceneGraph:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read graph {path}: {exc}") from exc
    return deserialize(text)


def _desc_text(desc: DescriptionSet) -> str:
    return "; ".join(f"{k}: {t}" for k, t in desc)


def prompt_text(graph: SceneGraph, budget: int | None = None, grouped: bool = True) -> tuple[str, bool]:
    """Compact text form of the room and object layers.

    ``grouped`` gives one block per room with its member objects; otherwise
    all rooms come first and then the objects room by room, which is the
    order kept when the text is cut to ``budget`` characters. Returns the
    text and whether it was truncated.
    """
    rooms = graph.layer_nodes(KIND_LAYER["room"])
    objects = {n.id: n for n in graph.layer_nodes(KIND_LAYER["object"])}
    members = {r.id: sorted((v for v in graph.neighbors(r.id) if v in objects), key=id_sort_key)
               for r in rooms}
    assigned = {o for m in members.values() for o in m}

    def room_lines(r):
        head = f"Room {r.id}" + (f": {r.label}" if r.label else "")
        return [head] + ([f"  description: {_desc_text(r.descriptions)}"] if r.descriptions else [])

    def obj_line(o):
        n = objects[o]
        return f"  - {n.id} {n.label or 'object'}" + (f": {_desc_text(n.descriptions)}" if n.descriptions else "")

    lines: list[str] = []
    if grouped:
        for r in rooms:
            lines += room_lines(r) + [obj_line(o) for o in members[r.id]]
    else:
        for r in rooms:
            lines += room_lines(r)
        for r in rooms:
            if members[r.id]:
                lines.append(f"Objects in {r.id}:")
                lines += [obj_line(o) for o in members[r.id]]
    rest = sorted(set(objects) - assigned, key=id_sort_key)
    if rest:
        lines.append("Objects outside any room:")
        lines += [obj_line(o) for o in rest]
    if budget is None or sum(len(l) + 1 for l in lines) <= budget:
        return "\n".join(lines) + "\n", False
    kept, used = [], 0
    for i, line in enumerate(lines):
        marker = f"[truncated: {len(lines) - i} more lines]"
        if used + len(line) + 1 + len(marker) + 1 > budget:
            kept.append(marker)
            break
        kept.append(line)
        used += len(line) + 1
    return "\n".join(kept) + "\n", True


_STOP = frozenset(
    "a an the of in on at to for and or is are be with where what which find me my i it "
    "can could would should do does want need take get go there this that some any".split())


def _tokens(text: str) -> set[str]:
    out = set()
    for t in re.findall(r"[a-z0-9]+", text.lower().replace("_", " ")):
        if t in _STOP:
            continue
        out.add(t[:-1] if len(t) > 3 and t.endswith("s") and not t.endswith("ss") else t)
    return out


def lexical_query(graph: SceneGraph, text: str) -> QueryResult:
    """Rank nodes by query-token overlap; label hits count double."""
    q = _tokens(text)
    matches = []
    if q:
        for node in graph.nodes.values():
            lab = _tokens(node.label or "")
            desc = _tokens(" ".join(node.descriptions.texts()))
            hit_l, hit_d = q & lab, q & desc
            if not hit_l and not hit_d:
                continue
            score = (2 * len(hit_l) + len(hit_d)) / (3 * len(q))
            why = []
            if hit_l:
                why.append("label: " + ", ".join(sorted(hit_l)))
            if hit_d:
                why.append("descriptions: " + ", ".join(sorted(hit_d)))
            matches.append((node.id, round(score, 6), "; ".join(why)))
    matches.sort(key=lambda m: (-m[1], id_sort_key(m[0])))
    return QueryResult(text, matches, "lexical")


def llm_query(graph: SceneGraph, text: str, client: ChatClient, budget: int = 6000,
              template: PromptTemplate | None = None) -> QueryResult:
    body, truncated = prompt_text(graph, budget, grouped=False)
    template = template or PromptTemplate.load("query")
    prompt = render(template, {"node_info": body, "instructions": text, "label_set": ""})
    reply = client.chat(prompt, 0)
    seen, unknown = [], []
    for tok in _ID_TOKEN.findall(reply):
        if tok in graph.nodes:
            if tok not in seen:
                seen.append(tok)
        elif tok not in unknown:
            unknown.append(tok)
    flags = []
    if truncated:
        flags.append("prompt_truncated")
    if unknown:
        flags.append("unknown_node_in_response: " + ", ".join(unknown))
    matches = [(nid, round(1.0 / (k + 1), 6), f"returned at rank {k + 1}") for k, nid in enumerate(seen)]
    return QueryResult(text, matches, "llm", flags)


def query(graph_path, text: str, mode: str = "lexical", client: ChatClient | None = None,
          config: PipelineConfig | None = None) -> QueryResult:
    graph = load_graph(graph_path)
    if mode == "lexical":
        return lexical_query(graph, text)
    if mode != "llm":
        raise ValueError(f"unknown query mode {mode!r}")
    config = config or PipelineConfig()
    client = client or config.client.make_client()
    return llm_query(graph, text, client, config.query_char_budget,
                     _Templates(config.templates_dir)["query"])


EXPORT_FORMATS = ("json", "prompt", "ply-bundle")


def export(graph_path, fmt: str, out=None) -> list[Path]:
    """Write the graph in ``fmt``; returns the files written."""
    if fmt not in EXPORT_FORMATS:
        raise UnknownFormat(f"unknown export format {fmt!r}; choose from {', '.join(EXPORT_FORMATS)}")
    graph_path = Path(graph_path)
    graph = load_graph(graph_path)
    if fmt == "json":
        dest = Path(out) if out else graph_path.with_name(graph_path.stem + ".export.json")
        dest.write_text(serialize(graph), encoding="utf-8", newline="\n")
        return [dest]
    if fmt == "prompt":
        dest = Path(out) if out else graph_path.with_suffix(".prompt.txt")
        dest.write_text(prompt_text(graph)[0], encoding="utf-8", newline="\n")
        return [dest]
    dest = Path(out) if out else graph_path.with_name("ply_bundle")
    dest.mkdir(parents=True, exist_ok=True)
    base = graph_path.parent
    files = {}
    mesh_ref = graph.metadata.get("mesh")
    if mesh_ref:
        files["mesh"] = mesh_ref
    for node in graph.layer_nodes(KIND_LAYER["object"]):
        if not node.geometry_ref:
            raise FormatError(f"{node.id} has no geometry reference")
        files[node.id] = node.geometry_ref
    written, manifest = [], {}
    for key, ref in files.items():
        src = base / ref
        if not src.exists():
            raise FormatError(f"{key}: referenced geometry {src} not found")
        target = dest / ("mesh.ply" if key == "mesh" else f"{key}.ply")
        shutil.copyfile(src, target)
        manifest[key] = target.name
        written.append(target)
    man = dest / "manifest.json"
    man.write_text(json.dumps({"graph": graph_path.name, "files": manifest}, indent=2) + "\n",
                   encoding="utf-8")
    return written + [man]


__all__ = ["build", "evaluate_rooms", "query", "export", "QueryResult", "BuildResult",
           "PipelineError", "EmptyInput", "MalformedRecord", "UnknownFormat", "PipelineBusy",
           "StageError", "exit_code", "prompt_text", "lexical_query", "llm_query", "load_graph",
           "ConfigError", "TemplateError", "InvariantViolation"]
