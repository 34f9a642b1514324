"""Layered scene graph store with node-link JSON import/export.

Nodes live on layers 1..K (place, object, room, floor, building). An edge may
only join nodes on the same layer or on neighbouring layers.
"""

from __future__ import annotations

import copy
import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator

KIND_LAYER = {"place": 1, "object": 2, "room": 3, "floor": 4, "building": 5}
RESERVED_KEYS = ("state", "predicate", "affordance", "other", "summary")
DEFAULT_NUM_LAYERS = 5

_ID_RE = re.compile(r"^L(\d+)_(\d+)$")


class SceneGraphError(Exception):
    """Base class for graph errors."""


class DuplicateId(SceneGraphError):
    pass


class LayerOutOfRange(SceneGraphError):
    pass


class KindLayerMismatch(SceneGraphError):
    pass


class MissingNode(SceneGraphError):
    pass


class LayerAdjacencyViolation(SceneGraphError):
    pass


class SelfLoop(SceneGraphError):
    pass


class ParseError(SceneGraphError):
    pass


class SchemaError(SceneGraphError):
    pass


class InvariantViolation(SceneGraphError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


def id_sort_key(node_id: str):
    """Sort ``L{layer}_{n}`` ids numerically; anything else after, by string."""
    m = _ID_RE.match(node_id)
    if m:
        return (0, int(m.group(1)), int(m.group(2)), "")
    return (1, 0, 0, node_id)


class DescriptionSet:
    """Ordered ``(key, text)`` attributes of a node.

    Only the ``predicate`` key may repeat.
    """

    __slots__ = ("_items",)

    def __init__(self, items: Iterable[tuple[str, str]] = ()):
        self._items: list[tuple[str, str]] = []
        for key, text in items:
            self.add(key, text)

    def add(self, key: str, text: str) -> None:
        key = key.strip()
        if not key:
            raise ValueError("description key must be non-empty")
        if key != "predicate" and key in self.keys():
            raise ValueError(f"duplicate description key {key!r}")
        self._items.append((key, str(text)))

    def keys(self) -> list[str]:
        return [k for k, _ in self._items]

    def get(self, key: str, default: str | None = None) -> str | None:
        for k, t in self._items:
            if k == key:
                return t
        return default

    def texts(self) -> list[str]:
        return [t for _, t in self._items]

    def to_list(self) -> list[dict]:
        return [{"key": k, "text": t} for k, t in self._items]

    @classmethod
    def from_list(cls, items: Iterable[dict]) -> "DescriptionSet":
        return cls((d["key"], d["text"]) for d in items)

    def __iter__(self) -> Iterator[tuple[str, str]]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __bool__(self) -> bool:
        return bool(self._items)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DescriptionSet):
            return NotImplemented
        return self._items == other._items

    def __repr__(self) -> str:
        return f"DescriptionSet({self._items!r})"


@dataclass
class GraphNode:
    id: str
    layer: int
    kind: str
    centroid: tuple[float, float, float] = (0.0, 0.0, 0.0)
    descriptions: DescriptionSet = field(default_factory=DescriptionSet)
    geometry_ref: str | None = None
    label: str | None = None

    def __post_init__(self):
        self.centroid = tuple(float(c) for c in self.centroid)
        if len(self.centroid) != 3:
            raise ValueError("centroid must be a 3-vector")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "layer": self.layer,
            "kind": self.kind,
            "label": self.label,
            "centroid": list(self.centroid),
            "descriptions": self.descriptions.to_list(),
            "geometry": self.geometry_ref,
        }


@dataclass(frozen=True)
class Violation:
    kind: str
    ids: tuple[str, ...]
    message: str

    def __str__(self) -> str:
        return f"{self.kind}({', '.join(self.ids)}): {self.message}"


def _canonical(value):
    if isinstance(value, dict):
        return {str(k): _canonical(value[k]) for k in sorted(value, key=str)}
    if isinstance(value, (list, tuple)):
        return [_canonical(v) for v in value]
    return value


def _edge_key(u: str, v: str) -> tuple[str, str]:
    return (u, v) if id_sort_key(u) <= id_sort_key(v) else (v, u)


class SceneGraph:
    """Hierarchical scene graph ``G = (V, E)``.

    Single-writer: callers must serialise mutations. Reads and serialisation
    never mutate and are safe to run from several threads once writes stop.
    """

    def __init__(self, num_layers: int = DEFAULT_NUM_LAYERS, metadata: dict | None = None):
        if num_layers < 0:
            raise ValueError("num_layers must be non-negative")
        self.layers: list[int] = list(range(1, num_layers + 1))
        self.nodes: dict[str, GraphNode] = {}
        self.edges: set[tuple[str, str]] = set()
        self.metadata: dict = dict(metadata or {})
        self._counters: dict[int, int] = {}

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    # -- mutation -----------------------------------------------------------

    def new_id(self, layer: int) -> str:
        n = self._counters.get(layer, 0)
        while f"L{layer}_{n}" in self.nodes:
            n += 1
        self._counters[layer] = n + 1
        return f"L{layer}_{n}"

    def add_node(self, node: GraphNode) -> str:
        if node.id in self.nodes:
            raise DuplicateId(node.id)
        if node.layer not in self.layers:
            raise LayerOutOfRange(f"{node.id}: layer {node.layer} not in 1..{self.num_layers}")
        expected = KIND_LAYER.get(node.kind)
        if expected is None:
            raise KindLayerMismatch(f"{node.id}: unknown kind {node.kind!r}")
        if expected != node.layer:
            raise KindLayerMismatch(f"{node.id}: kind {node.kind} belongs to layer {expected}, got {node.layer}")
        self.nodes[node.id] = node
        m = _ID_RE.match(node.id)
        if m and int(m.group(1)) == node.layer:
            self._counters[node.layer] = max(self._counters.get(node.layer, 0), int(m.group(2)) + 1)
        return node.id

    def add_edge(self, u: str, v: str) -> tuple[str, str]:
        for n in (u, v):
            if n not in self.nodes:
                raise MissingNode(n)
        if u == v:
            raise SelfLoop(u)
        du = abs(self.nodes[u].layer - self.nodes[v].layer)
        if du > 1:
            raise LayerAdjacencyViolation(
                f"{u}@{self.nodes[u].layer} -- {v}@{self.nodes[v].layer}"
            )
        key = _edge_key(u, v)
        self.edges.add(key)
        return key

    def remove_node(self, node_id: str) -> None:
        if node_id not in self.nodes:
            raise MissingNode(node_id)
        del self.nodes[node_id]
        self.edges = {e for e in self.edges if node_id not in e}

    # -- queries ------------------------------------------------------------

    def layer_nodes(self, layer: int) -> list[GraphNode]:
        nodes = [n for n in self.nodes.values() if n.layer == layer]
        return sorted(nodes, key=lambda n: id_sort_key(n.id))

    def layer_counts(self) -> dict[int, int]:
        return {k: sum(1 for n in self.nodes.values() if n.layer == k) for k in self.layers}

    def neighbors(self, node_id: str) -> list[str]:
        out = [v if u == node_id else u for u, v in self.edges if node_id in (u, v)]
        return sorted(out, key=id_sort_key)

    def validate(self) -> list[Violation]:
        out: list[Violation] = []
        if self.nodes and not self.layers:
            out.append(Violation("LayerOutOfRange", (), "graph has nodes but no layers"))
        if self.layers != list(range(1, len(self.layers) + 1)):
            out.append(Violation("LayerOutOfRange", (), f"layers not contiguous from 1: {self.layers}"))
        seen: dict[str, str] = {}
        for key, node in self.nodes.items():
            if node.id != key:
                out.append(Violation("IdMismatch", (key, node.id), "store key differs from node id"))
            if node.id in seen:
                out.append(Violation("DuplicateId", (node.id,), f"id also stored under {seen[node.id]}"))
            seen.setdefault(node.id, key)
            if node.layer not in self.layers:
                out.append(Violation("LayerOutOfRange", (node.id,), f"layer {node.layer}"))
            if KIND_LAYER.get(node.kind) != node.layer:
                out.append(Violation("KindLayerMismatch", (node.id,), f"kind {node.kind} on layer {node.layer}"))
            for k, _ in node.descriptions:
                if not k:
                    out.append(Violation("SchemaError", (node.id,), "empty description key"))
        for u, v in sorted(self.edges):
            missing = [n for n in (u, v) if n not in self.nodes]
            if missing:
                out.append(Violation("MissingNode", (u, v), f"dangling endpoint {', '.join(missing)}"))
                continue
            if u == v:
                out.append(Violation("SelfLoop", (u,), "self loop"))
            elif abs(self.nodes[u].layer - self.nodes[v].layer) > 1:
                out.append(Violation("LayerAdjacencyViolation", (u, v),
                                     f"layers {self.nodes[u].layer} and {self.nodes[v].layer}"))
        return out

    def copy(self) -> "SceneGraph":
        return copy.deepcopy(self)

    # -- serialisation ------------------------------------------------------

    def to_dict(self) -> dict:
        nodes = sorted(self.nodes.values(), key=lambda n: id_sort_key(n.id))
        edges = sorted((_edge_key(u, v) for u, v in self.edges),
                       key=lambda e: (id_sort_key(e[0]), id_sort_key(e[1])))
        return {
            "layers": list(self.layers),
            "nodes": [n.to_dict() for n in nodes],
            "edges": [list(e) for e in edges],
            "metadata": _canonical(self.metadata),
        }

    def structurally_equal(self, other: "SceneGraph") -> bool:
        return self.to_dict() == other.to_dict()


def validate(graph: SceneGraph) -> list[Violation]:
    return graph.validate()


def serialize(graph: SceneGraph, indent: int | None = 2) -> str:
    """Node-link JSON text; byte-stable for structurally equal graphs."""
    violations = graph.validate()
    if violations:
        raise InvariantViolation(violations)
    text = json.dumps(graph.to_dict(), indent=indent, ensure_ascii=False, sort_keys=False,
                      allow_nan=False)
    return text + "\n"


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise SchemaError(msg)


def deserialize(text: str | bytes) -> SceneGraph:
    try:
        data = json.loads(text)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(str(exc)) from exc
    _require(isinstance(data, dict), "top level must be an object")
    for key in ("layers", "nodes", "edges", "metadata"):
        _require(key in data, f"missing top-level key {key!r}")
    layers = data["layers"]
    _require(isinstance(layers, list) and all(isinstance(k, int) for k in layers),
             "layers must be an array of ints")
    _require(isinstance(data["metadata"], dict), "metadata must be an object")
    graph = SceneGraph(num_layers=0, metadata=data["metadata"])
    graph.layers = list(layers)

    _require(isinstance(data["nodes"], list), "nodes must be an array")
    for raw in data["nodes"]:
        _require(isinstance(raw, dict), "node must be an object")
        for key in ("id", "layer", "kind", "label", "centroid", "descriptions", "geometry"):
            _require(key in raw, f"node missing {key!r}")
        _require(isinstance(raw["id"], str) and raw["id"], "node id must be a non-empty string")
        _require(isinstance(raw["layer"], int), f"{raw['id']}: layer must be int")
        _require(isinstance(raw["centroid"], list) and len(raw["centroid"]) == 3
                 and all(isinstance(c, (int, float)) for c in raw["centroid"]),
                 f"{raw['id']}: centroid must be [x,y,z]")
        _require(raw["label"] is None or isinstance(raw["label"], str), f"{raw['id']}: bad label")
        _require(raw["geometry"] is None or isinstance(raw["geometry"], str), f"{raw['id']}: bad geometry")
        _require(isinstance(raw["descriptions"], list), f"{raw['id']}: descriptions must be an array")
        try:
            desc = DescriptionSet.from_list(raw["descriptions"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{raw['id']}: bad descriptions: {exc}") from exc
        node = GraphNode(id=raw["id"], layer=raw["layer"], kind=raw["kind"],
                         centroid=tuple(raw["centroid"]), descriptions=desc,
                         geometry_ref=raw["geometry"], label=raw["label"])
        if node.id in graph.nodes:
            raise InvariantViolation([Violation("DuplicateId", (node.id,), "repeated in file")])
        graph.nodes[node.id] = node

    _require(isinstance(data["edges"], list), "edges must be an array")
    for e in data["edges"]:
        _require(isinstance(e, list) and len(e) == 2 and all(isinstance(x, str) for x in e),
                 "edge must be [id, id]")
        graph.edges.add(_edge_key(e[0], e[1]))

    violations = graph.validate()
    if violations:
        raise InvariantViolation(violations)
    for node in graph.nodes.values():
        m = _ID_RE.match(node.id)
        if m and int(m.group(1)) == node.layer:
            graph._counters[node.layer] = max(graph._counters.get(node.layer, 0), int(m.group(2)) + 1)
    return graph
