"""Shared builders for the test suite (analytic SDFs, random graphs, visited scenes)."""

from __future__ import annotations

import numpy as np

from sgforge.fundamental import FrameObservation, SegMask, TsdfGrid
from sgforge.graph import KIND_LAYER, DescriptionSet, GraphNode, SceneGraph

KINDS = {v: k for k, v in KIND_LAYER.items()}


def box_interior_sdf(boxes):
    """Signed distance to the union of axis-aligned free boxes (positive inside)."""
    boxes = [(np.asarray(lo, float), np.asarray(hi, float)) for lo, hi in boxes]

    def fn(p):
        out = np.full(len(p), -np.inf)
        for lo, hi in boxes:
            inside = np.all((p >= lo) & (p <= hi), axis=1)
            d_in = np.minimum(p - lo, hi - p).min(axis=1)
            d_out = np.linalg.norm(np.maximum(np.maximum(lo - p, 0), p - hi), axis=1)
            out = np.maximum(out, np.where(inside, d_in, -d_out))
        return out

    return fn


def room_grid(boxes, voxel_size=0.05, truncation=0.15, pad=0.3):
    lo = np.min([b[0] for b in boxes], axis=0) - pad
    hi = np.max([b[1] for b in boxes], axis=0) + pad
    return TsdfGrid.from_function(box_interior_sdf(boxes), lo, hi, voxel_size, truncation,
                                  origin=(0.0, 0.0, 0.0))


def random_graph(rng: np.random.Generator, max_nodes: int = 12, num_layers: int = 5) -> SceneGraph:
    g = SceneGraph(num_layers=num_layers, metadata={"seed": int(rng.integers(1 << 30)),
                                                   "name": "gé" if rng.random() < 0.3 else "g"})
    for _ in range(int(rng.integers(0, max_nodes + 1))):
        layer = int(rng.integers(1, num_layers + 1))
        desc = DescriptionSet()
        for key in rng.choice(["state", "predicate", "affordance", "other", "summary"],
                              size=int(rng.integers(0, 3)), replace=False):
            desc.add(str(key), f"text {rng.integers(100)}")
        if rng.random() < 0.3:
            desc.add("predicate", "next to something")
        g.add_node(GraphNode(g.new_id(layer), layer, KINDS[layer],
                             tuple(np.round(rng.normal(size=3), 3)), desc,
                             f"objects/{layer}.ply" if rng.random() < 0.3 else None,
                             "chair" if rng.random() < 0.5 else None))
    ids = sorted(g.nodes)
    for _ in range(2 * len(ids)):
        u, v = rng.choice(ids, 2) if len(ids) >= 2 else (None, None)
        if u is None or u == v or abs(g.nodes[u].layer - g.nodes[v].layer) > 1:
            continue
        g.add_edge(str(u), str(v))
    return g


def plane_frame(z: float = 2.0, size: int = 32, f: float = 32.0, translation=(0.0, 0.0, 0.0),
                class_name: str = "wall") -> FrameObservation:
    """Camera at the origin (identity pose) looking along +z at the plane ``z``."""
    depth = np.full((size, size), z - translation[2])
    mask = SegMask(class_name, 0.9, np.ones((size, size), bool))
    return FrameObservation(0.0, np.eye(3), np.asarray(translation, float), f, f,
                            (size - 1) / 2, (size - 1) / 2, depth, [mask])


def object_rooms(graph: SceneGraph) -> dict[str, str]:
    """Object node id -> id of the room node it hangs off."""
    out = {}
    for obj in graph.layer_nodes(2):
        rooms = [v for v in graph.neighbors(obj.id) if graph.nodes[v].layer == 3]
        assert len(rooms) == 1, f"{obj.id} belongs to {rooms}"
        out[obj.id] = rooms[0]
    return out


def rooms_match_ground_truth(graph: SceneGraph, scene) -> bool:
    """Every planted object lies in a graph room that holds exactly its scene room's objects."""
    planted = {b.class_name: b.room for b in scene.objects}
    found = {graph.nodes[o].label: r for o, r in object_rooms(graph).items()}
    if set(found) != set(planted):
        return False
    pairs = {(planted[c], found[c]) for c in planted}
    return len(pairs) == len({p[0] for p in pairs}) == len({p[1] for p in pairs})
