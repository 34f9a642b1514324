"""Layer-2: per-mask object instances, association, fusion and captioning."""

from __future__ import annotations

import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .fundamental import FrameObservation, SegMask
from .graph import DescriptionSet, id_sort_key
from .llm import ChatClient, ClientError, PromptTemplate, render


class ObjectLayerError(Exception):
    pass


class TooFewPoints(ObjectLayerError):
    pass


class MissingEmbedding(ObjectLayerError):
    pass


class EmptyResponse(ClientError):
    pass


class NoCaptions(ObjectLayerError):
    pass


@dataclass
class ObjectInstance:
    cloud: np.ndarray
    embedding: np.ndarray | None
    class_name: str
    source_frame: float = 0.0
    crop_ref: str | None = None

    def __post_init__(self):
        self.cloud = np.asarray(self.cloud, dtype=float).reshape(-1, 3)
        if not len(self.cloud):
            raise TooFewPoints("instance cloud is empty")
        if self.embedding is not None:
            self.embedding = np.asarray(self.embedding, dtype=float)
            if abs(np.linalg.norm(self.embedding) - 1.0) > 1e-4:
                raise ValueError("instance embedding must have unit norm")


@dataclass
class ObjectNode:
    node_id: str
    cloud: np.ndarray
    feature: np.ndarray
    instance_count: int = 1
    instance_captions: list[DescriptionSet] = field(default_factory=list)
    summary: DescriptionSet = field(default_factory=DescriptionSet)
    bbox_min: np.ndarray = None
    bbox_max: np.ndarray = None
    class_counts: Counter = field(default_factory=Counter)
    crops: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        self.cloud = np.asarray(self.cloud, dtype=float).reshape(-1, 3)
        if self.bbox_min is None:
            self.bbox_min = self.cloud.min(axis=0)
            self.bbox_max = self.cloud.max(axis=0)

    @property
    def class_name(self) -> str:
        """Majority class over fused instances, ties broken by name."""
        if not self.class_counts:
            return "object"
        return min(self.class_counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]

    @property
    def centroid(self) -> np.ndarray:
        return self.cloud.mean(axis=0)

    @classmethod
    def from_instance(cls, node_id: str, instance: ObjectInstance, leaf: float) -> "ObjectNode":
        if instance.embedding is None:
            raise MissingEmbedding("new object node needs an instance embedding")
        return cls(
            node_id=node_id,
            cloud=voxel_downsample(instance.cloud, leaf),
            feature=instance.embedding / np.linalg.norm(instance.embedding),
            bbox_min=instance.cloud.min(axis=0),
            bbox_max=instance.cloud.max(axis=0),
            class_counts=Counter({instance.class_name: 1}),
            crops=[(instance.class_name, instance.crop_ref)] if instance.crop_ref else [],
        )


@dataclass(frozen=True)
class SimilarityScore:
    geometric: float
    semantic: float
    combined: float


def voxel_downsample(points: np.ndarray, leaf: float) -> np.ndarray:
    """Centroid of the points in each occupied leaf cell, cells in sorted order."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if not len(points):
        return points
    cells = np.floor(points / leaf).astype(np.int64)
    _, inv, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    out = np.zeros((len(counts), 3))
    np.add.at(out, inv, points)
    return out / counts[:, None]


def remove_statistical_outliers(points: np.ndarray, k: int = 16, std_ratio: float = 2.0) -> np.ndarray:
    """Boolean keep-mask: mean k-NN distance within mean + std_ratio * std."""
    n = len(points)
    if n <= 2:
        return np.ones(n, bool)
    kk = min(k, n - 1)
    d, _ = cKDTree(points).query(points, k=kk + 1)
    mean_d = d[:, 1:].mean(axis=1)
    return mean_d <= mean_d.mean() + std_ratio * mean_d.std()


def extract_instance(frame: FrameObservation, mask: SegMask, min_points: int = 50,
                     require_embedding: bool = True, k: int = 16,
                     std_ratio: float = 2.0) -> ObjectInstance:
    """Back-project the masked valid depth pixels into a world-frame cloud.

    Outlier removal runs in the camera frame so that the kept point set does
    not depend on the pose.
    """
    frame.validate()
    if mask.pixels.shape != frame.depth.shape:
        raise ObjectLayerError("mask does not belong to this frame")
    if require_embedding and mask.embedding is None:
        raise MissingEmbedding(f"mask {mask.class_name!r} has no embedding")
    rows, cols = np.nonzero(mask.pixels & (frame.depth > 0))
    if len(rows) < min_points:
        raise TooFewPoints(f"{mask.class_name}: {len(rows)} valid points < {min_points}")
    cam = frame.pixel_rays(rows, cols)
    cam = cam[remove_statistical_outliers(cam, k, std_ratio)]
    return ObjectInstance(
        cloud=frame.to_world(cam),
        embedding=mask.embedding,
        class_name=mask.class_name,
        source_frame=frame.timestamp,
        crop_ref=mask.crop_ref,
    )


def similarity(instance: ObjectInstance, node: ObjectNode, voxel_size: float = 0.05,
               w_geometric: float = 0.5, w_semantic: float = 0.5) -> SimilarityScore:
    if instance.embedding is None:
        raise MissingEmbedding("similarity needs an instance embedding")
    if w_geometric < 0 or w_semantic < 0 or abs(w_geometric + w_semantic - 1.0) > 1e-9:
        raise ValueError("similarity weights must be non-negative and sum to 1")
    d, _ = cKDTree(node.cloud).query(instance.cloud, k=1, distance_upper_bound=voxel_size * (1 + 1e-9))
    geometric = float(np.mean(d <= voxel_size * (1 + 1e-9)))
    semantic = float(np.dot(instance.embedding, node.feature)
                     / (np.linalg.norm(instance.embedding) * np.linalg.norm(node.feature)))
    semantic = float(np.clip(semantic, -1.0, 1.0))
    combined = w_geometric * geometric + w_semantic * (semantic + 1.0) / 2.0
    return SimilarityScore(geometric, semantic, combined)


def associate(instance: ObjectInstance, nodes: list[ObjectNode], threshold: float = 0.55,
              **kwargs) -> str | None:
    """Best-scoring node id, or ``None`` when a new node should be created."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    best: tuple | None = None
    for node in nodes:
        s = similarity(instance, node, **kwargs).combined
        key = (-s, id_sort_key(node.node_id))
        if best is None or key < best[0]:
            best = (key, node.node_id, s)
    if best is None or best[2] < threshold:
        return None
    return best[1]


def fuse(node: ObjectNode, instance: ObjectInstance, leaf: float) -> ObjectNode:
    """Merge an associated instance into ``node`` in place and return it."""
    union = np.vstack([node.cloud, instance.cloud])
    node.cloud = voxel_downsample(union, leaf)
    if instance.embedding is not None:
        f = node.feature * node.instance_count + instance.embedding
        node.feature = f / np.linalg.norm(f)
    node.instance_count += 1
    node.bbox_min = np.minimum(node.bbox_min, instance.cloud.min(axis=0))
    node.bbox_max = np.maximum(node.bbox_max, instance.cloud.max(axis=0))
    node.class_counts[instance.class_name] += 1
    if instance.crop_ref:
        node.crops.append((instance.class_name, instance.crop_ref))
    return node


# -- captioning -------------------------------------------------------------

_KEY_ALIASES = {
    "state": "state", "object state": "state",
    "predicate": "predicate", "predicates": "predicate",
    "affordance": "affordance", "affordances": "affordance",
    "other": "other", "other attribute": "other", "other attributes": "other",
    "summary": "summary",
}
_LINE_RE = re.compile(r"^\s*(?:[-*•]\s*)?\**([A-Za-z][A-Za-z ]*?)\**\s*:\s*(.*)$")


def parse_description(text: str, allow_summary: bool = False) -> tuple[list[tuple[str, str]], list[str]]:
    """Split ``Key: text`` lines into keyed attributes and leftover prose lines."""
    keyed: list[tuple[str, str]] = []
    prose: list[str] = []
    for line in text.splitlines():
        if not line.strip():
            continue
        m = _LINE_RE.match(line)
        key = _KEY_ALIASES.get(m.group(1).strip().lower()) if m else None
        if key == "summary" and not allow_summary:
            key = None
        if key is None or not m.group(2).strip():
            prose.append(line.strip())
        else:
            keyed.append((key, m.group(2).strip()))
    return keyed, prose


def _collect(keyed: list[tuple[str, str]], extra_other: list[str]) -> DescriptionSet:
    merged: dict[str, list[str]] = {}
    out = DescriptionSet()
    for key, text in keyed:
        if key == "predicate":
            out.add(key, text)
        else:
            merged.setdefault(key, []).append(text)
    if extra_other:
        merged.setdefault("other", []).append(" ".join(extra_other))
    for key in ("state", "affordance", "other"):
        if key in merged:
            out.add(key, "; ".join(merged[key]))
    order = {"state": 0, "predicate": 1, "affordance": 2, "other": 3}
    return DescriptionSet(sorted(out, key=lambda kv: order[kv[0]]))


def parse_caption(text: str) -> DescriptionSet:
    """Parse an LVLM reply; unrecognised lines are gathered under ``other``."""
    if not text or not text.strip():
        raise EmptyResponse("empty caption response")
    keyed, prose = parse_description(text)
    return _collect(keyed, prose)


def format_description(desc: DescriptionSet) -> str:
    return "\n".join(f"{k}: {t}" for k, t in desc)


def caption_instance(client: ChatClient, instance: ObjectInstance, template: PromptTemplate,
                     instructions: str = "") -> DescriptionSet:
    if not instance.crop_ref:
        raise ObjectLayerError("instance has no crop reference to caption")
    prompt = render(template, {"node_info": instance.class_name, "instructions": instructions,
                               "label_set": ""})
    return parse_caption(client.chat(prompt, 0, attachment=instance.crop_ref))


def caption_crops(client: ChatClient, crops: list[tuple[str, str]], template: PromptTemplate,
                  instructions: str = "", workers: int | None = None) -> list[DescriptionSet]:
    """Offline batch captioning of saved ``(class_name, crop_ref)`` pairs."""
    def one(item):
        class_name, crop_ref = item
        prompt = render(template, {"node_info": class_name, "instructions": instructions,
                                   "label_set": ""})
        return parse_caption(client.chat(prompt, 0, attachment=crop_ref))

    workers = workers or client.max_concurrency
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, crops))


def parse_summary(text: str) -> DescriptionSet:
    """``summary`` entry first, then re-keyed attributes.

    Without an explicit ``Summary:`` line the summary is the prose of the
    reply, or failing that the attribute texts joined by ``"; "``.
    """
    if not text or not text.strip():
        raise EmptyResponse("empty summary response")
    keyed, prose = parse_description(text, allow_summary=True)
    summaries = [t for k, t in keyed if k == "summary"]
    attrs = [(k, t) for k, t in keyed if k != "summary"]
    if summaries:
        summary = " ".join(summaries + prose)
    elif prose:
        summary = " ".join(prose)
    else:
        summary = "; ".join(t for _, t in attrs)
    out = DescriptionSet([("summary", summary)])
    for k, t in _collect(attrs, []):
        out.add(k, t)
    return out


def summarize_node(client: ChatClient, node: ObjectNode, template: PromptTemplate,
                   instructions: str = "") -> DescriptionSet:
    if not node.instance_captions:
        raise NoCaptions(f"{node.node_id} has no instance captions")
    blocks = [format_description(c) for c in node.instance_captions]
    prompt = render(template, {"node_info": "\n\n".join(blocks), "instructions": instructions,
                               "label_set": ""})
    node.summary = parse_summary(client.chat(prompt, 0))
    return node.summary


class ObjectMap:
    """Running set of object nodes fed instance by instance."""

    def __init__(self, voxel_size: float = 0.05, threshold: float = 0.55,
                 w_geometric: float = 0.5, w_semantic: float = 0.5, layer: int = 2):
        self.voxel_size = voxel_size
        self.threshold = threshold
        self.weights = {"w_geometric": w_geometric, "w_semantic": w_semantic}
        self.layer = layer
        self.nodes: list[ObjectNode] = []

    def add(self, instance: ObjectInstance) -> str:
        match = associate(instance, self.nodes, self.threshold, voxel_size=self.voxel_size,
                          **self.weights)
        if match is None:
            node = ObjectNode.from_instance(f"L{self.layer}_{len(self.nodes)}", instance,
                                            self.voxel_size / 2)
            self.nodes.append(node)
            return node.node_id
        node = next(n for n in self.nodes if n.node_id == match)
        fuse(node, instance, self.voxel_size / 2)
        return node.node_id
