"""Layers 3-5: room segmentation, LLM polling for room labels, floors.

Rooms come from a 0-dimensional persistence sweep over the places graph:
lowering a clearance threshold adds places one by one, and components that
survive long enough before merging into an older one are rooms.
"""

from __future__ import annotations

import heapq
import json
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .fundamental import PlacesGraph
from .graph import DescriptionSet, id_sort_key
from .llm import ChatClient, ClientError, PromptTemplate, digest, render
from .objects import format_description, parse_summary

OTHER_ROOM = "other room"
UNOBSERVED = "unobserved area"
DEFAULT_LABELS = ("kitchen", "bathroom", "bedroom", "living_room", "dining_room",
                  "home_office", "corridor", OTHER_ROOM)


class RoomLayerError(Exception):
    pass


class NoPlaces(RoomLayerError):
    pass


class IncompletePoll(RoomLayerError):
    pass


def _norm(label: str) -> str:
    return re.sub(r"[\s_]+", " ", label.strip().lower())


@dataclass(frozen=True)
class TypicalLabels:
    labels: tuple[str, ...] = DEFAULT_LABELS

    def __post_init__(self):
        labels = tuple(self.labels)
        object.__setattr__(self, "labels", labels)
        if len(labels) < 2:
            raise ValueError("need at least two typical labels")
        if any(not l.strip() for l in labels):
            raise ValueError("labels must be non-empty")
        normed = [_norm(l) for l in labels]
        if len(set(normed)) != len(normed):
            raise ValueError("labels must be distinct")
        if normed.count(OTHER_ROOM) != 1:
            raise ValueError(f"{OTHER_ROOM!r} must appear exactly once")

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    @property
    def other_index(self) -> int:
        return [_norm(l) for l in self.labels].index(OTHER_ROOM)

    def index(self, label: str) -> int:
        return [_norm(l) for l in self.labels].index(_norm(label))

    def parse(self, response: str) -> int:
        """Index of the label named in ``response``; unmatched replies -> other room.

        An exact (case-insensitive) reply wins; otherwise the earliest label
        mentioned in the text.
        """
        text = _norm(response.strip().strip(".\"'`*"))
        normed = [_norm(l) for l in self.labels]
        if text in normed:
            return normed.index(text)
        best = None
        for i, lab in enumerate(normed):
            pattern = r"(?<![a-z])" + r"[\s_]+".join(map(re.escape, lab.split())) + r"(?![a-z])"
            m = re.search(pattern, _norm(response))
            if m and (best is None or (m.start(), -len(lab)) < best[0]):
                best = ((m.start(), -len(lab)), i)
        return best[1] if best else self.other_index

    def as_prompt(self) -> str:
        return ", ".join(self.labels)


@dataclass
class PollResult:
    counts: np.ndarray
    rounds: int
    transcripts: list[str] = field(default_factory=list)
    complete: bool = True

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if (self.counts < 0).any():
            raise ValueError("counts must be non-negative")
        if self.complete and int(self.counts.sum()) != self.rounds:
            raise ValueError("complete poll counts must sum to the number of rounds")

    def summary(self, labels: TypicalLabels) -> str:
        parts = [(labels.labels[i], int(c)) for i, c in enumerate(self.counts) if c]
        parts.sort(key=lambda kv: (-kv[1], labels.index(kv[0])))
        return " | ".join(f"{l}: {c}" for l, c in parts)


@dataclass
class RoomNode:
    node_id: str
    place_members: set[int]
    object_members: set[str] = field(default_factory=set)
    label: str | None = None
    description: DescriptionSet = field(default_factory=DescriptionSet)
    poll: PollResult | None = None

    def __post_init__(self):
        if not self.place_members:
            raise ValueError(f"{self.node_id}: room needs at least one place")


@dataclass
class FloorNode:
    node_id: str
    room_members: list[str]
    height: float
    description: DescriptionSet = field(default_factory=DescriptionSet)


# -- segmentation -------------------------------------------------------------

def persistence_sweep(places: PlacesGraph):
    """Elder-rule sweep in order of decreasing clearance.

    Returns ``(events, members_at_death, roots)`` where each event is
    ``(root, birth, death)`` for a component that merged away, and roots are
    the survivors with their births.
    """
    n = len(places)
    adj = places.adjacency()
    order = sorted(range(n), key=lambda i: (-places.clearance[i], i))
    parent = list(range(n))
    birth = {}
    members: dict[int, list[int]] = {}
    added = [False] * n

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    merges = []
    for i in order:
        tau = float(places.clearance[i])
        added[i] = True
        birth[i] = tau
        members[i] = [i]
        for j in sorted(adj[i]):
            if not added[j]:
                continue
            ri, rj = find(i), find(j)
            if ri == rj:
                continue
            # elder = higher birth, then lower index
            elder, young = sorted((ri, rj), key=lambda r: (-birth[r], r))
            merges.append((young, elder, tau, list(members[young]), list(members[elder])))
            parent[young] = elder
            members[elder].extend(members.pop(young))
    roots = sorted({find(i) for i in range(n)})
    return merges, roots, members, birth


def segment_rooms(places: PlacesGraph, persistence_min: float = 0.3) -> list[RoomNode]:
    """Partition places into rooms.

    A component is a room when ``birth - death >= persistence_min``
    (survivors die at clearance 0). Each room is seeded with the places it
    held when it first met another room; leftover places join the room
    nearest by path length, and disconnected leftovers the nearest room in
    space. At least one room is always produced.
    """
    if len(places) == 0:
        raise NoPlaces("places graph is empty")
    merges, roots, final_members, birth = persistence_sweep(places)
    seeds: dict[int, list[int]] = {}
    persistent: set[int] = set()

    for young, elder, tau, young_m, elder_m in merges:
        if birth[young] - tau >= persistence_min:
            persistent.add(young)
            seeds.setdefault(young, young_m)
            seeds.setdefault(elder, elder_m)
    for r in roots:
        if birth[r] >= persistence_min:
            persistent.add(r)
            seeds.setdefault(r, final_members[r])
    if not persistent:
        best = min(roots, key=lambda r: (-birth[r], r))
        persistent.add(best)
        seeds[best] = final_members[best]
    # a seeded elder lives on only if it is itself persistent
    seeds = {r: m for r, m in seeds.items() if r in persistent}

    room_of = np.full(len(places), -1)
    seed_list = sorted(seeds.items(), key=lambda kv: min(kv[1]))
    for k, (_, mem) in enumerate(seed_list):
        for p in mem:
            if room_of[p] < 0:
                room_of[p] = k

    # multi-source Dijkstra over edge length
    dist = np.full(len(places), np.inf)
    heap = []
    for p in np.nonzero(room_of >= 0)[0]:
        dist[p] = 0.0
        heap.append((0.0, int(room_of[p]), int(p)))
    heapq.heapify(heap)
    adj = places.adjacency()
    while heap:
        d, k, u = heapq.heappop(heap)
        if d > dist[u] or room_of[u] != k:
            continue
        for v in adj[u]:
            nd = d + float(np.linalg.norm(places.positions[u] - places.positions[v]))
            if nd < dist[v] or (nd == dist[v] and k < room_of[v]):
                dist[v] = nd
                room_of[v] = k
                heapq.heappush(heap, (nd, k, v))
    orphans = np.nonzero(room_of < 0)[0]
    if len(orphans):
        seeded = np.nonzero(room_of >= 0)[0]
        for p in orphans:
            d = np.linalg.norm(places.positions[seeded] - places.positions[p], axis=1)
            room_of[p] = room_of[seeded[int(np.argmin(d))]]

    rooms = []
    for k in range(len(seed_list)):
        rooms.append(RoomNode(node_id=f"L3_{k}", place_members=set(np.nonzero(room_of == k)[0].tolist())))
    return rooms


def assign_objects(rooms: list[RoomNode], objects, places: PlacesGraph,
                   metadata: dict | None = None) -> list[RoomNode]:
    """Put each object into the room owning its nearest place.

    Distance ties go to the lower place index. ``objects`` yields items with
    ``node_id`` and ``centroid``.
    """
    owner = {}
    for r_i, room in enumerate(rooms):
        room.object_members = set()
        for p in room.place_members:
            owner[p] = r_i
    if len(places) == 0:
        return rooms
    for obj in objects:
        d = np.linalg.norm(places.positions - np.asarray(obj.centroid), axis=1)
        p = int(np.argmin(d))  # argmin returns the first (lowest) index on ties
        if p in owner:
            rooms[owner[p]].object_members.add(obj.node_id)
        else:
            centres = [places.positions[sorted(r.place_members)].mean(axis=0) for r in rooms]
            k = int(np.argmin([np.linalg.norm(c - obj.centroid) for c in centres]))
            rooms[k].object_members.add(obj.node_id)
            if metadata is not None:
                metadata.setdefault("unreachable_objects", []).append(obj.node_id)
    return rooms


# -- LLM annotation -----------------------------------------------------------

def room_evidence(room: RoomNode, objects: Mapping[str, object]) -> str:
    """Text block listing the room's objects and their descriptions.

    Objects need ``class_name`` and ``summary`` attributes.
    """
    ids = sorted(room.object_members, key=id_sort_key)
    counts = Counter(objects[i].class_name for i in ids)
    lines = ["Objects: " + ", ".join(f"{n} {c}" for c, n in sorted(counts.items()))]
    for i in ids:
        obj = objects[i]
        desc = format_description(obj.summary).replace("\n", "; ") if obj.summary else ""
        lines.append(f"- {obj.class_name}" + (f": {desc}" if desc else ""))
    return "\n".join(lines)


def poll_room(client: ChatClient, room: RoomNode, objects: Mapping[str, object],
              labels: TypicalLabels, rounds: int = 10, template: PromptTemplate | None = None,
              instructions: str = "", transcript_path: str | None = None) -> PollResult:
    """Query the LLM ``rounds`` times and count the label picked each round.

    A backend failure leaves an incomplete poll holding the rounds that did
    finish; incomplete polls never yield a label.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if template is None:
        template = PromptTemplate.load("room_label")
    prompt = render(template, {"node_info": room_evidence(room, objects),
                               "label_set": labels.as_prompt(), "instructions": instructions})

    def one(i):
        try:
            return client.chat(prompt, i)
        except ClientError:
            return None

    with ThreadPoolExecutor(max_workers=client.max_concurrency) as pool:
        replies = list(pool.map(one, range(rounds)))
    counts = np.zeros(len(labels), np.int64)
    transcripts = []
    records = []
    for i, reply in enumerate(replies):
        if reply is None:
            continue
        k = labels.parse(reply)
        counts[k] += 1
        transcripts.append(reply)
        records.append({"room_id": room.node_id, "round": i, "prompt_hash": digest(prompt, i),
                        "response": reply, "parsed_label": labels.labels[k]})
    if transcript_path:
        with open(transcript_path, "a", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    complete = len(transcripts) == rounds
    poll = PollResult(counts, rounds, transcripts, complete)
    room.poll = poll
    return poll


def decide_label(poll: PollResult, labels: TypicalLabels) -> str | None:
    """Label only on a full score; a unanimous "other room" abstains."""
    if not poll.complete or int(poll.counts.sum()) != poll.rounds:
        raise IncompletePoll("poll did not finish all rounds")
    if len(poll.counts) != len(labels):
        raise ValueError("poll counts do not match the label set")
    full = np.nonzero(poll.counts == poll.rounds)[0]
    if len(full) != 1 or int(full[0]) == labels.other_index:
        return None
    return labels.labels[int(full[0])]


def caption_room(client: ChatClient, room: RoomNode, objects: Mapping[str, object],
                 template: PromptTemplate | None = None, instructions: str = "") -> DescriptionSet:
    if not room.object_members:
        room.description = DescriptionSet([("summary", UNOBSERVED)])
        return room.description
    if template is None:
        template = PromptTemplate.load("room_caption")
    prompt = render(template, {"node_info": room_evidence(room, objects), "label_set": "",
                               "instructions": instructions})
    room.description = parse_summary(client.chat(prompt, 0))
    return room.description


def _median(values) -> float:
    return float(np.median(np.asarray(values, dtype=float)))


def cluster_floors(rooms: list[RoomNode], objects: Mapping[str, object], gap: float = 1.5,
                   places: PlacesGraph | None = None) -> list[FloorNode]:
    """Single-linkage clustering of room heights; a split wherever sorted heights jump by more than ``gap``."""
    if not rooms:
        return []
    heights = []
    for room in rooms:
        if room.object_members:
            heights.append(_median([np.asarray(objects[i].centroid)[2] for i in room.object_members]))
        elif places is not None:
            heights.append(_median(places.positions[sorted(room.place_members), 2]))
        else:
            raise RoomLayerError(f"{room.node_id}: no objects and no places to estimate height")
    order = sorted(range(len(rooms)), key=lambda i: (heights[i], id_sort_key(rooms[i].node_id)))
    clusters = [[order[0]]]
    for prev, cur in zip(order, order[1:]):
        if heights[cur] - heights[prev] > gap:
            clusters.append([cur])
        else:
            clusters[-1].append(cur)
    floors = []
    for k, members in enumerate(clusters):
        ids = sorted((rooms[i].node_id for i in members), key=id_sort_key)
        floors.append(FloorNode(f"L4_{k}", ids, _median([heights[i] for i in members])))
    return floors


def floor_evidence(floor: FloorNode, rooms: Mapping[str, RoomNode]) -> str:
    lines = []
    for rid in floor.room_members:
        room = rooms[rid]
        text = room.label or room.description.get("summary") or "undescribed area"
        lines.append(f"- {rid}: {text}")
    return "\n".join(lines)


def caption_floor(client: ChatClient, floor: FloorNode, rooms: Mapping[str, RoomNode],
                  template: PromptTemplate | None = None, instructions: str = "") -> DescriptionSet:
    if template is None:
        template = PromptTemplate.load("floor_caption")
    prompt = render(template, {"node_info": floor_evidence(floor, rooms), "label_set": "",
                               "instructions": instructions})
    floor.description = parse_summary(client.chat(prompt, 0))
    return floor.description
