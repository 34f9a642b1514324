import itertools
import json
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgforge.fundamental import PlacesGraph
from sgforge.graph import DescriptionSet
from sgforge.llm import ChatClient, ClientError
from sgforge.rooms import (DEFAULT_LABELS, OTHER_ROOM, UNOBSERVED, IncompletePoll, NoPlaces,
                           PollResult, RoomNode, TypicalLabels, assign_objects, caption_room,
                           cluster_floors, decide_label, poll_room, segment_rooms)

LABELS = TypicalLabels(("kitchen", "bathroom", "bedroom", "living_room", "dining_room", OTHER_ROOM))


def doorway_places(door_clearance=0.15):
    profile = [0.4, 0.7, 0.9, 0.7, 0.4]
    clearance = profile + [door_clearance] + profile
    pos = [(0.5 * i, 0.0, 0.0) for i in range(len(clearance))]
    edges = [(i, i + 1) for i in range(len(clearance) - 1)]
    return PlacesGraph(pos, clearance, edges)


def blob_places(n=5, clearance=0.5):
    pos = [(0.4 * i, 0.4 * j, 0.0) for i in range(n) for j in range(n)]
    edges = [(i * n + j, i * n + j + 1) for i in range(n) for j in range(n - 1)]
    edges += [(i * n + j, (i + 1) * n + j) for i in range(n - 1) for j in range(n)]
    return PlacesGraph(pos, [clearance] * (n * n), edges)


def obj(node_id, cls, centroid=(0, 0, 0), summary=""):
    desc = DescriptionSet([("summary", summary)]) if summary else DescriptionSet()
    return SimpleNamespace(node_id=node_id, class_name=cls, centroid=np.asarray(centroid, float),
                           summary=desc)


def scripted(replies):
    return ChatClient(responder=lambda p, i, a: replies[i])


def test_typical_labels_validation():
    assert len(TypicalLabels()) == len(DEFAULT_LABELS)
    for bad in [("kitchen",), ("kitchen", "bathroom"), ("a", "a", OTHER_ROOM),
                ("a", " ", OTHER_ROOM), ("a", OTHER_ROOM, "Other Room")]:
        with pytest.raises(ValueError):
            TypicalLabels(bad)


def test_label_parsing():
    assert LABELS.parse("Kitchen") == 0
    assert LABELS.parse(" living room. ") == 3
    assert LABELS.parse("I think this is a bathroom, not a kitchen") == 1
    assert LABELS.parse("garage?") == LABELS.other_index
    assert LABELS.parse("kitchenette") == LABELS.other_index


def test_poll_matches_script():
    room = RoomNode("L3_0", {0}, {"L2_0"})
    objs = {"L2_0": obj("L2_0", "sink")}
    script = ["kitchen"] * 5 + ["bathroom"] * 3 + [OTHER_ROOM] * 2
    poll = poll_room(scripted(script), room, objs, LABELS, rounds=10)
    assert poll.counts.tolist() == [5, 3, 0, 0, 0, 2]
    assert poll.summary(LABELS) == "kitchen: 5 | bathroom: 3 | other room: 2"
    assert decide_label(poll, LABELS) is None
    assert room.poll is poll


def test_poll_unanimous_and_gibberish():
    room = RoomNode("L3_0", {0}, {"L2_0"})
    objs = {"L2_0": obj("L2_0", "bed")}
    poll = poll_room(scripted(["bedroom"] * 5), room, objs, LABELS, rounds=5)
    assert poll.counts.tolist() == [0, 0, 5, 0, 0, 0]
    assert decide_label(poll, LABELS) == "bedroom"
    poll = poll_room(scripted(["zxqv"] * 4), room, objs, LABELS, rounds=4)
    assert poll.counts[LABELS.other_index] == 4
    assert decide_label(poll, LABELS) is None


def test_poll_prompt_contains_evidence_and_labels():
    seen = []
    client = ChatClient(responder=lambda p, i, a: seen.append(p) or "kitchen")
    room = RoomNode("L3_0", {0}, {"L2_1", "L2_0"})
    objs = {"L2_0": obj("L2_0", "oven", summary="a hot oven"), "L2_1": obj("L2_1", "sink")}
    poll_room(client, room, objs, LABELS, rounds=2)
    assert len(set(seen)) == 1
    assert "a hot oven" in seen[0] and "sink" in seen[0] and LABELS.as_prompt() in seen[0]


def test_poll_failure_marks_incomplete(tmp_path):
    def flaky(p, i, a):
        if i == 3:
            raise ClientError("backend down")
        return "kitchen"

    room = RoomNode("L3_0", {0}, {"L2_0"})
    path = tmp_path / "polls.jsonl"
    poll = poll_room(ChatClient(responder=flaky), room, {"L2_0": obj("L2_0", "oven")}, LABELS,
                     rounds=5, transcript_path=str(path))
    assert not poll.complete and poll.counts.sum() == 4 and len(poll.transcripts) == 4
    with pytest.raises(IncompletePoll):
        decide_label(poll, LABELS)
    records = [json.loads(l) for l in path.read_text().splitlines()]
    assert [r["round"] for r in records] == [0, 1, 2, 4]
    assert set(records[0]) == {"room_id", "round", "prompt_hash", "response", "parsed_label"}
    assert len({r["prompt_hash"] for r in records}) == 4


def test_decide_label_examples():
    n = len(LABELS)

    def counts(*head):
        return list(head) + [0] * (n - len(head))

    assert decide_label(PollResult(counts(5, 5), 10), LABELS) is None
    assert decide_label(PollResult(counts(10), 10), LABELS) == "kitchen"
    assert decide_label(PollResult(counts(7, 2, 1), 10), LABELS) is None
    full_other = [0] * n
    full_other[LABELS.other_index] = 10
    assert decide_label(PollResult(full_other, 10), LABELS) is None
    with pytest.raises(ValueError):
        PollResult(counts(3), 10)


def compositions(total, parts):
    for cut in itertools.combinations(range(total + parts - 1), parts - 1):
        edges = (-1,) + cut + (total + parts - 1,)
        yield [edges[k + 1] - edges[k] - 1 for k in range(parts)]


def test_decide_label_over_all_compositions():
    labels = TypicalLabels(("kitchen", "bathroom", "bedroom", OTHER_ROOM))
    comps = list(compositions(5, 4))
    assert len(comps) == 56
    for c in comps:
        got = decide_label(PollResult(c, 5), labels)
        expected = labels.labels[c.index(5)] if 5 in c[:3] else None
        assert got == expected


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(list(LABELS.labels) + ["noise", "a kitchen maybe"]), min_size=1, max_size=12),
       st.randoms(use_true_random=False))
def test_poll_counts_are_order_independent(replies, rnd):
    room = RoomNode("L3_0", {0}, {"L2_0"})
    objs = {"L2_0": obj("L2_0", "x")}
    a = poll_room(scripted(replies), room, objs, LABELS, rounds=len(replies))
    shuffled = list(replies)
    rnd.shuffle(shuffled)
    b = poll_room(scripted(shuffled), room, objs, LABELS, rounds=len(replies))
    assert a.counts.sum() == len(replies)
    assert a.counts.tolist() == b.counts.tolist()
    assert decide_label(a, LABELS) == decide_label(b, LABELS)


def test_segment_two_rooms_through_doorway():
    rooms = segment_rooms(doorway_places(), persistence_min=0.3)
    assert len(rooms) == 2
    assert rooms[0].place_members == {0, 1, 2, 3, 4, 5}
    assert rooms[1].place_members == {6, 7, 8, 9, 10}
    # the second room lives from 0.9 down to the doorway at 0.15
    assert len(segment_rooms(doorway_places(), persistence_min=0.74)) == 2
    assert len(segment_rooms(doorway_places(), persistence_min=0.76)) == 1


def test_segment_blob_and_empty():
    rooms = segment_rooms(blob_places())
    assert len(rooms) == 1 and rooms[0].place_members == set(range(25))
    with pytest.raises(NoPlaces):
        segment_rooms(PlacesGraph(np.zeros((0, 3)), [], []))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.8))
def test_segment_partitions_places(seed, pmin):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 30))
    pos = rng.uniform(0, 5, (n, 3))
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.15]
    places = PlacesGraph(pos, rng.uniform(0.05, 1.0, n), edges)
    rooms = segment_rooms(places, pmin)
    members = [p for r in rooms for p in r.place_members]
    assert sorted(members) == list(range(n))
    assert [r.node_id for r in rooms] == [f"L3_{k}" for k in range(len(rooms))]


def test_assign_objects():
    places = doorway_places()
    rooms = segment_rooms(places)
    objs = [obj("L2_0", "bed", (0.9, 0.2, 0.5)), obj("L2_1", "sink", (4.6, 0.0, 0.5)),
            obj("L2_2", "mat", (2.75, 0.0, 0.0))]  # exactly between places 5 and 6
    meta = {}
    assign_objects(rooms, objs, places, meta)
    assert rooms[0].object_members == {"L2_0", "L2_2"}
    assert rooms[1].object_members == {"L2_1"}
    assert meta == {}
    assign_objects(rooms, [], places)
    assert all(not r.object_members for r in rooms)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_assign_objects_partitions(seed):
    rng = np.random.default_rng(seed)
    places = doorway_places()
    rooms = segment_rooms(places)
    objs = [obj(f"L2_{k}", "x", rng.uniform(-1, 6, 3)) for k in range(int(rng.integers(0, 15)))]
    assign_objects(rooms, objs, places)
    got = sorted(i for r in rooms for i in r.object_members)
    assert got == sorted(o.node_id for o in objs)


def test_caption_room():
    room = RoomNode("L3_0", {0}, {"L2_0", "L2_1"})
    objs = {"L2_0": obj("L2_0", "bed", summary="a large bed with white sheets"),
            "L2_1": obj("L2_1", "lamp", summary="a bedside lamp that is switched off")}
    desc = caption_room(ChatClient(echo=True), room, objs)
    text = desc.get("summary")
    assert "a large bed with white sheets" in text and "a bedside lamp that is switched off" in text
    empty = RoomNode("L3_1", {1})
    assert caption_room(ChatClient(echo=True), empty, objs).get("summary") == UNOBSERVED


def test_labeled_room_keeps_description():
    room = RoomNode("L3_0", {0}, {"L2_0"})
    objs = {"L2_0": obj("L2_0", "toilet", summary="a white toilet")}
    poll = poll_room(ChatClient(responder=lambda p, i, a: "bathroom"), room, objs, LABELS, rounds=3)
    room.label = decide_label(poll, LABELS)
    caption_room(ChatClient(responder=lambda p, i, a: "Summary: a small tiled bathroom"), room, objs)
    assert room.label == "bathroom"
    assert room.description.get("summary") == "a small tiled bathroom"


def test_cluster_floors_examples():
    rooms = [RoomNode(f"L3_{k}", {k}, {f"L2_{k}"}) for k in range(3)]
    objs = {f"L2_{k}": obj(f"L2_{k}", "x", (0, 0, z)) for k, z in enumerate([0.1, 0.2, 3.1])}
    floors = cluster_floors(rooms, objs, gap=1.0)
    assert [f.room_members for f in floors] == [["L3_0", "L3_1"], ["L3_2"]]
    assert len(cluster_floors(rooms, objs, gap=float("inf"))) == 1
    assert len(cluster_floors(rooms, objs, gap=0.0)) == 3
    assert len(cluster_floors(rooms[:1], objs)) == 1


def test_cluster_floors_place_fallback():
    places = doorway_places()
    rooms = segment_rooms(places)
    floors = cluster_floors(rooms, {}, places=places)
    assert len(floors) == 1 and floors[0].height == 0.0


def single_linkage_oracle(heights, gap):
    """Clusters = connected components of the graph linking heights closer than ``gap``."""
    n = len(heights)
    comp = list(range(n))
    for i in range(n):
        for j in range(n):
            if abs(heights[i] - heights[j]) <= gap:
                a, b = comp[i], comp[j]
                comp = [a if c == b else c for c in comp]
    return len(set(comp))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from([0.0, 0.3, 1.0, 2.9, 3.2, 6.0, 6.1]), min_size=1, max_size=8),
       st.floats(0.0, 4.0))
def test_cluster_floors_matches_single_linkage(heights, gap):
    rooms = [RoomNode(f"L3_{k}", {k}, {f"L2_{k}"}) for k in range(len(heights))]
    objs = {f"L2_{k}": obj(f"L2_{k}", "x", (0, 0, z)) for k, z in enumerate(heights)}
    floors = cluster_floors(rooms, objs, gap)
    assert len(floors) == single_linkage_oracle(heights, gap)
    assert sorted(r for f in floors for r in f.room_members) == sorted(r.node_id for r in rooms)
    assert len(cluster_floors(rooms, objs, 1e-9)) == len(set(heights))
