"""Synthetic two-room apartment rendered as posed depth frames with perfect masks.

Used as ground truth by the end-to-end tests: the room each planted object
sits in is known, and :func:`scene_responder` plays the LLM.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .formats import frame_record, write_depth_png, write_mask_png
from .fundamental import FrameObservation, SegMask

EMBED_DIM = 16

AFFORDANCES = {
    "bed": "a bed can be slept or sat on",
    "nightstand": "a nightstand can hold small items",
    "toilet": "a toilet can be used and flushed",
    "bathtub": "a bathtub can be filled with water to bathe",
}
ROOM_HINTS = {"bed": "bedroom", "nightstand": "bedroom", "toilet": "bathroom", "bathtub": "bathroom"}


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    class_name: str
    mask_id: int
    is_object: bool = False
    room: str | None = None

    def __post_init__(self):
        self.lo = np.asarray(self.lo, float)
        self.hi = np.asarray(self.hi, float)

    @property
    def center(self) -> np.ndarray:
        return (self.lo + self.hi) / 2


@dataclass
class Room:
    name: str
    room_type: str
    lo: tuple[float, float]
    hi: tuple[float, float]

    def contains(self, p) -> bool:
        return self.lo[0] <= p[0] <= self.hi[0] and self.lo[1] <= p[1] <= self.hi[1]


@dataclass
class Scene:
    boxes: list[Box]
    rooms: list[Room]
    camera_positions: list[tuple[float, float, float]]
    width: int = 96
    height: int = 72
    fov_deg: float = 90.0
    pitch_deg: float = -25.0
    yaw_steps: int = 12
    seed: int = 0
    embeddings: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def objects(self) -> list[Box]:
        return [b for b in self.boxes if b.is_object]

    def intrinsics(self) -> tuple[float, float, float, float]:
        f = (self.width / 2) / np.tan(np.radians(self.fov_deg) / 2)
        return f, f, (self.width - 1) / 2, (self.height - 1) / 2

    def embedding(self, class_name: str) -> np.ndarray:
        if class_name not in self.embeddings:
            rng = np.random.default_rng(sum(map(ord, class_name)) + 1000 * self.seed)
            v = rng.normal(size=EMBED_DIM)
            self.embeddings[class_name] = v / np.linalg.norm(v)
        return self.embeddings[class_name]

    def room_of(self, p) -> str | None:
        for r in self.rooms:
            if r.contains(p):
                return r.name
        return None


def two_room_scene() -> Scene:
    """Bedroom and bathroom joined by a 0.8 m door in a 0.2 m wall."""
    H, T = 2.5, 0.2
    boxes = [
        Box((-T, -T, -T), (8.2 + T, 4 + T, 0.0), "floor", 20),
        Box((-T, -T, H), (8.2 + T, 4 + T, H + T), "ceiling", 21),
        Box((-T, -T, 0), (0.0, 4 + T, H), "wall", 22),
        Box((8.2, -T, 0), (8.2 + T, 4 + T, H), "wall", 22),
        Box((-T, -T, 0), (8.2 + T, 0.0, H), "wall", 22),
        Box((-T, 4.0, 0), (8.2 + T, 4 + T, H), "wall", 22),
        Box((4.0, 0.0, 0), (4.2, 1.6, H), "wall", 22),
        Box((4.0, 2.4, 0), (4.2, 4.0, H), "wall", 22),
        Box((4.0, 1.6, 2.0), (4.2, 2.4, H), "wall", 22),
        Box((0.2, 1.0, 0.0), (1.6, 3.0, 0.5), "bed", 1, True, "A"),
        Box((0.2, 3.2, 0.0), (0.6, 3.7, 0.55), "nightstand", 2, True, "A"),
        Box((7.4, 0.3, 0.0), (8.0, 2.0, 0.55), "bathtub", 3, True, "B"),
        Box((6.0, 3.3, 0.0), (6.5, 3.8, 0.45), "toilet", 4, True, "B"),
    ]
    rooms = [Room("A", "bedroom", (0.0, 0.0), (4.0, 4.0)),
             Room("B", "bathroom", (4.2, 0.0), (8.2, 4.0))]
    cams = [(2.6, 2.0, 1.2), (3.0, 0.8, 1.2), (5.6, 2.0, 1.2), (5.2, 3.2, 1.2)]
    return Scene(boxes, rooms, cams)


def camera_rotation(yaw: float, pitch: float) -> np.ndarray:
    """Camera-to-world rotation; camera x right, y down, z forward; world z up."""
    f = np.array([np.cos(pitch) * np.cos(yaw), np.cos(pitch) * np.sin(yaw), np.sin(pitch)])
    right = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
    down = np.cross(f, right)
    return np.column_stack([right, down, f])


def raycast(boxes: list[Box], origin: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit parameter and box index per ray (inf / -1 on a miss)."""
    lo = np.stack([b.lo for b in boxes])[None]
    hi = np.stack([b.hi for b in boxes])[None]
    d = dirs[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=2)
    tmax = np.nanmin(np.maximum(t1, t2), axis=2)
    hit = (tmax >= tmin) & (tmin > 1e-6)
    t = np.where(hit, tmin, np.inf)
    idx = np.argmin(t, axis=1)
    best = t[np.arange(len(t)), idx]
    return best, np.where(np.isfinite(best), idx, -1)


def render_frames(scene: Scene, noise_seed: int = 0) -> list[FrameObservation]:
    fx, fy, cx, cy = scene.intrinsics()
    rows, cols = np.mgrid[0:scene.height, 0:scene.width]
    d_cam = np.stack([(cols - cx) / fx, (rows - cy) / fy, np.ones_like(cols, float)], -1).reshape(-1, 3)
    rng = np.random.default_rng(noise_seed)
    frames = []
    ts = 0.0
    for pos in scene.camera_positions:
        for s in range(scene.yaw_steps):
            R = camera_rotation(2 * np.pi * s / scene.yaw_steps, np.radians(scene.pitch_deg))
            t, which = raycast(scene.boxes, np.asarray(pos, float), d_cam @ R.T)
            depth = np.where(np.isfinite(t), t, 0.0).reshape(scene.height, scene.width)
            depth = np.round(depth * 1000.0) / 1000.0
            which = which.reshape(scene.height, scene.width)
            masks = []
            for b_i in sorted(set(which[which >= 0].tolist())):
                box = scene.boxes[b_i]
                pix = which == b_i
                emb = None
                if box.is_object:
                    e = scene.embedding(box.class_name) + rng.normal(scale=0.05, size=EMBED_DIM)
                    emb = e / np.linalg.norm(e)
                prev = next((m for m in masks if m.class_name == box.class_name and not box.is_object), None)
                if prev is not None:
                    prev.pixels = prev.pixels | pix
                    continue
                masks.append(SegMask(box.class_name, 0.9, pix, emb, mask_id=box.mask_id))
            frames.append(FrameObservation(ts, R, np.asarray(pos, float), fx, fy, cx, cy, depth, masks))
            ts += 0.1
    return frames


def write_frame_log(scene: Scene, out_dir: str | Path, name: str = "frames.jsonl") -> Path:
    """Write depth/mask PNGs, class tables and the JSON Lines log."""
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    log = out_dir / name
    with open(log, "w", encoding="utf-8", newline="\n") as fh:
        for i, frame in enumerate(render_frames(scene)):
            depth_ref = f"frames/{i:05d}_depth.png"
            mask_ref = f"frames/{i:05d}_mask.png"
            write_depth_png(out_dir / depth_ref, frame.depth)
            index = np.zeros(frame.depth.shape, np.uint8)
            table = []
            for m in frame.masks:
                index[m.pixels] = m.mask_id
                entry = {"id": m.mask_id, "class_name": m.class_name, "confidence": m.confidence}
                if m.embedding is not None:
                    entry["embedding"] = [round(float(x), 8) for x in m.embedding]
                table.append(entry)
            write_mask_png(out_dir / mask_ref, index)
            (out_dir / f"frames/{i:05d}_mask.json").write_text(
                json.dumps({"masks": table}, indent=1) + "\n", encoding="utf-8")
            fh.write(json.dumps(frame_record(frame, depth_ref, mask_ref)) + "\n")
    return log


def ground_truth(scene: Scene) -> dict[str, str]:
    """Planted object class -> room name."""
    return {b.class_name: b.room for b in scene.objects}


def scene_responder(prompt: str, round_index: int, attachment: str | None) -> str:
    """Deterministic stand-in for the LLM/LVLM on synthetic scenes."""
    m = re.search(r"Detected category: (\w+)", prompt)
    if m:
        c = m.group(1)
        return (f"State: the {c} is stationary and upright\n"
                f"Predicate: the {c} is on the floor\n"
                f"Affordance: {AFFORDANCES.get(c, 'it can be looked at')}\n"
                f"Other: the {c} is furniture and cannot be moved by the robot")
    if "Reconcile" in prompt:
        c = re.search(r"the (\w+) is stationary", prompt)
        c = c.group(1) if c else "object"
        return (f"Summary: a stationary {c} standing on the floor\n"
                f"Affordance: {AFFORDANCES.get(c, 'it can be looked at')}")
    if "Which room type" in prompt:
        objs = re.search(r"Objects: (.*)", prompt)
        hints = sorted({ROOM_HINTS[w] for w in re.findall(r"[a-z]+", objs.group(1) if objs else "")
                        if w in ROOM_HINTS})
        return hints[0] if len(hints) == 1 else "other room"
    if "infer the function" in prompt:
        objs = re.search(r"Objects: (.*)", prompt)
        return f"Summary: an area containing {objs.group(1) if objs else 'nothing'}"
    if "text-serialized 3D scene graph" in prompt:
        task = re.search(r"^Task: (.*)$", prompt, flags=re.M)
        words = set(re.findall(r"[a-z]+", task.group(1).lower())) if task else set()
        hits = [m.group(1) for m in re.finditer(r"^  - (L2_\d+) (\w+)", prompt, flags=re.M)
                if any(w.startswith(m.group(2)) or m.group(2).startswith(w) for w in words if len(w) > 3)]
        return "\n".join(hits) if hits else "none of the nodes"
    if "floor of a building" in prompt:
        n = len(re.findall(r"^- ", prompt, flags=re.M))
        return f"Summary: a floor with {n} rooms"
    return "other room"
