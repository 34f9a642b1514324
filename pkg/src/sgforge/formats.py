"""File formats: ASCII PLY geometry and the JSON Lines frame log."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .fundamental import FrameObservation, Mesh, SegMask


class FormatError(Exception):
    pass


# -- PLY --------------------------------------------------------------------

def write_ply(path, vertices, triangles=None, labels=None) -> Path:
    """ASCII PLY; per-vertex labels are stored as ``list uchar uchar label`` strings."""
    path = Path(path)
    vertices = np.asarray(vertices, dtype=float).reshape(-1, 3)
    triangles = np.zeros((0, 3), np.int64) if triangles is None else np.asarray(triangles).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(vertices)}",
             "property float x", "property float y", "property float z"]
    if labels is not None:
        lines.append("property list uchar uchar label")
    if len(triangles):
        lines += [f"element face {len(triangles)}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    for i, v in enumerate(vertices):
        row = f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f}"
        if labels is not None:
            code = labels[i].encode("utf-8")[:255]
            row += f" {len(code)}" + "".join(f" {b}" for b in code)
        lines.append(row)
    for t in triangles:
        lines.append(f"3 {int(t[0])} {int(t[1])} {int(t[2])}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    return path


def write_mesh(path, mesh: Mesh) -> Path:
    return write_ply(path, mesh.vertices, mesh.triangles, mesh.vertex_labels)


def read_ply(path) -> tuple[np.ndarray, np.ndarray, list[str] | None]:
    """Read back what :func:`write_ply` writes."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "ply":
        raise FormatError(f"{path}: not a PLY file")
    n_v = n_f = 0
    has_label = False
    i = 1
    while lines[i] != "end_header":
        parts = lines[i].split()
        if parts[:2] == ["element", "vertex"]:
            n_v = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_f = int(parts[2])
        elif parts[-1] == "label":
            has_label = True
        i += 1
    body = lines[i + 1:]
    verts = np.zeros((n_v, 3))
    labels = [] if has_label else None
    for k in range(n_v):
        vals = body[k].split()
        verts[k] = [float(x) for x in vals[:3]]
        if has_label:
            n = int(vals[3])
            labels.append(bytes(int(b) for b in vals[4:4 + n]).decode("utf-8"))
    faces = np.array([[int(x) for x in body[n_v + k].split()[1:4]] for k in range(n_f)],
                     dtype=np.int64).reshape(-1, 3)
    return verts, faces, labels


# -- frame log --------------------------------------------------------------

def write_depth_png(path, depth_m: np.ndarray) -> None:
    mm = np.clip(np.round(np.asarray(depth_m) * 1000.0), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


def read_depth_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 1000.0


def write_mask_png(path, index_image: np.ndarray) -> None:
    img = Image.fromarray(np.asarray(index_image, dtype=np.uint8), mode="P")
    rng = np.random.default_rng(0)
    palette = rng.integers(0, 256, size=(256, 3), dtype=np.uint8)
    palette[0] = 0
    img.putpalette(palette.reshape(-1).tolist())
    img.save(path)


def read_mask_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.int64)


def mask_table_path(mask_path) -> Path:
    return Path(mask_path).with_suffix(".json")


def _resolve(base: Path, ref: str) -> Path:
    p = Path(ref)
    return p if p.is_absolute() else base / p


def crop_reference(image_ref: str, mask_id: int, bbox) -> str:
    x0, y0, x1, y1 = bbox
    return f"{image_ref}#mask={mask_id}&bbox={x0},{y0},{x1},{y1}"


def parse_frame(record: dict, base: Path) -> FrameObservation:
    """One frame-log record -> :class:`FrameObservation` (loads the image files)."""
    try:
        pose = record["pose"]
        intr = record["intrinsics"]
        depth_ref = record["depth_path"]
    except KeyError as exc:
        raise FormatError(f"frame record missing {exc}") from exc
    depth_file = _resolve(base, depth_ref)
    if not depth_file.exists():
        raise FormatError(f"depth file {depth_file} not found")
    depth = read_depth_png(depth_file)
    masks = []
    mask_ref = record.get("mask_path")
    if mask_ref:
        mask_file = _resolve(base, mask_ref)
        table_file = mask_table_path(mask_file)
        if not mask_file.exists() or not table_file.exists():
            raise FormatError(f"mask file or class table missing for {mask_file}")
        index_img = read_mask_png(mask_file)
        table = json.loads(table_file.read_text(encoding="utf-8"))
        image_ref = record.get("rgb_path") or mask_ref
        for entry in table.get("masks", []):
            pix = index_img == int(entry["id"])
            if not pix.any():
                continue
            emb = entry.get("embedding")
            m = SegMask(class_name=entry["class_name"], confidence=float(entry.get("confidence", 1.0)),
                        pixels=pix, embedding=None if emb is None else np.asarray(emb, float),
                        mask_id=int(entry["id"]))
            m.crop_ref = crop_reference(image_ref, int(entry["id"]), m.bbox())
            masks.append(m)
    return FrameObservation(
        timestamp=float(record.get("timestamp", 0.0)),
        rotation=np.asarray(pose["rotation"], float),
        translation=np.asarray(pose["translation"], float),
        fx=float(intr["fx"]), fy=float(intr["fy"]), cx=float(intr["cx"]), cy=float(intr["cy"]),
        depth=depth, masks=masks,
    )


def iter_frame_log(path):
    """Yield ``(line_number, FrameObservation)`` for each non-blank record."""
    path = Path(path)
    base = path.parent
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{n}: {exc}") from exc
            try:
                yield n, parse_frame(record, base)
            except FormatError as exc:
                raise FormatError(f"{path}:{n}: {exc}") from exc


def frame_record(frame: FrameObservation, depth_path: str, mask_path: str | None) -> dict:
    return {
        "timestamp": frame.timestamp,
        "pose": {"rotation": frame.rotation.tolist(), "translation": frame.translation.tolist()},
        "intrinsics": {"fx": frame.fx, "fy": frame.fy, "cx": frame.cx, "cy": frame.cy},
        "depth_path": depth_path,
        "mask_path": mask_path,
    }
