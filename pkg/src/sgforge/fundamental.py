"""Layer-1: TSDF fusion with semantic voxel histograms, mesh extraction, places.

The grid is sparse: only voxels observed within the truncation band are
stored, kept as parallel arrays sorted by a packed voxel key.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage import measure, morphology

logger = logging.getLogger(__name__)

UNLABELED = "unlabeled"
WEIGHT_CAP = 100.0

_OFF = 1 << 20
_BITS = 21
_MASK = (1 << _BITS) - 1


class FundamentalLayerError(Exception):
    pass


class InvalidPose(FundamentalLayerError):
    pass


class InvalidFrame(FundamentalLayerError):
    pass


class EmptyGrid(FundamentalLayerError):
    pass


class NoFreeSpace(FundamentalLayerError):
    pass


def pack_keys(idx: np.ndarray) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64) + _OFF
    return (idx[..., 0] << (2 * _BITS)) | (idx[..., 1] << _BITS) | idx[..., 2]


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    out = np.stack([(keys >> (2 * _BITS)) & _MASK, (keys >> _BITS) & _MASK, keys & _MASK], axis=-1)
    return out - _OFF


@dataclass
class SegMask:
    class_name: str
    confidence: float
    pixels: np.ndarray
    embedding: np.ndarray | None = None
    crop_ref: str | None = None
    mask_id: int | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=bool)
        if not self.pixels.any():
            raise InvalidFrame(f"empty mask for {self.class_name!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidFrame(f"confidence {self.confidence} outside [0, 1]")
        if self.embedding is not None:
            self.embedding = np.asarray(self.embedding, dtype=float)
            if abs(np.linalg.norm(self.embedding) - 1.0) > 1e-4:
                raise InvalidFrame("mask embedding must have unit L2 norm")

    def bbox(self) -> tuple[int, int, int, int]:
        rows, cols = np.nonzero(self.pixels)
        return int(cols.min()), int(rows.min()), int(cols.max()), int(rows.max())


@dataclass
class FrameObservation:
    """One posed depth frame. ``rotation``/``translation`` map camera to world."""

    timestamp: float
    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    depth: np.ndarray
    masks: list[SegMask] = field(default_factory=list)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        self.depth = np.asarray(self.depth, dtype=float)

    def validate(self) -> None:
        r = self.rotation
        if not np.all(np.isfinite(r)) or np.abs(r @ r.T - np.eye(3)).max() > 1e-6 \
                or np.linalg.det(r) < 0:
            raise InvalidPose(f"frame t={self.timestamp}: rotation is not orthonormal")
        if not np.all(np.isfinite(self.translation)):
            raise InvalidPose(f"frame t={self.timestamp}: non-finite translation")
        if self.depth.ndim != 2:
            raise InvalidFrame("depth must be an HxW array")
        if not np.all(np.isfinite(self.depth)) or (self.depth < 0).any():
            raise InvalidFrame(f"frame t={self.timestamp}: depth must be finite and non-negative")
        for m in self.masks:
            if m.pixels.shape != self.depth.shape:
                raise InvalidFrame(f"mask {m.class_name!r} shape {m.pixels.shape} != depth shape")

    def pixel_rays(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Camera-frame points for pixels at their measured depth."""
        z = self.depth[rows, cols]
        x = (cols - self.cx) * z / self.fx
        y = (rows - self.cy) * z / self.fy
        return np.stack([x, y, z], axis=-1)

    def to_world(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.rotation.T + self.translation

    def label_image(self) -> tuple[np.ndarray, list[str]]:
        """Per-pixel class index; overlapping masks resolved by confidence."""
        names = sorted({m.class_name for m in self.masks} | {UNLABELED})
        lut = {n: i for i, n in enumerate(names)}
        out = np.full(self.depth.shape, lut[UNLABELED], dtype=np.int64)
        best = np.full(self.depth.shape, -1.0)
        for m in self.masks:
            take = m.pixels & (m.confidence > best)
            out[take] = lut[m.class_name]
            best[take] = m.confidence
        return out, names


class TsdfGrid:
    """Sparse truncated signed distance field with per-voxel label counts.

    SDF is positive on the camera side of a surface. Each frame contributes
    at most one weight-1 observation per voxel (the mean over the frame's
    rays through it); stored weights saturate at ``weight_cap``.
    """

    def __init__(self, voxel_size: float = 0.05, truncation: float = 0.15,
                 origin=(0.0, 0.0, 0.0), weight_cap: float = WEIGHT_CAP):
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if truncation <= 0:
            raise ValueError("truncation must be positive")
        self.voxel_size = float(voxel_size)
        self.truncation = float(truncation)
        self.origin = np.asarray(origin, dtype=float).reshape(3)
        self.weight_cap = float(weight_cap)
        self.keys = np.zeros(0, dtype=np.int64)
        self.sdf = np.zeros(0)
        self.weight = np.zeros(0)
        self.classes: list[str] = []
        self.counts = np.zeros((0, 0), dtype=np.int64)
        self.empty_frames = 0

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def indices(self) -> np.ndarray:
        return unpack_keys(self.keys)

    def centers(self, idx: np.ndarray | None = None) -> np.ndarray:
        idx = self.indices if idx is None else idx
        return self.origin + (idx + 0.5) * self.voxel_size

    def voxel_index(self, pts: np.ndarray) -> np.ndarray:
        return np.floor((np.asarray(pts) - self.origin) / self.voxel_size).astype(np.int64)

    def lookup(self, idx: np.ndarray) -> np.ndarray:
        """Slot of each voxel index, -1 where not stored."""
        k = pack_keys(idx)
        pos = np.searchsorted(self.keys, k)
        pos_c = np.minimum(pos, max(len(self.keys) - 1, 0))
        hit = (pos < len(self.keys)) & (self.keys[pos_c] == k) if len(self.keys) else np.zeros(k.shape, bool)
        return np.where(hit, pos_c, -1)

    def histogram(self, idx) -> dict[str, int]:
        slot = int(self.lookup(np.asarray(idx).reshape(1, 3))[0])
        if slot < 0:
            return {}
        return {c: int(n) for c, n in zip(self.classes, self.counts[slot]) if n}

    def total_label_count(self) -> int:
        return int(self.counts.sum())

    def _class_columns(self, names: list[str]) -> np.ndarray:
        for n in names:
            if n not in self.classes:
                self.classes.append(n)
        need = len(self.classes) - self.counts.shape[1]
        if need:
            self.counts = np.hstack([self.counts, np.zeros((len(self.keys), need), np.int64)])
        return np.array([self.classes.index(n) for n in names], dtype=np.int64)

    def merge(self, keys: np.ndarray, sdf: np.ndarray, weight: np.ndarray,
              label_keys: np.ndarray | None = None, label_cols: np.ndarray | None = None) -> None:
        """Fuse unique-keyed observations by weighted averaging."""
        pos = np.searchsorted(self.keys, keys)
        found = np.zeros(len(keys), bool)
        if len(self.keys):
            pc = np.minimum(pos, len(self.keys) - 1)
            found = (pos < len(self.keys)) & (self.keys[pc] == keys)
        slots = pos[found]
        w_old = self.weight[slots]
        w_new = weight[found]
        self.sdf[slots] = (self.sdf[slots] * w_old + sdf[found] * w_new) / (w_old + w_new)
        self.weight[slots] = np.minimum(w_old + w_new, self.weight_cap)

        fresh = ~found
        if fresh.any():
            all_keys = np.concatenate([self.keys, keys[fresh]])
            order = np.argsort(all_keys, kind="stable")
            self.keys = all_keys[order]
            self.sdf = np.concatenate([self.sdf, sdf[fresh]])[order]
            self.weight = np.concatenate([self.weight, np.minimum(weight[fresh], self.weight_cap)])[order]
            pad = np.zeros((int(fresh.sum()), self.counts.shape[1]), np.int64)
            self.counts = np.vstack([self.counts, pad])[order]

        if label_keys is not None and len(label_keys):
            slot = np.searchsorted(self.keys, label_keys)
            ok = (slot < len(self.keys))
            slot_c = np.minimum(slot, len(self.keys) - 1)
            ok &= self.keys[slot_c] == label_keys
            np.add.at(self.counts, (slot_c[ok], label_cols[ok]), 1)

    @classmethod
    def from_function(cls, fn, lo, hi, voxel_size: float = 0.05, truncation: float = 0.15,
                      origin=None, label: str | None = None) -> "TsdfGrid":
        """Sample an analytic signed distance ``fn(points)`` on voxel centres in [lo, hi)."""
        lo = np.asarray(lo, float)
        hi = np.asarray(hi, float)
        grid = cls(voxel_size, truncation, lo if origin is None else origin)
        i0 = grid.voxel_index(lo)
        i1 = grid.voxel_index(hi - 1e-9)
        axes = [np.arange(a, b + 1) for a, b in zip(i0, i1)]
        idx = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        d = np.asarray(fn(grid.centers(idx)), dtype=float)
        keep = np.abs(d) <= truncation
        keys = pack_keys(idx[keep])
        label_keys = label_cols = None
        if label is not None:
            cols = grid._class_columns([label])
            label_keys = keys
            label_cols = np.full(len(keys), cols[0])
        order = np.argsort(keys)
        grid.merge(keys[order], d[keep][order], np.ones(int(keep.sum())),
                   None if label_keys is None else label_keys[order],
                   None if label_cols is None else label_cols[order])
        return grid


def integrate_frame(grid: TsdfGrid, frame: FrameObservation) -> TsdfGrid:
    """Ray-cast one frame into ``grid`` (in place) and return it."""
    frame.validate()
    rows, cols = np.nonzero(frame.depth > 0)
    if len(rows) == 0:
        grid.empty_frames += 1
        logger.warning("frame t=%s has no valid depth; skipped", frame.timestamp)
        return grid

    vs, trunc = grid.voxel_size, grid.truncation
    pc = frame.pixel_rays(rows, cols)
    rng = np.linalg.norm(pc, axis=1)
    dirs = (pc / rng[:, None]) @ frame.rotation.T
    origin = frame.translation
    surface = origin + dirs * rng[:, None]

    step = vs / 2.0
    n = int(np.floor(trunc / step + 1e-9))
    offsets = step * np.arange(-n, n + 1)
    t = rng[:, None] + offsets[None, :]
    ray_id = np.broadcast_to(np.arange(len(rng))[:, None], t.shape)
    valid = t > 0
    pts = origin + dirs[:, None, :] * t[..., None]
    idx = grid.voxel_index(pts[valid])
    ray_id = ray_id[valid]
    centers = grid.centers(idx)
    # projective distance along the optical axis: measured depth minus voxel depth
    sdf = pc[ray_id, 2] - (centers - origin) @ frame.rotation[:, 2]
    keep = sdf >= -trunc
    idx, ray_id, sdf = idx[keep], ray_id[keep], np.minimum(sdf[keep], trunc)
    keys = pack_keys(idx)

    # one sample per (ray, voxel), then average rays per voxel
    pair = np.stack([ray_id.astype(np.int64), keys], axis=1)
    _, first = np.unique(pair, axis=0, return_index=True)
    keys, sdf = keys[first], sdf[first]
    ukeys, inv = np.unique(keys, return_inverse=True)
    mean_sdf = np.bincount(inv, weights=sdf) / np.bincount(inv)

    labels, names = frame.label_image()
    col_of = grid._class_columns(names)
    label_keys = pack_keys(grid.voxel_index(surface))
    label_cols = col_of[labels[rows, cols]]
    order = np.argsort(label_keys, kind="stable")
    grid.merge(ukeys, mean_sdf, np.ones(len(ukeys)), label_keys[order], label_cols[order])
    return grid


@dataclass
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    vertex_labels: list[str]

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.triangles)

    def surface_area(self) -> float:
        if not len(self.triangles):
            return 0.0
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return float(0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1).sum())

    def check(self) -> None:
        t = self.triangles
        if len(t) and (t.min() < 0 or t.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        if len(t) and ((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])).any():
            raise ValueError("degenerate triangle")
        if len(self.vertex_labels) != len(self.vertices):
            raise ValueError("one label per vertex required")


def _dense_block(grid: TsdfGrid):
    idx = grid.indices
    lo = idx.min(axis=0) - 1
    hi = idx.max(axis=0) + 1
    shape = tuple(hi - lo + 1)
    vol = np.full(shape, grid.truncation)
    known = np.zeros(shape, bool)
    local = idx - lo
    vol[tuple(local.T)] = grid.sdf
    known[tuple(local.T)] = True
    return lo, vol, known


def extract_mesh(grid: TsdfGrid) -> Mesh:
    """Zero-isosurface of the stored field.

    Unobserved voxels never take part: any vertex on a cube edge with an
    unobserved endpoint is dropped together with its triangles.
    """
    if len(grid) == 0:
        raise EmptyGrid("cannot extract a mesh from an empty grid")
    lo, vol, known = _dense_block(grid)
    if vol.min() > 0 or vol.max() < 0:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64), [])
    verts, faces, _, _ = measure.marching_cubes(vol, level=0.0, allow_degenerate=False)

    a = np.floor(verts + 1e-9).astype(np.int64)
    b = np.ceil(verts - 1e-9).astype(np.int64)
    a = np.clip(a, 0, np.array(vol.shape) - 1)
    b = np.clip(b, 0, np.array(vol.shape) - 1)
    good_v = known[tuple(a.T)] & known[tuple(b.T)]
    faces = faces[good_v[faces].all(axis=1)]
    used = np.unique(faces)
    remap = np.full(len(verts), -1, np.int64)
    remap[used] = np.arange(len(used))
    verts = verts[used]
    faces = remap[faces]

    world = grid.origin + (lo + verts + 0.5) * grid.voxel_size
    labels = _vertex_labels(grid, lo + verts)
    mesh = Mesh(world, faces, labels)
    mesh.check()
    return mesh


def _vertex_labels(grid: TsdfGrid, vox_coords: np.ndarray) -> list[str]:
    """Argmax of trilinearly interpolated corner histograms; ties by class name."""
    if not len(vox_coords):
        return []
    if not grid.classes:
        return [UNLABELED] * len(vox_coords)
    base = np.floor(vox_coords).astype(np.int64)
    frac = vox_coords - base
    hist = np.zeros((len(vox_coords), len(grid.classes)))
    for corner in np.ndindex(2, 2, 2):
        c = np.array(corner)
        w = np.prod(np.where(c == 1, frac, 1.0 - frac), axis=1)
        slot = grid.lookup(base + c)
        ok = slot >= 0
        hist[ok] += w[ok, None] * grid.counts[slot[ok]]
    order = np.argsort(grid.classes)  # lexicographic tie-break
    sorted_hist = hist[:, order]
    best = order[np.argmax(sorted_hist, axis=1)]
    out = [grid.classes[i] for i in best]
    empty = hist.sum(axis=1) <= 0
    return [UNLABELED if e else name for name, e in zip(out, empty)]


@dataclass
class PlacesGraph:
    positions: np.ndarray
    clearance: np.ndarray
    edges: list[tuple[int, int]]

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.clearance = np.asarray(self.clearance, dtype=float).reshape(-1)
        self.edges = sorted({(min(int(a), int(b)), max(int(a), int(b))) for a, b in self.edges if a != b})
        if len(self.positions) != len(self.clearance):
            raise ValueError("one clearance value per place")
        if (self.clearance <= 0).any():
            raise ValueError("place clearance must be positive")
        if any(b >= len(self.positions) for _, b in self.edges):
            raise ValueError("edge references a missing place")

    def __len__(self) -> int:
        return len(self.positions)

    def adjacency(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(len(self))]
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        return adj

    def components(self) -> list[list[int]]:
        adj = self.adjacency()
        seen = [False] * len(self)
        out = []
        for s in range(len(self)):
            if seen[s]:
                continue
            stack, comp = [s], []
            seen[s] = True
            while stack:
                u = stack.pop()
                comp.append(u)
                for v in adj[u]:
                    if not seen[v]:
                        seen[v] = True
                        stack.append(v)
            out.append(sorted(comp))
        return out


@dataclass
class FreeSpaceSlice:
    """Horizontal free-space map used to derive places."""

    free: np.ndarray
    occupied: np.ndarray
    clearance: np.ndarray
    origin_xy: np.ndarray
    z: float
    voxel_size: float

    def cell_of(self, xy: np.ndarray) -> np.ndarray:
        return np.floor((np.asarray(xy)[..., :2] - self.origin_xy) / self.voxel_size).astype(np.int64)

    def is_free(self, xy: np.ndarray) -> np.ndarray:
        c = self.cell_of(xy)
        inside = (c[..., 0] >= 0) & (c[..., 1] >= 0) & (c[..., 0] < self.free.shape[0]) \
            & (c[..., 1] < self.free.shape[1])
        out = np.zeros(c.shape[:-1], bool)
        out[inside] = self.free[c[inside][:, 0], c[inside][:, 1]]
        return out


def free_space_slice(grid: TsdfGrid, z: float, half_band: float = 0.0,
                     min_clearance: float | None = None) -> FreeSpaceSlice:
    """Enclosed free space around height ``z``.

    A column is occupied when any stored voxel with centre in
    ``[z - half_band, z + half_band]`` lies behind a surface (sdf <= 0).
    Unobserved cells connected to the map boundary are outside the mapped
    area; free space is the remainder. Regions whose peak clearance stays
    under ``min_clearance`` (wall pockets) are discarded.
    """
    vs = grid.voxel_size
    if len(grid) == 0:
        raise NoFreeSpace("grid is empty")
    idx = grid.indices
    zc = grid.origin[2] + (idx[:, 2] + 0.5) * vs
    k = int(np.floor((z - grid.origin[2]) / vs))
    on = (np.abs(zc - z) <= half_band + 1e-9) | (idx[:, 2] == k)
    if not on.any():
        raise NoFreeSpace(f"no observed voxels at slice z={z:.3f}")
    lo = idx[:, :2].min(axis=0) - 1
    hi = idx[:, :2].max(axis=0) + 1
    shape = tuple(hi - lo + 1)
    occupied = np.zeros(shape, bool)
    sl = idx[on, :2] - lo
    occ_vals = grid.sdf[on] <= 0
    occupied[sl[occ_vals, 0], sl[occ_vals, 1]] = True
    candidate = ~occupied
    lab, _ = ndimage.label(candidate)
    border = np.unique(np.concatenate([lab[0], lab[-1], lab[:, 0], lab[:, -1]]))
    free = candidate & ~np.isin(lab, border[border > 0])
    clearance = ndimage.distance_transform_edt(free) * vs
    min_clearance = 2 * vs if min_clearance is None else min_clearance
    lab, n = ndimage.label(free)
    if n:
        peak = ndimage.maximum(clearance, lab, index=np.arange(1, n + 1))
        drop = np.isin(lab, np.arange(1, n + 1)[np.asarray(peak) < min_clearance])
        free &= ~drop
        clearance[drop] = 0.0
    origin_xy = grid.origin[:2] + lo * vs
    return FreeSpaceSlice(free, occupied, clearance, origin_xy, float(z), vs)


def segment_is_free(fs: FreeSpaceSlice, a: np.ndarray, b: np.ndarray) -> bool:
    length = float(np.linalg.norm(b[:2] - a[:2]))
    n = max(2, int(np.ceil(length / (fs.voxel_size / 2))) + 1)
    s = np.linspace(0.0, 1.0, n)[:, None]
    return bool(fs.is_free(a[None, :2] * (1 - s) + b[None, :2] * s).all())


def build_places_graph(grid: TsdfGrid, agent_height: float, slice_height: float | None = None,
                       half_band: float | None = None, nms_radius: float | None = None,
                       max_edge_length: float | None = None, return_slice: bool = False):
    """Sparse graph of free-space places at the agent's traversal height.

    The slice sits at ``0.5 * agent_height`` by default; obstacles are taken
    from a band around it that stays one truncation distance plus a voxel
    clear of the floor (``z = 0``) and of the agent's top.

    Places sit on ridge cells of the clearance field (the medial axis of the
    free region), thinned by greedy non-maximum suppression in order of
    decreasing clearance. Two places are linked when they lie within
    ``max_edge_length`` of each other and the straight segment between them
    stays in free space.
    """
    if agent_height <= 0:
        raise ValueError("agent_height must be positive")
    vs = grid.voxel_size
    z = 0.5 * agent_height if slice_height is None else slice_height
    nms_radius = 2 * vs if nms_radius is None else nms_radius
    max_edge_length = 3 * nms_radius if max_edge_length is None else max_edge_length
    if half_band is None:
        half_band = max(0.0, min(z, agent_height - z) - grid.truncation - vs)
    fs = free_space_slice(grid, z, half_band)
    if not fs.free.any():
        raise NoFreeSpace("no enclosed free space at the traversal slice")

    ridge = morphology.medial_axis(fs.free, rng=0)
    cells = np.argwhere(ridge)
    cl = fs.clearance[ridge]
    order = np.lexsort((cells[:, 1], cells[:, 0], -cl))
    r_cells = int(np.floor(nms_radius / vs + 1e-9))
    offs = np.argwhere(np.ones((2 * r_cells + 1,) * 2, bool)) - r_cells
    offs = offs[(offs ** 2).sum(axis=1) <= r_cells ** 2]
    suppressed = np.zeros(fs.free.shape, bool)
    kept = []
    for i in order:
        cx, cy = cells[i]
        if suppressed[cx, cy]:
            continue
        kept.append(i)
        nb = offs + (cx, cy)
        ok = (nb[:, 0] >= 0) & (nb[:, 1] >= 0) & (nb[:, 0] < suppressed.shape[0]) & (nb[:, 1] < suppressed.shape[1])
        suppressed[nb[ok, 0], nb[ok, 1]] = True
    if not kept:
        raise NoFreeSpace("free space has no ridge cells")
    kept_cells = cells[kept]
    xy = fs.origin_xy + (kept_cells + 0.5) * vs
    positions = np.column_stack([xy, np.full(len(xy), z)])
    clearance = fs.clearance[kept_cells[:, 0], kept_cells[:, 1]]

    tree = cKDTree(xy)
    edges = []
    for a, b in sorted(tree.query_pairs(max_edge_length + 1e-9)):
        if segment_is_free(fs, positions[a], positions[b]):
            edges.append((a, b))
    places = PlacesGraph(positions, clearance, edges)
    return (places, fs) if return_slice else places
