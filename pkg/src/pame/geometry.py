"""Point clouds, normalization, camera rigs and a deterministic point-splat renderer."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

DEFAULT_RESOLUTION = 512
DEFAULT_CROP = 224
DEFAULT_DISTANCE = 2.5
DEFAULT_HALF_EXTENT = 1.05
DEFAULT_SPLAT_RADIUS = 2
BACKGROUND = (1.0, 1.0, 1.0)


class DegenerateGeometryError(ValueError):
    """Raised when a cloud has no spatial extent."""


@dataclass(frozen=True)
class PointCloud:
    coords: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        colors = np.ascontiguousarray(self.colors, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3 or coords.shape[0] < 1:
            raise ValueError(f"coords must be N x 3 with N >= 1, got {coords.shape}")
        if colors.shape != coords.shape:
            raise ValueError(f"colors shape {colors.shape} != coords shape {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise ValueError("coords contain non-finite values")
        if np.any(colors < 0.0) or np.any(colors > 1.0) or not np.all(np.isfinite(colors)):
            raise ValueError("colors must lie in [0, 1]")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "colors", colors)

    @property
    def n(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True)
class NormTransform:
    centroid: np.ndarray
    scale: float

    def __post_init__(self):
        object.__setattr__(self, "centroid", np.asarray(self.centroid, dtype=np.float64).reshape(3))
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive, got {self.scale}")

    def to_dict(self) -> dict:
        return {"centroid": self.centroid.tolist(), "scale": float(self.scale)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormTransform":
        return cls(np.asarray(d["centroid"]), float(d["scale"]))


IDENTITY_TRANSFORM = NormTransform(np.zeros(3), 1.0)


def normalize_to_unit_sphere(pc: PointCloud) -> tuple[PointCloud, NormTransform]:
    """Center the cloud on its centroid and scale it so the farthest point has norm 1."""
    centroid = pc.coords.mean(axis=0)
    radius = float(np.sqrt(((pc.coords - centroid) ** 2).sum(axis=1)).max())
    if not radius > 0.0:
        raise DegenerateGeometryError("all points coincide; cannot normalize a cloud with zero radius")
    t = NormTransform(centroid, 1.0 / radius)
    return apply_transform(pc, t), t


def apply_transform(pc: PointCloud, t: NormTransform) -> PointCloud:
    return PointCloud((pc.coords - t.centroid) * t.scale, pc.colors)


# ---------------------------------------------------------------------------
# cameras


@dataclass(frozen=True)
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    distance: float
    projection: str = "orthographic"
    half_extent: float = DEFAULT_HALF_EXTENT
    fov_deg: float = 40.0

    def __post_init__(self):
        for name in ("position", "look_at", "up"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(3))
        if not self.distance > 0:
            raise ValueError(f"camera distance must be positive, got {self.distance}")
        if self.projection not in ("orthographic", "perspective"):
            raise ValueError(f"unknown projection {self.projection!r}")
        fwd = self.look_at - self.position
        if np.linalg.norm(np.cross(fwd, self.up)) < 1e-9 * np.linalg.norm(fwd) * np.linalg.norm(self.up):
            raise ValueError("camera up vector is parallel to the viewing direction")

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (right, up, forward) orthonormal vectors."""
        fwd = self.look_at - self.position
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        return right, up, fwd

    def to_dict(self) -> dict:
        return {
            "position": self.position.tolist(),
            "look_at": self.look_at.tolist(),
            "up": self.up.tolist(),
            "distance": self.distance,
            "projection": self.projection,
            "half_extent": self.half_extent,
            "fov_deg": self.fov_deg,
        }


def _camera_towards_origin(direction: np.ndarray, distance: float) -> Camera:
    direction = direction / np.linalg.norm(direction)
    up = np.array([0.0, 0.0, 1.0])
    if abs(direction @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    return Camera(position=direction * distance, look_at=np.zeros(3), up=up, distance=distance)


def icosahedron_directions() -> np.ndarray:
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = []
    for a in (-1.0, 1.0):
        for b in (-phi, phi):
            verts += [(0.0, a, b), (a, b, 0.0), (b, 0.0, a)]
    v = np.array(verts)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def fibonacci_directions(k: int) -> np.ndarray:
    if k == 1:
        return np.array([[0.0, 0.0, 1.0]])
    golden = math.pi * (3.0 - math.sqrt(5.0))
    i = np.arange(k)
    z = 1.0 - 2.0 * (i + 0.5) / k
    r = np.sqrt(1.0 - z * z)
    theta = golden * i
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def rig_evenly_distributed(k: int = 12, distance: float = DEFAULT_DISTANCE) -> list[Camera]:
    """k cameras spread over the sphere: icosahedron vertices for k=12, Fibonacci lattice otherwise."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not distance > 0:
        raise ValueError(f"distance must be positive, got {distance}")
    dirs = icosahedron_directions() if k == 12 else fibonacci_directions(k)
    return [_camera_towards_origin(d, distance) for d in dirs]


def rig_perpendicular(distance: float = DEFAULT_DISTANCE) -> list[Camera]:
    """Six axis-aligned cameras in the order +x, -x, +y, -y, +z, -z."""
    if not distance > 0:
        raise ValueError(f"distance must be positive, got {distance}")
    dirs = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=np.float64)
    return [_camera_towards_origin(d, distance) for d in dirs]


# ---------------------------------------------------------------------------
# rendering


@dataclass(frozen=True)
class CropWindow:
    top: int
    left: int
    size: int

    def to_dict(self) -> dict:
        return {"top": self.top, "left": self.left, "size": self.size}


@dataclass
class RenderedView:
    pixels: np.ndarray
    camera: Camera
    transform: NormTransform
    source_id: str = ""
    crop: CropWindow | None = None
    camera_index: int | None = None
    occupancy: np.ndarray | None = field(default=None, repr=False)

    def metadata(self) -> dict:
        return {
            "source_id": self.source_id,
            "camera_index": self.camera_index,
            "camera": self.camera.to_dict(),
            "transform": self.transform.to_dict(),
            "crop": None if self.crop is None else self.crop.to_dict(),
        }


def project(coords: np.ndarray, cam: Camera, resolution: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Map points to integer pixel (row, col) and camera depth."""
    right, up, fwd = cam.basis()
    rel = coords - cam.position
    depth = rel @ fwd
    if cam.projection == "orthographic":
        denom = cam.half_extent
    else:
        denom = np.maximum(depth, 1e-12) * math.tan(math.radians(cam.fov_deg) / 2.0)
    x = ((coords - cam.look_at) @ right) / denom
    y = ((coords - cam.look_at) @ up) / denom
    col = np.floor((x * 0.5 + 0.5) * resolution).astype(np.int64)
    row = np.floor((0.5 - y * 0.5) * resolution).astype(np.int64)
    return row, col, depth


def _disk_offsets(radius: int) -> tuple[np.ndarray, np.ndarray]:
    d = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(d, d, indexing="ij")
    keep = dy * dy + dx * dx <= radius * radius
    return dy[keep], dx[keep]


def render(
    pc: PointCloud,
    cam: Camera,
    resolution: int = DEFAULT_RESOLUTION,
    *,
    transform: NormTransform = IDENTITY_TRANSFORM,
    splat_radius: int = DEFAULT_SPLAT_RADIUS,
    background: tuple[float, float, float] = BACKGROUND,
    source_id: str = "",
    camera_index: int | None = None,
    tol: float = 1e-3,
) -> RenderedView:
    """Z-buffer disk-splat rasterization of an already normalized cloud.

    The nearest point wins each pixel; equal depths go to the lower point index.
    """
    max_norm = float(np.sqrt((pc.coords ** 2).sum(axis=1)).max())
    if max_norm > 1.0 + tol:
        raise ValueError(f"cloud is not normalized (max norm {max_norm:.4f} > 1)")

    image = np.empty((resolution, resolution, 3), dtype=np.float64)
    image[:] = background
    occupancy = np.zeros((resolution, resolution), dtype=bool)

    row, col, depth = project(pc.coords, cam, resolution)
    front = depth > 0
    if not front.any():
        warnings.warn("no points in front of the camera; rendering background only", RuntimeWarning)
        return RenderedView(image, cam, transform, source_id, camera_index=camera_index, occupancy=occupancy)

    idx = np.nonzero(front)[0]
    dy, dx = _disk_offsets(splat_radius)
    rr = (row[idx, None] + dy[None, :]).ravel()
    cc = (col[idx, None] + dx[None, :]).ravel()
    pid = np.repeat(idx, dy.size)
    inside = (rr >= 0) & (rr < resolution) & (cc >= 0) & (cc < resolution)
    rr, cc, pid = rr[inside], cc[inside], pid[inside]
    if pid.size:
        flat = rr * resolution + cc
        order = np.lexsort((pid, depth[pid], flat))
        flat, pid = flat[order], pid[order]
        first = np.ones(flat.size, dtype=bool)
        first[1:] = flat[1:] != flat[:-1]
        win_pix, win_pid = flat[first], pid[first]
        image.reshape(-1, 3)[win_pix] = pc.colors[win_pid]
        occupancy.reshape(-1)[win_pix] = True
    return RenderedView(image, cam, transform, source_id, camera_index=camera_index, occupancy=occupancy)


def render_rig(
    pc: PointCloud,
    cameras: list[Camera],
    resolution: int = DEFAULT_RESOLUTION,
    *,
    transform: NormTransform | None = None,
    source_id: str = "",
    splat_radius: int = DEFAULT_SPLAT_RADIUS,
) -> list[RenderedView]:
    """Render every camera of a rig. Without a transform the cloud normalizes itself."""
    tol = 1e-3
    if transform is None:
        normed, transform = normalize_to_unit_sphere(pc)
    else:
        normed = apply_transform(pc, transform)
        # a reference transform applied to a distorted copy may push points past the unit ball;
        # those project outside the frame and are clipped
        tol = math.inf
    return [
        render(normed, cam, resolution, transform=transform, source_id=source_id,
               camera_index=i, splat_radius=splat_radius, tol=tol)
        for i, cam in enumerate(cameras)
    ]


def crop_window(resolution: int, size: int = DEFAULT_CROP, policy: str = "center", seed: int | None = None) -> CropWindow:
    if size > resolution:
        raise ValueError(f"crop size {size} exceeds resolution {resolution}")
    if policy == "center":
        off = (resolution - size) // 2
        return CropWindow(off, off, size)
    if policy == "random":
        rng = np.random.default_rng(seed)
        top, left = rng.integers(0, resolution - size + 1, size=2)
        return CropWindow(int(top), int(left), size)
    raise ValueError(f"unknown crop policy {policy!r}")


def crop(view: RenderedView, size: int = DEFAULT_CROP, policy: str = "center", seed: int | None = None,
         window: CropWindow | None = None) -> RenderedView:
    """Crop a square window; pass ``window`` to reuse the window chosen for a paired view."""
    res = view.pixels.shape[0]
    if window is None:
        window = crop_window(res, size, policy, seed)
    elif window.size > res:
        raise ValueError(f"crop size {window.size} exceeds resolution {res}")
    sl = (slice(window.top, window.top + window.size), slice(window.left, window.left + window.size))
    occ = None if view.occupancy is None else view.occupancy[sl].copy()
    return RenderedView(view.pixels[sl].copy(), view.camera, view.transform, view.source_id,
                        crop=window, camera_index=view.camera_index, occupancy=occ)


def crop_pair(a: RenderedView, b: RenderedView, size: int = DEFAULT_CROP, policy: str = "center",
              seed: int | None = None) -> tuple[RenderedView, RenderedView]:
    window = crop_window(a.pixels.shape[0], size, policy, seed)
    return crop(a, window=window), crop(b, window=window)


# ---------------------------------------------------------------------------
# I/O

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply(path: str | Path) -> PointCloud:
    """Read x, y, z and red, green, blue from an ascii or binary little-endian PLY."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    header = data[:end].decode("ascii").splitlines()

    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if parts[1] == "list":
                elements[-1][2].append((parts[-1], "list"))
            else:
                elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
    if not elements or elements[0][0] != "vertex":
        raise ValueError(f"{path}: first element must be 'vertex'")
    _, count, props = elements[0]
    if any(t == "list" for _, t in props):
        raise ValueError(f"{path}: list properties on vertices are not supported")
    names = [n for n, _ in props]
    for req in ("x", "y", "z"):
        if req not in names:
            raise ValueError(f"{path}: missing vertex property {req!r}")

    if fmt == "ascii":
        lines = data[body_start:].decode("ascii").split("\n")
        rows = [ln.split() for ln in lines[:count]]
        table = np.array(rows, dtype=np.float64)
        cols = {n: table[:, i] for i, n in enumerate(names)}
    elif fmt == "binary_little_endian":
        dt = np.dtype([(n, "<" + t) for n, t in props])
        arr = np.frombuffer(data, dtype=dt, count=count, offset=body_start)
        cols = {n: arr[n].astype(np.float64) for n in names}
    else:
        raise ValueError(f"{path}: unsupported PLY format {fmt!r}")

    coords = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    if all(c in cols for c in ("red", "green", "blue")):
        colors = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1) / 255.0
    else:
        colors = np.full_like(coords, 0.5)
    return PointCloud(coords, np.clip(colors, 0.0, 1.0))


def write_ply(path: str | Path, pc: PointCloud, binary: bool = True) -> None:
    rgb = np.round(pc.colors * 255.0).astype(np.uint8)
    header = (
        "ply\n"
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0\n"
        f"element vertex {pc.n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            dt = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("r", "u1"), ("g", "u1"), ("b", "u1")])
            arr = np.empty(pc.n, dtype=dt)
            arr["x"], arr["y"], arr["z"] = pc.coords.T.astype(np.float32)
            arr["r"], arr["g"], arr["b"] = rgb.T
            fh.write(arr.tobytes())
        else:
            for p, c in zip(pc.coords.astype(np.float32), rgb):
                fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}\n".encode("ascii"))


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_view(view: RenderedView, png_path: str | Path) -> None:
    """Write an 8-bit PNG plus a JSON sidecar next to it."""
    png_path = Path(png_path)
    Image.fromarray(to_uint8(view.pixels), mode="RGB").save(png_path)
    png_path.with_suffix(".json").write_text(json.dumps(view.metadata(), indent=2))


def render_crops(
    pc: PointCloud,
    cameras: list[Camera],
    resolution: int = DEFAULT_RESOLUTION,
    crop_size: int | None = DEFAULT_CROP,
    *,
    transform: NormTransform | None = None,
    splat_radius: int = DEFAULT_SPLAT_RADIUS,
) -> np.ndarray:
    """Render a rig and center-crop every view; returns uint8 (V, S, S, 3)."""
    views = render_rig(pc, cameras, resolution, transform=transform, splat_radius=splat_radius)
    if crop_size is not None:
        views = [crop(v, crop_size, "center") for v in views]
    return np.stack([to_uint8(v.pixels) for v in views])
