"""Synthetic RGB-D frames and frame-directory I/O.

The procedural generator renders simple scenes (tilted planes, spheres,
boxes over a sloped background) with an orthographic z-buffer. Color is
the object albedo shaded by a depth-derived Lambertian term plus a
distance falloff, so color genuinely carries depth information and the
reconstruction pretext task is learnable at desk scale. Object albedo
hue is tied to the object id with per-frame jitter, which makes the
patch-label probe learnable but locally ambiguous.

On disk a frame is ``<id>.color.ppm`` (binary P6, 8-bit) plus
``<id>.depth.pgm`` (binary P5, 16-bit big-endian, millimeters), with ids
zero-padded decimal; the corpus writer adds ``<id>.labels.txt`` holding
one patch-majority object id per grid cell.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .masking import PatchGrid

DEPTH_MIN = 0.5
DEPTH_MAX = 10.0
_LIGHT = np.array([0.45, 0.35, 0.82])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)


class DataError(RuntimeError):
    """Unreadable, unpaired, or malformed frame data."""


@dataclass
class RgbdFrame:
    """Paired color image and metric depth map with validity mask."""

    color: np.ndarray   # [3, h, w] float32 in [0, 1]
    depth: np.ndarray   # [1, h, w] float32 meters; 0 marks invalid
    valid: np.ndarray   # [1, h, w] bool, exactly depth > 0
    frame_id: str = ""

    def __post_init__(self):
        if self.color.ndim != 3 or self.color.shape[0] != 3:
            raise DataError(f"color must be [3, h, w], got {self.color.shape}")
        if self.depth.shape != (1,) + self.color.shape[1:]:
            raise DataError(f"depth {self.depth.shape} does not pair with color {self.color.shape}")
        if self.valid.shape != self.depth.shape:
            raise DataError(f"valid {self.valid.shape} does not pair with depth {self.depth.shape}")
        if not np.array_equal(self.valid, self.depth > 0):
            raise DataError("valid mask must equal depth > 0")


@dataclass(frozen=True)
class SceneObject:
    kind: str                  # "plane" | "sphere" | "box"
    albedo: tuple[float, float, float]
    center: tuple[float, float]   # normalized (u, v) in [0, 1]
    size: float                   # normalized half-extent / radius
    depth0: float                 # meters at the object center
    tilt: tuple[float, float]     # meters of depth change per unit u / v


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to render one frame, fully materialized.

    ``render_frame`` is a pure function of this record, so frames are
    bitwise reproducible from the seed that built the spec.
    """

    seed: int
    objects: tuple[SceneObject, ...] = ()
    background_depth: float = 6.0
    background_tilt: tuple[float, float] = (0.0, 0.0)
    background_albedo: tuple[float, float, float] = (0.55, 0.55, 0.55)
    gain: float = 1.0              # per-frame illumination
    hole_patches: int = 0          # invalid-depth blocks to punch
    hole_size: int = 8

    @property
    def n_objects(self) -> int:
        return len(self.objects)


_KINDS = ("plane", "sphere", "box")


def _id_albedo(rng: np.random.Generator, obj_id: int) -> tuple[float, float, float]:
    # Hue follows the object id (golden-ratio spacing) with enough jitter
    # that color alone does not pin the id down.
    hue = (obj_id * 0.381966 + rng.normal(0.0, 0.05)) % 1.0
    sat = float(np.clip(rng.normal(0.55, 0.12), 0.2, 0.9))
    val = float(np.clip(rng.normal(0.75, 0.12), 0.35, 1.0))
    return colorsys.hsv_to_rgb(hue, sat, val)


def random_scene(seed: int, n_objects: int | None = None,
                 hole_patches: int = 0, hole_size: int = 8) -> SceneSpec:
    """Draw a SceneSpec; deterministic per seed."""
    rng = np.random.default_rng(np.random.SeedSequence([0x5CE11E, seed]))
    if n_objects is None:
        n_objects = int(rng.integers(1, 9))
    objects = []
    for i in range(1, n_objects + 1):
        kind = _KINDS[rng.integers(0, len(_KINDS))]
        objects.append(SceneObject(
            kind=kind,
            albedo=_id_albedo(rng, i),
            center=(float(rng.uniform(0.1, 0.9)), float(rng.uniform(0.1, 0.9))),
            size=float(rng.uniform(0.10, 0.30)),
            depth0=float(rng.uniform(1.2, 4.5)),
            tilt=(float(rng.uniform(-1.5, 1.5)), float(rng.uniform(-1.5, 1.5))),
        ))
    return SceneSpec(
        seed=seed,
        objects=tuple(objects),
        background_depth=float(rng.uniform(5.0, 9.0)),
        background_tilt=(float(rng.uniform(-1.0, 1.0)), float(rng.uniform(-1.0, 1.0))),
        background_albedo=_id_albedo(rng, 0),
        gain=float(rng.uniform(0.6, 1.1)),
        hole_patches=hole_patches,
        hole_size=hole_size,
    )


def _object_depth(obj: SceneObject, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Per-pixel depth contribution; NaN outside the object's support."""
    du, dv = u - obj.center[0], v - obj.center[1]
    if obj.kind == "sphere":
        rho2 = du**2 + dv**2
        inside = rho2 <= obj.size**2
        bulge = np.sqrt(np.clip(1.0 - rho2 / obj.size**2, 0.0, None))
        z = obj.depth0 - 0.6 * obj.size * 4.0 * bulge
    elif obj.kind == "box":
        inside = (np.abs(du) <= obj.size) & (np.abs(dv) <= obj.size * 0.8)
        z = obj.depth0 + 0.25 * obj.tilt[0] * du + 0.25 * obj.tilt[1] * dv
    else:  # tilted plane patch
        inside = (np.abs(du) <= obj.size * 1.2) & (np.abs(dv) <= obj.size)
        z = obj.depth0 + obj.tilt[0] * du + obj.tilt[1] * dv
    return np.where(inside, z, np.nan)


def _render_fields(spec: SceneSpec, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """(depth [h, w], id map [h, w]); nearest surface wins each pixel."""
    v, u = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    depth = spec.background_depth + spec.background_tilt[0] * (u - 0.5) \
        + spec.background_tilt[1] * (v - 0.5)
    ids = np.zeros((h, w), dtype=np.int64)
    for i, obj in enumerate(spec.objects, start=1):
        z = _object_depth(obj, u, v)
        closer = ~np.isnan(z) & (z < depth)
        depth = np.where(closer, z, depth)
        ids = np.where(closer, i, ids)
    return np.clip(depth, DEPTH_MIN, DEPTH_MAX), ids


def render_frame(spec: SceneSpec, h: int, w: int) -> RgbdFrame:
    """Orthographic z-buffer render; bitwise deterministic per spec."""
    depth, ids = _render_fields(spec, h, w)

    # Lambertian shading from depth-derived normals, plus distance
    # falloff: both tie color to geometry so depth is learnable from RGB.
    gy, gx = np.gradient(depth)
    normal = np.stack([-gx * w, -gy * h, np.ones_like(depth)], axis=-1)
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
    lambert = np.clip(normal @ _LIGHT, 0.0, 1.0)
    falloff = 1.0 - 0.55 * (depth - DEPTH_MIN) / (DEPTH_MAX - DEPTH_MIN)

    palette = np.array([spec.background_albedo] + [o.albedo for o in spec.objects])
    albedo = palette[ids]                                  # [h, w, 3]
    shade = spec.gain * (0.25 + 0.75 * lambert) * falloff  # [h, w]
    color = np.clip(albedo * shade[..., None], 0.0, 1.0)

    if spec.hole_patches > 0:
        rng = np.random.default_rng(np.random.SeedSequence([0x401E5, spec.seed]))
        s = spec.hole_size
        for _ in range(spec.hole_patches):
            r0 = int(rng.integers(0, max(h - s, 0) + 1))
            c0 = int(rng.integers(0, max(w - s, 0) + 1))
            depth[r0:r0 + s, c0:c0 + s] = 0.0

    depth = depth[None].astype(np.float32)
    return RgbdFrame(
        color=np.ascontiguousarray(color.transpose(2, 0, 1)).astype(np.float32),
        depth=depth,
        valid=depth > 0,
        frame_id=f"{spec.seed:06d}",
    )


def label_patches(spec: SceneSpec, grid: PatchGrid) -> np.ndarray:
    """Majority object id per patch (background = 0), [n] int64."""
    _, ids = _render_fields(spec, grid.image_h, grid.image_w)
    p = grid.patch
    blocks = ids.reshape(grid.rows, p, grid.cols, p).transpose(0, 2, 1, 3).reshape(grid.n, p * p)
    out = np.empty(grid.n, dtype=np.int64)
    for i in range(grid.n):
        out[i] = np.bincount(blocks[i]).argmax()  # ties: smallest id
    return out


# --- netpbm I/O ---


def _write_tokens_header(kind: bytes, w: int, h: int, maxval: int) -> bytes:
    return b"%s\n%d %d\n%d\n" % (kind, w, h, maxval)


def _read_header(data: bytes, magic: bytes, path: Path) -> tuple[int, int, int, int]:
    """Parse a binary netpbm header, returning (w, h, maxval, offset)."""
    if not data.startswith(magic):
        raise DataError(f"{path}: expected {magic.decode()} file")
    fields: list[int] = []
    i = 2
    while len(fields) < 3:
        if i >= len(data):
            raise DataError(f"{path}: truncated header")
        ch = data[i:i + 1]
        if ch == b"#":                       # comment to end of line
            i = data.index(b"\n", i) + 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j:j + 1].isspace():
                j += 1
            fields.append(int(data[i:j]))
            i = j
    return fields[0], fields[1], fields[2], i + 1  # single whitespace after maxval


def write_ppm(path: Path, color: np.ndarray) -> None:
    """[3, h, w] float in [0, 1] -> binary 8-bit P6."""
    h, w = color.shape[1:]
    rgb = np.clip(np.rint(color * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Path(path).write_bytes(_write_tokens_header(b"P6", w, h, 255) + rgb.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h, maxval, off = _read_header(data, b"P6", Path(path))
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit color supported, maxval={maxval}")
    raw = np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=off)
    if raw.size != h * w * 3:
        raise DataError(f"{path}: truncated pixel data")
    return np.ascontiguousarray(raw.reshape(h, w, 3).transpose(2, 0, 1)).astype(np.float32) / 255.0


def write_pgm16(path: Path, values: np.ndarray) -> None:
    """[h, w] uint16 -> binary big-endian P5 with maxval 65535."""
    arr = np.asarray(values, dtype=np.uint16)
    h, w = arr.shape
    Path(path).write_bytes(_write_tokens_header(b"P5", w, h, 65535) + arr.astype(">u2").tobytes())


def read_pgm16(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h, maxval, off = _read_header(data, b"P5", Path(path))
    if maxval != 65535:
        raise DataError(f"{path}: expected 16-bit depth, maxval={maxval}")
    raw = np.frombuffer(data, dtype=">u2", count=h * w, offset=off)
    if raw.size != h * w:
        raise DataError(f"{path}: truncated pixel data")
    return raw.reshape(h, w).astype(np.uint16)


def depth_to_millimeters(depth_m: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(depth_m * 1000.0), 0, 65535).astype(np.uint16)


def write_frame(dir_path: Path, frame: RgbdFrame, labels: np.ndarray | None = None) -> None:
    dir_path = Path(dir_path)
    write_ppm(dir_path / f"{frame.frame_id}.color.ppm", frame.color)
    write_pgm16(dir_path / f"{frame.frame_id}.depth.pgm", depth_to_millimeters(frame.depth[0]))
    if labels is not None:
        (dir_path / f"{frame.frame_id}.labels.txt").write_text(
            " ".join(str(int(x)) for x in labels) + "\n")


def load_frame(dir_path: Path, frame_id: str) -> RgbdFrame:
    color_path = Path(dir_path) / f"{frame_id}.color.ppm"
    depth_path = Path(dir_path) / f"{frame_id}.depth.pgm"
    if not depth_path.exists():
        raise DataError(f"{color_path.name} has no paired depth file {depth_path.name}")
    color = read_ppm(color_path)
    depth_mm = read_pgm16(depth_path)
    if depth_mm.shape != color.shape[1:]:
        raise DataError(f"{depth_path.name}: depth {depth_mm.shape} does not pair with "
                        f"color {color.shape[1:]}")
    depth = (depth_mm.astype(np.float32) / 1000.0)[None]
    return RgbdFrame(color=color, depth=depth, valid=depth > 0, frame_id=frame_id)


def load_labels(dir_path: Path, frame_id: str) -> np.ndarray:
    path = Path(dir_path) / f"{frame_id}.labels.txt"
    try:
        return np.array([int(x) for x in path.read_text().split()], dtype=np.int64)
    except FileNotFoundError:
        raise DataError(f"missing label file {path.name}")
    except ValueError:
        raise DataError(f"malformed label file {path.name}")


def frame_ids(dir_path: Path) -> list[str]:
    return sorted(p.name[:-len(".color.ppm")] for p in Path(dir_path).glob("*.color.ppm"))


def load_frame_dir(dir_path: Path, stride: int = 1) -> Iterator[RgbdFrame]:
    """Yield every ``stride``-th frame of the directory, sorted by id."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ids = frame_ids(dir_path)
    known = set(ids)
    for p in Path(dir_path).glob("*.depth.pgm"):
        stem = p.name[:-len(".depth.pgm")]
        if stem not in known:
            raise DataError(f"{p.name} has no paired color file {stem}.color.ppm")
    for frame_id in ids[::stride]:
        yield load_frame(dir_path, frame_id)


def generate_corpus(out_dir: Path, n_train: int, n_val: int, h: int, w: int,
                    patch: int, seed: int, hole_patches: int = 0) -> PatchGrid:
    """Write a train/ + val/ synthetic corpus in the frame-dir format."""
    grid = PatchGrid(h, w, patch)
    out_dir = Path(out_dir)
    for split, count, offset in (("train", n_train, 0), ("val", n_val, n_train)):
        split_dir = out_dir / split
        split_dir.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            spec = random_scene(seed * 1_000_000 + offset + i, hole_patches=hole_patches)
            frame = render_frame(spec, h, w)
            frame.frame_id = f"{offset + i:06d}"
            write_frame(split_dir, frame, labels=label_patches(spec, grid))
    return grid
