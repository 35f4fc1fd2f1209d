"""Synthetic scenes, PPM image files, and the binary checkpoint container.

Ground truth comes from rendering a seeded set of teacher Gaussians with this
package's own renderer, so the fitting target is always representable by the
model family.  The initial point cloud handed to the voxeliser is simply the
teacher means.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .anchors import AnchorField
from .errors import (
    BadMagicError,
    ChecksumError,
    FormatError,
    InputError,
    TruncatedError,
    VersionError,
)
from .heads import GaussianPrimitive, MLPLayer, MLPParams
from .numerics import EigenPairs, SymMatrix
from .renderer import Camera, project_gaussian, render

CHECKPOINT_MAGIC = b"SOGS"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# scene specification and generation
# ---------------------------------------------------------------------------


@dataclass
class SceneSpec:
    seed: int = 0
    teacher_count: int = 24
    bounds_min: tuple = (-1.0, -1.0, -1.0)
    bounds_max: tuple = (1.0, 1.0, 1.0)
    train_cameras: int = 9
    test_cameras: int = 3
    width: int = 48
    height: int = 48
    voxel_size: float = 0.4
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.bounds_min = tuple(float(v) for v in self.bounds_min)
        self.bounds_max = tuple(float(v) for v in self.bounds_max)
        self.background = tuple(float(v) for v in self.background)
        if self.teacher_count < 1 or self.train_cameras < 1 or self.test_cameras < 1:
            raise InputError("counts must be >= 1")
        if self.width < 16 or self.height < 16:
            raise InputError("image size must be at least 16x16")
        if self.voxel_size <= 0.0:
            raise InputError("voxel_size must be positive")
        span = np.array(self.bounds_max) - np.array(self.bounds_min)
        if np.any(span <= 0.0):
            raise InputError("degenerate world bounds")


_SPEC_FIELDS = ("seed", "teacher_count", "bounds_min", "bounds_max", "train_cameras",
                "test_cameras", "width", "height", "voxel_size", "background")


def spec_to_text(spec: SceneSpec) -> str:
    lines = ["# scene specification"]
    for name in _SPEC_FIELDS:
        value = getattr(spec, name)
        if isinstance(value, tuple):
            lines.append(f"{name}={','.join(repr(v) for v in value)}")
        else:
            lines.append(f"{name}={value!r}")
    return "\n".join(lines) + "\n"


def spec_from_text(text: str) -> SceneSpec:
    kwargs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"scene spec line {lineno} is not key=value: {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _SPEC_FIELDS:
            raise InputError(f"unknown scene spec key {key!r} on line {lineno}")
        if key in ("bounds_min", "bounds_max", "background"):
            kwargs[key] = tuple(float(v) for v in value.split(","))
        elif key == "voxel_size":
            kwargs[key] = float(value)
        else:
            kwargs[key] = int(value)
    return SceneSpec(**kwargs)


@dataclass
class Scene:
    spec: SceneSpec
    teachers: list          # GaussianPrimitive
    cameras: list           # Camera, train first then test
    images: list            # (H, W, 3) float arrays aligned with cameras
    points: np.ndarray      # (P, 3) init point cloud

    @property
    def train_indices(self) -> list[int]:
        return list(range(self.spec.train_cameras))

    @property
    def test_indices(self) -> list[int]:
        start = self.spec.train_cameras
        return list(range(start, start + self.spec.test_cameras))

    @property
    def background(self) -> np.ndarray:
        return np.array(self.spec.background)


def _scene_cameras(spec: SceneSpec, rng: np.random.Generator) -> list[Camera]:
    lo = np.array(spec.bounds_min)
    hi = np.array(spec.bounds_max)
    center = (lo + hi) / 2.0
    circumradius = float(np.linalg.norm(hi - lo)) / 2.0
    distance = 2.4 * circumradius
    fx = 0.42 * spec.width * distance / circumradius
    fy = 0.42 * spec.height * distance / circumradius

    cameras = []
    for _ in range(spec.train_cameras + spec.test_cameras):
        azimuth = rng.uniform(0.0, 2.0 * np.pi)
        elevation = rng.uniform(-0.5, 0.5)
        eye = center + distance * np.array([
            np.cos(elevation) * np.cos(azimuth),
            np.cos(elevation) * np.sin(azimuth),
            np.sin(elevation),
        ])
        cameras.append(Camera.look_at(eye=eye, target=center, width=spec.width,
                                      height=spec.height, fx=fx, fy=fy))
    return cameras


def _teacher_gaussians(spec: SceneSpec, rng: np.random.Generator) -> list[GaussianPrimitive]:
    lo = np.array(spec.bounds_min)
    hi = np.array(spec.bounds_max)
    extent = float(np.max(hi - lo))
    teachers = []
    for _ in range(spec.teacher_count):
        position = rng.uniform(lo, hi)
        scale = rng.uniform(0.04, 0.12, size=3) * extent
        quat = rng.standard_normal(4)
        quat /= np.linalg.norm(quat)
        teachers.append(GaussianPrimitive(
            position=position,
            opacity=float(rng.uniform(0.55, 0.95)),
            color=rng.uniform(0.15, 0.95, size=3),
            scale=scale,
            rotation=quat,
        ))
    return teachers


def render_gaussians(gaussians, camera: Camera, background) -> np.ndarray:
    """Project then composite a primitive list (the teacher render path)."""
    splats = []
    for i, g in enumerate(gaussians):
        splat = project_gaussian(g, camera, splat_id=i)
        if splat is not None:
            splats.append(splat)
    return render(splats, camera, background)


def generate_synthetic_scene(spec: SceneSpec) -> Scene:
    """Deterministic scene for a given spec: teachers, cameras on a sphere
    around the centroid, ground-truth renders, and the init point cloud."""
    rng = np.random.default_rng(spec.seed)
    teachers = _teacher_gaussians(spec, rng)
    cameras = _scene_cameras(spec, rng)
    background = np.array(spec.background)
    images = [render_gaussians(teachers, cam, background) for cam in cameras]
    points = np.stack([g.position for g in teachers])
    return Scene(spec=spec, teachers=teachers, cameras=cameras, images=images, points=points)


# ---------------------------------------------------------------------------
# PPM (P6) image files
# ---------------------------------------------------------------------------


def write_image(path, image: np.ndarray) -> None:
    """Binary PPM, maxval 255, rows top to bottom, round-half-up quantisation."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InputError(f"expected (H, W, 3) image, got {image.shape}")
    if not np.all(np.isfinite(image)):
        raise InputError("image must be finite")
    h, w = image.shape[:2]
    quantised = np.clip(np.floor(image * 255.0 + 0.5), 0.0, 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(quantised.tobytes())


def read_image(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] != b"P6":
        raise FormatError("not a binary PPM (magic P6 missing)", offset=0)
    pos = 2

    def next_token():
        nonlocal pos
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FormatError("header ended early", offset=pos)
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise FormatError(f"expected integer, got {token!r}", offset=start)
        return int(token)

    width = next_token()
    height = next_token()
    maxval = next_token()
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}", offset=pos)
    if width < 1 or height < 1:
        raise FormatError("non-positive image dimensions", offset=pos)
    pos += 1  # single whitespace byte after maxval
    expected = 3 * width * height
    payload = data[pos:pos + expected]
    if len(payload) < expected:
        raise FormatError(
            f"payload has {len(payload)} of {expected} bytes", offset=pos + len(payload))
    pixels = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    return pixels.reshape(height, width, 3)


# ---------------------------------------------------------------------------
# scene directories
# ---------------------------------------------------------------------------


def save_scene(scene: Scene, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "scene.txt").write_text(spec_to_text(scene.spec))
    rows = ["index,split,width,height,fx,fy,cx,cy,"
            "r00,r01,r02,r10,r11,r12,r20,r21,r22,t0,t1,t2"]
    for i, cam in enumerate(scene.cameras):
        split = "train" if i in scene.train_indices else "test"
        r = cam.rotation.ravel()
        vals = [cam.width, cam.height, cam.fx, cam.fy, cam.cx, cam.cy,
                *r, *cam.translation]
        rows.append(f"{i},{split}," + ",".join(repr(float(v)) for v in vals))
    (directory / "cameras.csv").write_text("\n".join(rows) + "\n")
    for i, image in enumerate(scene.images):
        write_image(directory / f"gt_{i:03d}.ppm", image)
    with open(directory / "points.xyz", "w") as f:
        for p in scene.points:
            f.write(f"{p[0]!r} {p[1]!r} {p[2]!r}\n")


def load_scene(directory) -> Scene:
    directory = Path(directory)
    spec = spec_from_text((directory / "scene.txt").read_text())
    cameras = []
    lines = (directory / "cameras.csv").read_text().strip().splitlines()
    for line in lines[1:]:
        parts = line.split(",")
        vals = [float(v) for v in parts[2:]]
        cameras.append(Camera(width=int(vals[0]), height=int(vals[1]), fx=vals[2],
                              fy=vals[3], cx=vals[4], cy=vals[5],
                              rotation=np.array(vals[6:15]).reshape(3, 3),
                              translation=np.array(vals[15:18])))
    images = [read_image(directory / f"gt_{i:03d}.ppm") for i in range(len(cameras))]
    points = []
    for line in (directory / "points.xyz").read_text().strip().splitlines():
        points.append([float(v) for v in line.split()])
    return Scene(spec=spec, teachers=[], cameras=cameras, images=images,
                 points=np.array(points))


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    field: AnchorField
    extractors: list            # list[MLPParams], empty without augmentation
    head: MLPParams
    basis: object | None        # SecondOrderBasis snapshot or None
    optimizer: dict             # name -> (S,) float arrays plus "step"
    iteration: int
    config: dict                # JSON-able run configuration echo
    rng_state: dict             # bit-generator state for exact resume
    version: int = CHECKPOINT_VERSION


_TYPE_F8 = 0
_TYPE_I8 = 1
_TYPE_STR = 2


def _pack_entries(entries: dict) -> bytes:
    out = [struct.pack("<I", len(entries))]
    for key, value in entries.items():
        kb = key.encode("utf-8")
        out.append(struct.pack("<H", len(kb)))
        out.append(kb)
        if isinstance(value, str):
            vb = value.encode("utf-8")
            out.append(struct.pack("<BI", _TYPE_STR, len(vb)))
            out.append(vb)
        else:
            arr = np.asarray(value)
            if arr.dtype.kind in "iub":
                arr = arr.astype(np.int64)
                tag = _TYPE_I8
            else:
                arr = arr.astype(np.float64)
                tag = _TYPE_F8
            out.append(struct.pack("<BB", tag, arr.ndim))
            out.append(struct.pack(f"<{max(arr.ndim, 1)}I", *(arr.shape or (1,))))
            out.append(arr.tobytes(order="C"))
    return b"".join(out)


def _unpack_entries(payload: bytes, base_offset: int) -> dict:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(payload):
            raise TruncatedError(f"section truncated reading {what} "
                                 f"(byte offset {base_offset + pos})")
        chunk = payload[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4, "entry count"))
    entries = {}
    for _ in range(count):
        (klen,) = struct.unpack("<H", take(2, "key length"))
        key = take(klen, "key").decode("utf-8")
        (tag,) = struct.unpack("<B", take(1, "type tag"))
        if tag == _TYPE_STR:
            (vlen,) = struct.unpack("<I", take(4, "string length"))
            entries[key] = take(vlen, "string").decode("utf-8")
        elif tag in (_TYPE_F8, _TYPE_I8):
            (ndim,) = struct.unpack("<B", take(1, "ndim"))
            n_dims = max(ndim, 1)
            shape = struct.unpack(f"<{n_dims}I", take(4 * n_dims, "shape"))
            count_elems = int(np.prod(shape))
            dtype = np.float64 if tag == _TYPE_F8 else np.int64
            raw = take(8 * count_elems, f"array {key}")
            arr = np.frombuffer(raw, dtype=dtype).copy()
            entries[key] = arr.reshape(shape if ndim > 0 else ())
        else:
            raise FormatError(f"unknown entry type {tag}", offset=base_offset + pos)
    return entries


def _mlp_entries(prefix: str, params: MLPParams, entries: dict) -> None:
    entries[f"{prefix}.n_layers"] = np.array(len(params.layers))
    for i, layer in enumerate(params.layers):
        entries[f"{prefix}.{i}.weight"] = layer.weight
        entries[f"{prefix}.{i}.bias"] = layer.bias
        entries[f"{prefix}.{i}.act"] = layer.activation


def _mlp_from_entries(prefix: str, entries: dict) -> MLPParams:
    n = int(entries[f"{prefix}.n_layers"])
    layers = [MLPLayer(weight=entries[f"{prefix}.{i}.weight"],
                       bias=entries[f"{prefix}.{i}.bias"],
                       activation=entries[f"{prefix}.{i}.act"]) for i in range(n)]
    return MLPParams(layers=layers)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    sections: list[tuple[str, dict]] = []

    sections.append(("anchors", {
        "positions": ckpt.field.positions,
        "features": ckpt.field.features,
        "scalings": ckpt.field.scalings,
        "offsets": ckpt.field.offsets,
    }))

    params: dict = {"n_extractors": np.array(len(ckpt.extractors))}
    _mlp_entries("head", ckpt.head, params)
    for i, ext in enumerate(ckpt.extractors):
        _mlp_entries(f"ext{i}", ext, params)
    sections.append(("params", params))

    basis_entries: dict = {"present": np.array(1 if ckpt.basis is not None else 0)}
    if ckpt.basis is not None:
        b = ckpt.basis
        basis_entries.update({
            "mean": b.mean, "covariance": b.covariance.entries,
            "correlation": b.correlation.entries, "std_devs": b.std_devs,
            "eigenvalues": b.eigen.values, "eigenvectors": b.eigen.vectors,
            "principal": b.principal, "m": np.array(b.m),
            "degenerate": np.array(1 if b.degenerate else 0),
            "iteration": np.array(b.iteration),
        })
    sections.append(("basis", basis_entries))

    opt = {"iteration": np.array(ckpt.iteration),
           "rng_state": json.dumps(ckpt.rng_state, sort_keys=True)}
    for key in sorted(ckpt.optimizer):
        opt[f"state.{key}"] = ckpt.optimizer[key]
    sections.append(("optimizer", opt))

    sections.append(("config", {"json": json.dumps(ckpt.config, sort_keys=True)}))

    blob = [CHECKPOINT_MAGIC, struct.pack("<II", ckpt.version, len(sections))]
    for name, entries in sections:
        nb = name.encode("utf-8")
        payload = _pack_entries(entries)
        blob.append(struct.pack("<H", len(nb)))
        blob.append(nb)
        blob.append(struct.pack("<Q", len(payload)))
        blob.append(payload)
        blob.append(struct.pack("<I", zlib.crc32(payload)))
    Path(path).write_bytes(b"".join(blob))


def load_checkpoint(path) -> Checkpoint:
    from .anchors import SecondOrderBasis  # deferred: only needed to rebuild

    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}")
    if len(data) < 12:
        raise TruncatedError("file shorter than the fixed header")
    version, n_sections = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version} "
                           f"(this build reads {CHECKPOINT_VERSION})")
    pos = 12
    sections: dict[str, dict] = {}
    for _ in range(n_sections):
        if pos + 2 > len(data):
            raise TruncatedError(f"section header truncated at byte {pos}")
        (nlen,) = struct.unpack("<H", data[pos:pos + 2])
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        if pos + 8 > len(data):
            raise TruncatedError(f"section length truncated at byte {pos}")
        (plen,) = struct.unpack("<Q", data[pos:pos + 8])
        pos += 8
        if pos + plen + 4 > len(data):
            raise TruncatedError(f"section {name!r} payload truncated at byte {pos}")
        payload = data[pos:pos + plen]
        (crc,) = struct.unpack("<I", data[pos + plen:pos + plen + 4])
        if zlib.crc32(payload) != crc:
            raise ChecksumError(f"section {name!r} checksum mismatch")
        sections[name] = _unpack_entries(payload, pos)
        pos += plen + 4

    for required in ("anchors", "params", "basis", "optimizer", "config"):
        if required not in sections:
            raise FormatError(f"missing checkpoint section {required!r}")

    a = sections["anchors"]
    field = AnchorField(positions=a["positions"], features=a["features"],
                        scalings=a["scalings"], offsets=a["offsets"])

    p = sections["params"]
    head = _mlp_from_entries("head", p)
    extractors = [_mlp_from_entries(f"ext{i}", p) for i in range(int(p["n_extractors"]))]

    b = sections["basis"]
    basis = None
    if int(b["present"]):
        basis = SecondOrderBasis(
            mean=b["mean"],
            covariance=SymMatrix.from_array(b["covariance"]),
            correlation=SymMatrix.from_array(b["correlation"]),
            std_devs=b["std_devs"],
            eigen=EigenPairs(values=b["eigenvalues"], vectors=b["eigenvectors"]),
            principal=b["principal"],
            m=int(b["m"]),
            degenerate=bool(int(b["degenerate"])),
            iteration=int(b["iteration"]),
        )

    o = sections["optimizer"]
    optimizer = {key[len("state."):]: value for key, value in o.items()
                 if key.startswith("state.")}
    return Checkpoint(
        field=field, extractors=extractors, head=head, basis=basis,
        optimizer=optimizer, iteration=int(o["iteration"]),
        config=json.loads(sections["config"]["json"]),
        rng_state=json.loads(o["rng_state"]),
        version=version,
    )
