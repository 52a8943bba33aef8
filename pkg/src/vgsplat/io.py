"""Datasets (COLMAP text, camera JSON, synthetic scenes) and file formats (PNG, PLY, checkpoint)."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .appearance import ColorMLP, DirHashGrid, view_direction
from .config import TrainConfig
from .core import Camera, GaussianSet, Scene, logit, quat_to_rotmat
from .raster import render

TEST_EVERY = 8


class FormatError(ValueError):
    """Malformed, truncated or incompatible file."""


# --- images -----------------------------------------------------------------

def to_bytes(img) -> np.ndarray:
    """[0, 1] floats to uint8 with clamping and round-half-up."""
    return np.floor(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(path, img) -> None:
    Image.fromarray(to_bytes(img), mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


# --- PLY --------------------------------------------------------------------

_PLY_TYPES = {"double": "<f8", "float": "<f4", "uchar": "u1", "int": "<i4", "uint": "<u4"}


def write_ply(path, columns: dict, types: dict | None = None) -> None:
    """Binary little-endian PLY with a single ``vertex`` element."""
    types = types or {}
    names = list(columns)
    n = len(columns[names[0]]) if names else 0
    dtype = np.dtype([(k, _PLY_TYPES[types.get(k, "double")]) for k in names])
    rec = np.empty(n, dtype=dtype)
    for k in names:
        rec[k] = columns[k]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {types.get(k, 'double')} {k}" for k in names]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


def read_ply(path) -> dict:
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    lines = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise FormatError(f"{path}: only binary_little_endian PLY is supported")
    n = None
    fields = []
    for line in lines:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts and parts[0] == "property":
            if parts[1] not in _PLY_TYPES:
                raise FormatError(f"{path}: unsupported property type {parts[1]}")
            fields.append((parts[2], _PLY_TYPES[parts[1]]))
    if n is None:
        raise FormatError(f"{path}: missing vertex element")
    dtype = np.dtype(fields)
    body = data[end + len(b"end_header\n"):]
    if len(body) != n * dtype.itemsize:
        raise FormatError(f"{path}: expected {n * dtype.itemsize} bytes of vertex data, found {len(body)}")
    rec = np.frombuffer(body, dtype=dtype)
    return {name: rec[name].copy() for name in dtype.names}


def save_ply(path, gs: GaussianSet) -> None:
    cols = {"x": gs.positions[:, 0], "y": gs.positions[:, 1], "z": gs.positions[:, 2]}
    cols.update({f"log_scale_{i}": gs.log_scales[:, i] for i in range(3)})
    cols.update({f"rot_{i}": gs.rotations[:, i] for i in range(4)})
    cols["opacity_logit"] = gs.opacity_logits
    cols.update({f"f_{i}": gs.features[:, i] for i in range(gs.feature_dim)})
    write_ply(path, cols)


def load_ply(path) -> GaussianSet:
    cols = read_ply(path)
    try:
        pos = np.stack([cols["x"], cols["y"], cols["z"]], 1)
        ls = np.stack([cols[f"log_scale_{i}"] for i in range(3)], 1)
        rot = np.stack([cols[f"rot_{i}"] for i in range(4)], 1)
        op = cols["opacity_logit"]
    except KeyError as exc:
        raise FormatError(f"{path}: missing Gaussian property {exc}") from None
    n_feat = sum(1 for k in cols if k.startswith("f_"))
    if any(f"f_{i}" not in cols for i in range(n_feat)):
        raise FormatError(f"{path}: feature properties are not contiguous f_0..f_{n_feat - 1}")
    feats = np.stack([cols[f"f_{i}"] for i in range(n_feat)], 1) if n_feat else np.zeros((len(pos), 0))
    return GaussianSet(pos, ls, rot, op, feats)


def write_points_ply(path, points, colors) -> None:
    p = np.asarray(points, dtype=np.float64)
    c = to_bytes(colors)
    write_ply(path, {"x": p[:, 0], "y": p[:, 1], "z": p[:, 2], "red": c[:, 0], "green": c[:, 1], "blue": c[:, 2]},
              {"red": "uchar", "green": "uchar", "blue": "uchar"})


def read_points_ply(path):
    cols = read_ply(path)
    pts = np.stack([cols["x"], cols["y"], cols["z"]], 1).astype(np.float64)
    rgb = np.stack([cols["red"], cols["green"], cols["blue"]], 1).astype(np.float64) / 255.0
    return pts, rgb


# --- checkpoint -------------------------------------------------------------

MAGIC = b"VGSCKPT\0"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    arr = arr.astype(_DTYPES[0 if arr.dtype.kind == "f" else 1], copy=False)
    nb = name.encode()
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<BBB", 0, _CODES[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape) + struct.pack("<Q", arr.nbytes)
    return head + arr.tobytes()


def _pack_blob(name: str, blob: bytes) -> bytes:
    nb = name.encode()
    return struct.pack("<H", len(nb)) + nb + struct.pack("<B", 1) + struct.pack("<Q", len(blob)) + blob


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_bytes(model) -> bytes:
    gs = model.gaussians
    g = model.grid
    entries = [
        _pack_array("positions", gs.positions),
        _pack_array("log_scales", gs.log_scales),
        _pack_array("rotations", gs.rotations),
        _pack_array("opacity_logits", gs.opacity_logits),
        _pack_array("features", gs.features),
        _pack_array("grid_shape", np.array([g.levels, g.base_res, g.max_res, g.log2_T, g.n_features])),
        _pack_array("grid_tables", g.tables),
    ]
    entries += [_pack_array(f"mlp.{k}", v) for k, v in sorted(model.mlp.params.items())]
    meta = {"iteration": model.iteration, "lhe": model.lhe, "mlp_hidden": model.mlp.hidden,
            "config": model.config.to_flat()}
    entries.append(_pack_blob("meta", json.dumps(meta, sort_keys=True).encode()))
    return MAGIC + struct.pack("<II", VERSION, len(entries)) + b"".join(entries)


def save_checkpoint(path, model) -> None:
    """Write atomically (temp file in the same directory, then rename)."""
    path = Path(path)
    data = checkpoint_bytes(model)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def load_checkpoint(path):
    from .engine import Model

    path = Path(path)
    data = path.read_bytes()
    if not data.startswith(MAGIC):
        raise FormatError(f"{path}: bad magic header, not a checkpoint")
    r = _Reader(data, path)
    r.take(len(MAGIC))
    version, count = r.unpack("<II")
    if version != VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, expected {VERSION}")
    arrays, blobs = {}, {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (kind,) = r.unpack("<B")
        if kind == 1:
            (nb,) = r.unpack("<Q")
            blobs[name] = r.take(nb)
            continue
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{ndim}Q")
        (nb,) = r.unpack("<Q")
        dtype = _DTYPES[code]
        if nb != int(np.prod(shape)) * dtype.itemsize:
            raise FormatError(f"{path}: length prefix of {name} disagrees with its shape {shape}")
        arrays[name] = np.frombuffer(r.take(nb), dtype=dtype).reshape(shape).copy()
    if r.pos != len(data):
        raise FormatError(f"{path}: {len(data) - r.pos} trailing bytes")
    try:
        meta = json.loads(blobs["meta"])
        gs = GaussianSet(arrays["positions"], arrays["log_scales"], arrays["rotations"],
                         arrays["opacity_logits"], arrays["features"])
        levels, base, top, log2_t, nf = (int(v) for v in arrays["grid_shape"])
        grid = DirHashGrid(levels, base, top, log2_t, nf, tables=arrays["grid_tables"])
        params = {k[4:]: v for k, v in arrays.items() if k.startswith("mlp.")}
        mlp = ColorMLP(params["W1"].shape[0], meta["mlp_hidden"], params=params)
    except KeyError as exc:
        raise FormatError(f"{path}: missing checkpoint entry {exc}") from None
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return Model(gs, mlp, grid, bool(meta["lhe"]), int(meta["iteration"]), TrainConfig.from_flat(meta["config"]))


# --- datasets ---------------------------------------------------------------

@dataclass
class Dataset:
    cameras: list
    images: list
    names: list
    points: np.ndarray
    colors: np.ndarray
    test_every: int = TEST_EVERY

    def __post_init__(self):
        for cam, img, name in zip(self.cameras, self.images, self.names):
            if img.shape[:2] != (cam.height, cam.width):
                raise ValueError(f"{name}: image is {img.shape[1]}x{img.shape[0]}, camera is {cam.width}x{cam.height}")

    def is_test(self, i: int) -> bool:
        return i % self.test_every == 0

    @property
    def train_views(self) -> list:
        return [(c, im) for i, (c, im) in enumerate(zip(self.cameras, self.images)) if not self.is_test(i)]

    @property
    def test_views(self) -> list:
        return [(c, im) for i, (c, im) in enumerate(zip(self.cameras, self.images)) if self.is_test(i)]

    def scene(self, gaussians: GaussianSet) -> Scene:
        return Scene(gaussians, self.train_views, self.test_views)


def _fail(path, lineno, msg):
    raise FormatError(f"{path}:{lineno}: {msg}")


def _data_lines(path):
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if line and not line.startswith("#"):
            yield lineno, line


def read_colmap_cameras(path) -> dict:
    cams = {}
    for lineno, line in _data_lines(path):
        parts = line.split()
        if len(parts) < 4:
            _fail(path, lineno, "expected CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]")
        model = parts[1]
        try:
            cid, w, h = int(parts[0]), int(parts[2]), int(parts[3])
            params = [float(x) for x in parts[4:]]
        except ValueError:
            _fail(path, lineno, f"malformed camera line: {line!r}")
        if model == "PINHOLE":
            if len(params) != 4:
                _fail(path, lineno, "PINHOLE needs fx fy cx cy")
            fx, fy, cx, cy = params
        elif model == "SIMPLE_PINHOLE":
            if len(params) != 3:
                _fail(path, lineno, "SIMPLE_PINHOLE needs f cx cy")
            fx = fy = params[0]
            cx, cy = params[1:]
        else:
            raise FormatError(f"{path}:{lineno}: unsupported camera model {model} (supported: PINHOLE, SIMPLE_PINHOLE)")
        cams[cid] = dict(fx=fx, fy=fy, cx=cx, cy=cy, width=w, height=h)
    return cams


def read_colmap_images(path) -> list:
    """List of (image_id, qvec wxyz, tvec, camera_id, name); points2D lines are skipped."""
    lines = Path(path).read_text().splitlines()
    out = []
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 10:
            _fail(path, i, "expected IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME")
        try:
            iid = int(parts[0])
            q = np.array([float(x) for x in parts[1:5]])
            t = np.array([float(x) for x in parts[5:8]])
            cid = int(parts[8])
        except ValueError:
            _fail(path, i, f"malformed image line: {line!r}")
        out.append((iid, q, t, cid, " ".join(parts[9:])))
        i += 1  # the POINTS2D line that follows every image line
    return out


def read_colmap_points(path):
    pts, cols = [], []
    for lineno, line in _data_lines(path):
        parts = line.split()
        if len(parts) < 8:
            _fail(path, lineno, "expected POINT3D_ID X Y Z R G B ERROR TRACK[]")
        try:
            pts.append([float(x) for x in parts[1:4]])
            cols.append([int(x) for x in parts[4:7]])
        except ValueError:
            _fail(path, lineno, f"malformed point line: {line!r}")
    return np.array(pts, dtype=np.float64).reshape(-1, 3), np.array(cols, dtype=np.float64).reshape(-1, 3) / 255.0


def load_colmap_text(root) -> Dataset:
    """Read ``cameras.txt``, ``images.txt``, ``points3D.txt`` (in ``root`` or ``root/sparse/0``) and ``images/``."""
    root = Path(root)
    sparse = root if (root / "cameras.txt").exists() else root / "sparse" / "0"
    for name in ("cameras.txt", "images.txt", "points3D.txt"):
        if not (sparse / name).exists():
            raise FileNotFoundError(f"missing {sparse / name}")
    intr = read_colmap_cameras(sparse / "cameras.txt")
    records = sorted(read_colmap_images(sparse / "images.txt"), key=lambda r: r[4])
    cameras, images, names = [], [], []
    for iid, q, t, cid, name in records:
        if cid not in intr:
            raise FormatError(f"{sparse / 'images.txt'}: image {iid} references unknown camera {cid}")
        img_path = root / "images" / name
        if not img_path.exists():
            raise FileNotFoundError(f"missing image file {img_path}")
        cameras.append(Camera(rotation=quat_to_rotmat(q), translation=t, **intr[cid]))
        images.append(read_png(img_path))
        names.append(name)
    pts, cols = read_colmap_points(sparse / "points3D.txt")
    return Dataset(cameras, images, names, pts, cols)


def camera_to_json(cam: Camera, image: str) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy, "width": cam.width, "height": cam.height,
            "w2c_rotation": cam.rotation.reshape(-1).tolist(), "w2c_translation": cam.translation.tolist(),
            "image": image}


def camera_from_json(d: dict) -> Camera:
    return Camera(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"],
                  np.array(d["w2c_rotation"], dtype=np.float64).reshape(3, 3),
                  np.array(d["w2c_translation"], dtype=np.float64))


def load_json_dataset(root) -> Dataset:
    root = Path(root)
    entries = json.loads((root / "cameras.json").read_text())
    cameras = [camera_from_json(e) for e in entries]
    images = []
    for e in entries:
        p = root / e["image"]
        if not p.exists():
            raise FileNotFoundError(f"missing image file {p}")
        images.append(read_png(p))
    pts, cols = read_points_ply(root / "points3d.ply")
    return Dataset(cameras, images, [e["image"] for e in entries], pts, cols)


def load_dataset(root) -> Dataset:
    """Camera-JSON layout if ``cameras.json`` exists, COLMAP text otherwise."""
    root = Path(root)
    if (root / "cameras.json").exists():
        return load_json_dataset(root)
    return load_colmap_text(root)


# --- synthetic scenes -------------------------------------------------------

SCENES = ("texture", "specular")


@dataclass
class SynthSpec:
    scene: str = "texture"
    n_views: int = 24
    width: int = 32
    height: int = 32
    focal: float = 40.0
    grid: int = 40
    checks: int = 10
    distance: float = 3.0
    max_angle: float = 0.45  # radians off the wall normal
    init_fraction: float = 0.1
    lobe_axis: tuple = (0.25, -0.15, 1.0)
    lobe_strength: float = 0.5
    lobe_exponent: float = 40.0
    extras: dict = field(default_factory=dict)


def specular_color(base, strength, exponent, axis, d) -> np.ndarray:
    """``base + strength * max(0, d . axis) ** exponent`` per Gaussian."""
    cosang = np.clip(np.sum(np.asarray(d) * np.asarray(axis), axis=-1), 0.0, None)
    return np.asarray(base) + np.asarray(strength) * (cosang ** exponent)[..., None]


def _wall(spec: SynthSpec, rng):
    g = spec.grid
    s = 2.0 / g
    c = (np.arange(g) + 0.5) * s - 1.0
    xx, yy = np.meshgrid(c, c, indexing="xy")
    pos = np.stack([xx.ravel(), yy.ravel(), np.zeros(g * g)], 1)
    log_scales = np.tile(np.log([0.6 * s, 0.6 * s, 0.05 * s]), (g * g, 1))
    rot = np.tile([1.0, 0.0, 0.0, 0.0], (g * g, 1))
    op = np.full(g * g, logit(0.98))
    return GaussianSet(pos, log_scales, rot, op, np.zeros((g * g, 0)))


def _cameras(spec: SynthSpec, rng) -> list:
    cams = []
    golden = np.pi * (3.0 - np.sqrt(5.0))
    for i in range(spec.n_views):
        # spiral over a cap around the -z axis so views are spread and reproducible
        frac = (i + 0.5) / spec.n_views
        theta = spec.max_angle * np.sqrt(frac)
        phi = i * golden
        eye = spec.distance * np.array([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), -np.cos(theta)])
        jitter = rng.normal(0.0, 0.02, size=3)
        cams.append(Camera.look_at(eye, jitter, [0.0, -1.0, 0.0], spec.focal, spec.focal, spec.width, spec.height))
    return cams


def synth_scene(spec: SynthSpec, seed: int):
    """Ground-truth Gaussians, cameras, rendered images, per-Gaussian base colours."""
    if spec.scene not in SCENES:
        raise ValueError(f"unknown scene {spec.scene!r}; choose one of {', '.join(SCENES)}")
    rng = np.random.default_rng(seed)
    gt = _wall(spec, rng)
    u = (gt.positions[:, 0] + 1.0) * 0.5
    v = (gt.positions[:, 1] + 1.0) * 0.5
    cams = _cameras(spec, rng)
    if spec.scene == "texture":
        palette = rng.uniform(0.05, 0.95, size=(spec.checks, spec.checks, 3))
        ci = np.minimum((u * spec.checks).astype(int), spec.checks - 1)
        cj = np.minimum((v * spec.checks).astype(int), spec.checks - 1)
        parity = ((ci + cj) % 2)[:, None]
        base = np.where(parity == 1, palette[ci, cj], 1.0 - palette[ci, cj])
        images = [render(gt, cam, base)[0] for cam in cams]
    else:
        base = np.stack([0.15 + 0.3 * u, 0.2 + 0.25 * v, 0.35 - 0.2 * u * v], 1)
        axis = np.asarray(spec.lobe_axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        images = []
        for cam in cams:
            d = view_direction(gt.positions, cam.center)
            rgb = specular_color(base, spec.lobe_strength, spec.lobe_exponent, axis, d)
            images.append(render(gt, cam, rgb)[0])
    n_init = int(np.floor(spec.init_fraction * len(gt)))
    pick = np.sort(rng.choice(len(gt), size=n_init, replace=False))
    return gt, cams, images, gt.positions[pick], base[pick]


def synth_dataset(spec: SynthSpec | str, out_dir, seed: int = 0) -> Dataset:
    """Render a built-in scene and write ``images/``, ``cameras.json`` and ``points3d.ply``."""
    if isinstance(spec, str):
        spec = SynthSpec(scene=spec)
    _, cams, images, pts, cols = synth_scene(spec, seed)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (cam, img) in enumerate(zip(cams, images)):
        rel = f"images/view_{i:03d}.png"
        write_png(out / rel, img)
        entries.append(camera_to_json(cam, rel))
    (out / "cameras.json").write_text(json.dumps(entries, indent=1) + "\n")
    write_points_ply(out / "points3d.ply", pts, cols)
    return load_json_dataset(out)
