"""Paired point-cloud / image data.

Synthetic corpus
    Eight parametric shape families are sampled on their surfaces and rendered
    as depth-shaded orthographic silhouettes from random azimuths. Each sample
    gets its own random proportions, so the classes are not single templates.

File formats (all little-endian)
    ``*.vpts``   4-byte magic ``VPTS``, uint32 point count ``N``, then ``N*3``
                 float32 values (x, y, z per point).
    ``*.xyz``    text, one ``x y z`` triple per line; blank lines and lines
                 starting with ``#`` are skipped.
    ``*.ppm``    binary PPM (``P6``), 8-bit channels.
    ``manifest.json``  JSON object: ``{"format": "vipformer-manifest",
                 "version": 1, "classes": [names], "entries": [{"sample_id",
                 "class_id", "split", "points_file", "image_files": [...]}]}``.
                 Paths are relative to the manifest's directory.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractError, DataError, FormatError, ParameterError
from .rng import RngStream

FAMILIES = ("sphere", "cube", "cylinder", "cone", "torus", "pyramid", "capsule", "cross")
SPLITS = ("train", "val", "test")
VPTS_MAGIC = b"VPTS"
MANIFEST_NAME = "manifest.json"


# -- surface samplers -------------------------------------------------------

def _pick(rng, weights, n):
    w = np.asarray(weights, dtype=np.float64)
    return rng.choice(len(w), size=n, p=w / w.sum())


def _box_surface(rng, half, n):
    a, b, c = half
    face = _pick(rng, [b * c, b * c, a * c, a * c, a * b, a * b], n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for ax in range(3):
        sel = axis == ax
        others = [o for o in range(3) if o != ax]
        pts[sel, ax] = sign[sel] * half[ax]
        pts[sel, others[0]] = uv[sel, 0] * half[others[0]]
        pts[sel, others[1]] = uv[sel, 1] * half[others[1]]
    return pts


def _disk(rng, r, n):
    rad = r * np.sqrt(rng.uniform(size=n))
    th = rng.uniform(0, 2 * np.pi, size=n)
    return rad * np.cos(th), rad * np.sin(th)


def _unit_sphere(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _triangle(rng, v0, v1, v2, n):
    r = rng.uniform(size=(n, 2))
    flip = r.sum(axis=1) > 1
    r[flip] = 1 - r[flip]
    return v0 + r[:, :1] * (v1 - v0) + r[:, 1:] * (v2 - v0)


def sample_surface(family: str, p: dict, n: int, rng) -> np.ndarray:
    """Area-uniform surface samples of one shape in its local frame."""
    if family == "sphere":
        return _unit_sphere(rng, n) * p["radius"]
    if family == "cube":
        return _box_surface(rng, p["half"], n)
    if family == "cylinder":
        r, hh = p["radius"], p["half_height"]
        part = _pick(rng, [2 * np.pi * r * 2 * hh, np.pi * r * r, np.pi * r * r], n)
        th = rng.uniform(0, 2 * np.pi, size=n)
        pts = np.stack([r * np.cos(th), r * np.sin(th), rng.uniform(-hh, hh, size=n)], axis=1)
        x, y = _disk(rng, r, n)
        caps = part > 0
        pts[caps, 0], pts[caps, 1] = x[caps], y[caps]
        pts[caps, 2] = np.where(part[caps] == 1, hh, -hh)
        return pts
    if family == "cone":
        r, h = p["radius"], p["height"]
        part = _pick(rng, [np.pi * r * np.hypot(r, h), np.pi * r * r], n)
        th = rng.uniform(0, 2 * np.pi, size=n)
        s = np.sqrt(rng.uniform(size=n))
        pts = np.stack([s * r * np.cos(th), s * r * np.sin(th), h / 2 - s * h], axis=1)
        x, y = _disk(rng, r, n)
        base = part == 1
        pts[base] = np.stack([x[base], y[base], np.full(base.sum(), -h / 2)], axis=1)
        return pts
    if family == "torus":
        big, small = p["major"], p["minor"]
        out = np.empty((0, 3))
        while len(out) < n:
            m = 2 * (n - len(out)) + 16
            u = rng.uniform(0, 2 * np.pi, size=m)
            v = rng.uniform(0, 2 * np.pi, size=m)
            keep = rng.uniform(size=m) < (big + small * np.cos(v)) / (big + small)
            u, v = u[keep], v[keep]
            ring = big + small * np.cos(v)
            out = np.concatenate([out, np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], 1)])
        return out[:n]
    if family == "pyramid":
        b, h = p["half_base"], p["height"]
        apex = np.array([0.0, 0.0, h / 2])
        corners = np.array([[b, b], [-b, b], [-b, -b], [b, -b]])
        corners = np.concatenate([corners, np.full((4, 1), -h / 2)], axis=1)
        tris = [(corners[i], corners[(i + 1) % 4], apex) for i in range(4)]
        areas = [0.5 * np.linalg.norm(np.cross(t[1] - t[0], t[2] - t[0])) for t in tris]
        part = _pick(rng, areas + [4 * b * b], n)
        pts = np.empty((n, 3))
        for i, t in enumerate(tris):
            sel = part == i
            pts[sel] = _triangle(rng, *t, int(sel.sum()))
        sel = part == 4
        pts[sel] = np.stack([rng.uniform(-b, b, sel.sum()), rng.uniform(-b, b, sel.sum()),
                             np.full(sel.sum(), -h / 2)], axis=1)
        return pts
    if family == "capsule":
        r, hh = p["radius"], p["half_length"]
        part = _pick(rng, [2 * np.pi * r * 2 * hh, 4 * np.pi * r * r], n)
        th = rng.uniform(0, 2 * np.pi, size=n)
        pts = np.stack([r * np.cos(th), r * np.sin(th), rng.uniform(-hh, hh, size=n)], axis=1)
        cap = part == 1
        sph = _unit_sphere(rng, int(cap.sum())) * r
        sph[:, 2] += np.where(sph[:, 2] >= 0, hh, -hh)
        pts[cap] = sph
        return pts
    if family == "cross":
        bars = _cross_bars(p)
        out = np.empty((0, 3))
        areas = [h[0] * h[1] + h[1] * h[2] + h[0] * h[2] for h in bars]
        while len(out) < n:
            m = 2 * (n - len(out)) + 16
            which = _pick(rng, areas, m)
            cand = np.concatenate([_box_surface(rng, bars[i], int((which == i).sum())) for i in range(3)])
            inside_other = np.zeros(len(cand), dtype=bool)
            owner = np.concatenate([np.full(int((which == i).sum()), i) for i in range(3)])
            for i, half in enumerate(bars):
                strictly = np.all(np.abs(cand) < np.asarray(half) - 1e-9, axis=1)
                inside_other |= strictly & (owner != i)
            out = np.concatenate([out, cand[~inside_other]])
        return out[rng.permutation(len(out))[:n]]
    raise ParameterError(f"unknown shape family {family!r}")


def _cross_bars(p):
    t = p["thickness"]
    lx, ly, lz = p["arms"]
    return [(lx, t, t), (t, ly, t), (t, t, lz)]


def inside_test(family: str, p: dict):
    """Vectorized point-in-solid predicate in the shape's local frame."""
    if family == "sphere":
        return lambda q: np.einsum("ij,ij->i", q, q) <= p["radius"] ** 2
    if family == "cube":
        half = np.asarray(p["half"])
        return lambda q: np.all(np.abs(q) <= half, axis=1)
    if family == "cylinder":
        r, hh = p["radius"], p["half_height"]
        return lambda q: (q[:, 0] ** 2 + q[:, 1] ** 2 <= r * r) & (np.abs(q[:, 2]) <= hh)
    if family == "cone":
        r, h = p["radius"], p["height"]

        def cone(q):
            rad = r * (h / 2 - q[:, 2]) / h
            return (np.abs(q[:, 2]) <= h / 2) & (q[:, 0] ** 2 + q[:, 1] ** 2 <= rad ** 2)
        return cone
    if family == "torus":
        big, small = p["major"], p["minor"]
        return lambda q: (np.hypot(q[:, 0], q[:, 1]) - big) ** 2 + q[:, 2] ** 2 <= small ** 2
    if family == "pyramid":
        b, h = p["half_base"], p["height"]

        def pyramid(q):
            w = b * (h / 2 - q[:, 2]) / h
            return (np.abs(q[:, 2]) <= h / 2) & (np.abs(q[:, 0]) <= w) & (np.abs(q[:, 1]) <= w)
        return pyramid
    if family == "capsule":
        r, hh = p["radius"], p["half_length"]

        def capsule(q):
            dz = np.abs(q[:, 2]) - np.minimum(np.abs(q[:, 2]), hh)
            return q[:, 0] ** 2 + q[:, 1] ** 2 + dz ** 2 <= r * r
        return capsule
    if family == "cross":
        bars = [np.asarray(b) for b in _cross_bars(p)]
        return lambda q: np.any([np.all(np.abs(q) <= b, axis=1) for b in bars], axis=0)
    raise ParameterError(f"unknown shape family {family!r}")


def random_params(family: str, rng) -> dict:
    u = rng.uniform
    if family == "sphere":
        return {"radius": 1.0}
    if family == "cube":
        return {"half": [float(u(0.6, 1.0)) for _ in range(3)]}
    if family == "cylinder":
        return {"radius": float(u(0.4, 0.8)), "half_height": float(u(0.5, 1.0))}
    if family == "cone":
        return {"radius": float(u(0.5, 0.9)), "height": float(u(1.0, 2.0))}
    if family == "torus":
        return {"major": float(u(0.6, 0.8)), "minor": float(u(0.15, 0.3))}
    if family == "pyramid":
        return {"half_base": float(u(0.6, 1.0)), "height": float(u(1.0, 1.8))}
    if family == "capsule":
        return {"radius": float(u(0.3, 0.5)), "half_length": float(u(0.4, 0.8))}
    if family == "cross":
        return {"thickness": float(u(0.12, 0.25)), "arms": [float(u(0.8, 1.0)) for _ in range(3)]}
    raise ParameterError(f"unknown shape family {family!r}")


def normalize_points(points: np.ndarray):
    """Center on the centroid and scale so the farthest point has norm 1.

    Returns ``(normalized, center, scale)`` with ``normalized = (p - center) / scale``.
    """
    pts = np.asarray(points, dtype=np.float64)
    center = pts.mean(axis=0)
    centered = pts - center
    scale = float(np.sqrt((centered ** 2).sum(axis=1).max()))
    if scale == 0.0:
        scale = 1.0
    return centered / scale, center, scale


# -- rendering ---------------------------------------------------------------

def camera_basis(azimuth: float, elevation: float):
    """``(toward_camera, right, up)`` unit vectors for an orbit camera around +z."""
    ce = np.cos(elevation)
    back = np.array([ce * np.cos(azimuth), ce * np.sin(azimuth), np.sin(elevation)])
    right = np.array([-np.sin(azimuth), np.cos(azimuth), 0.0])
    up = np.cross(back, right)
    return back, right, up


def render_silhouette(inside, size: int, azimuth: float, elevation: float,
                      center=(0.0, 0.0, 0.0), scale: float = 1.0, steps: int = 96,
                      refine: int = 8) -> np.ndarray:
    """Orthographic, depth-shaded silhouette of a solid, as ``[size, size, 3]`` in [0, 1].

    The view window spans ``[-1, 1]^2`` in normalized coordinates, where a
    normalized-frame point ``x`` maps to the solid's local frame as
    ``x * scale + center``. Background pixels are exactly 0; foreground
    intensity falls from 1.0 (nearest) to 0.3 (farthest) with depth.
    """
    back, right, up = camera_basis(azimuth, elevation)
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    gx, gy = np.meshgrid(coords, -coords)
    origin = (gx.reshape(-1, 1) * right + gy.reshape(-1, 1) * up) + 1.5 * back
    direction = -back
    center = np.asarray(center, dtype=np.float64)

    n_rays = origin.shape[0]
    t_max = 3.0
    hit_t = np.full(n_rays, np.inf)
    prev_t = np.zeros(n_rays)
    pending = np.ones(n_rays, dtype=bool)
    for t in np.linspace(0.0, t_max, steps):
        if not pending.any():
            break
        idx = np.nonzero(pending)[0]
        h = inside((origin[idx] + t * direction) * scale + center)
        hit_idx = idx[h]
        hit_t[hit_idx] = t
        pending[hit_idx] = False
        prev_t[idx[~h]] = t
    hit = np.isfinite(hit_t)
    lo, hi = prev_t[hit], hit_t[hit]
    o_hit = origin[hit]
    for _ in range(refine):
        mid = 0.5 * (lo + hi)
        inside_mid = inside((o_hit + mid[:, None] * direction) * scale + center)
        hi = np.where(inside_mid, mid, hi)
        lo = np.where(inside_mid, lo, mid)
    shade = np.zeros(n_rays)
    # t = 0.5 is the front of the unit sphere, t = 2.5 its back
    shade[hit] = np.clip(1.0 - 0.35 * (hi - 0.5), 0.3, 1.0)
    img = shade.reshape(size, size)
    return np.repeat(img[:, :, None], 3, axis=2)


# -- file formats ------------------------------------------------------------

def write_vpts(path, points: np.ndarray):
    pts = np.ascontiguousarray(points, dtype="<f4")
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ParameterError(f"points must be [N, 3], got {pts.shape}")
    with open(path, "wb") as fh:
        fh.write(VPTS_MAGIC + struct.pack("<I", pts.shape[0]) + pts.tobytes())


def read_vpts(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != VPTS_MAGIC:
        raise FormatError(f"{path}: missing VPTS magic", offset=0)
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    (n,) = struct.unpack("<I", raw[4:8])
    need = 8 + 12 * n
    if len(raw) != need:
        raise FormatError(f"{path}: expected {need} bytes for {n} points, found {len(raw)}",
                          offset=min(len(raw), need))
    return np.frombuffer(raw, dtype="<f4", offset=8).reshape(n, 3).astype(np.float32)


def write_xyz(path, points: np.ndarray):
    with open(path, "w") as fh:
        for x, y, z in np.asarray(points, dtype=np.float64):
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


def read_xyz(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.replace(",", " ").split()
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise FormatError(f"{path}: no points")
    return np.asarray(rows, dtype=np.float64)


def read_points_raw(path) -> np.ndarray:
    """Read a point file without any normalization or subsampling."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    return read_vpts(path) if head == VPTS_MAGIC else read_xyz(path)


def load_points(path, sample_size: int | None = None, rng=None) -> np.ndarray:
    """Read, center + unit-sphere normalize, and optionally subsample a cloud."""
    pts, _, _ = normalize_points(read_points_raw(path))
    if sample_size is not None and pts.shape[0] > sample_size:
        if rng is None:
            raise ParameterError("subsampling a point file needs an rng")
        keep = np.sort(rng.choice(pts.shape[0], size=sample_size, replace=False))
        pts = pts[keep]
    return pts.astype(np.float32)


def write_ppm(path, image: np.ndarray):
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w, c = img.shape
    if c != 3:
        raise ParameterError("PPM images need 3 channels")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_ppm(path) -> np.ndarray:
    """Return the raw ``uint8`` ``[H, W, 3]`` array of a binary PPM."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header", offset=pos)
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (P6)", offset=0)
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM is supported", offset=pos)
    pos += 1
    need = w * h * 3
    if len(raw) - pos != need:
        raise FormatError(f"{path}: expected {need} pixel bytes, found {len(raw) - pos}", offset=pos)
    return np.frombuffer(raw, dtype=np.uint8, offset=pos).reshape(h, w, 3)


def resize_image(img: np.ndarray, size: int) -> np.ndarray:
    if img.shape[0] == size and img.shape[1] == size:
        return img
    return np.asarray(Image.fromarray(img).resize((size, size), Image.BILINEAR))


# -- manifest ----------------------------------------------------------------

@dataclass
class ManifestEntry:
    sample_id: str
    class_id: int
    split: str
    points_file: str
    image_files: list = field(default_factory=list)


@dataclass
class DatasetManifest:
    root: Path
    classes: list
    entries: list

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def save(self):
        doc = {"format": "vipformer-manifest", "version": 1, "classes": list(self.classes),
               "entries": [vars(e) for e in self.entries]}
        Path(self.root).mkdir(parents=True, exist_ok=True)
        (Path(self.root) / MANIFEST_NAME).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, root, verify: bool = True) -> "DatasetManifest":
        root = Path(root)
        path = root / MANIFEST_NAME if root.is_dir() else root
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from None
        if doc.get("format") != "vipformer-manifest":
            raise DataError(f"{path}: not a vipformer manifest")
        entries = [ManifestEntry(**e) for e in doc["entries"]]
        m = cls(path.parent, list(doc["classes"]), entries)
        if verify:
            m.verify()
        return m

    def verify(self):
        c = self.num_classes
        seen = set()
        for e in self.entries:
            if not 0 <= e.class_id < c:
                raise DataError(f"{e.sample_id}: class id {e.class_id} outside [0, {c})")
            if e.split not in SPLITS:
                raise DataError(f"{e.sample_id}: unknown split {e.split!r}")
            seen.add(e.class_id)
            for f in [e.points_file, *e.image_files]:
                if not (self.root / f).is_file():
                    raise DataError(f"{e.sample_id}: missing file {f}")
        if seen and seen != set(range(c)):
            raise DataError(f"class ids are not dense in [0, {c})")


def generate_synthetic(root, class_count: int = 8, per_class: int = 64, n_points: int = 2048,
                       image_size: int = 144, views: int = 4, rng: RngStream | int = 0,
                       families=None, elevation: float = 0.4) -> DatasetManifest:
    """Write a procedural paired corpus under ``root`` and return its manifest."""
    if not isinstance(rng, RngStream):
        rng = RngStream(int(rng))
    families = list(families) if families is not None else list(FAMILIES[:class_count])
    for fam in families:
        if fam not in FAMILIES:
            raise ParameterError(f"unknown shape family {fam!r}; choose from {FAMILIES}")
    if not 1 <= class_count <= len(FAMILIES) or len(families) != class_count:
        raise ParameterError(f"class_count must be in [1, {len(FAMILIES)}] and match the family list")
    if views < 1 or per_class < 1 or n_points < 1:
        raise ParameterError("views, per_class and n_points must be positive")
    root = Path(root)
    (root / "points").mkdir(parents=True, exist_ok=True)
    (root / "images").mkdir(parents=True, exist_ok=True)
    n_val = int(round(per_class * 0.1875))
    n_test = int(round(per_class * 0.1875))
    entries = []
    for cid, fam in enumerate(families):
        order = rng.substream("split", fam).permutation(per_class)
        split_of = {}
        for rank, i in enumerate(order):
            split_of[int(i)] = "val" if rank < n_val else "test" if rank < n_val + n_test else "train"
        for i in range(per_class):
            srng = rng.substream("sample", fam, i)
            params = random_params(fam, srng.substream("params").generator)
            raw = sample_surface(fam, params, n_points, srng.substream("surface").generator)
            pts, center, scale = normalize_points(raw)
            sid = f"{fam}_{i:04d}"
            pfile = f"points/{sid}.vpts"
            write_vpts(root / pfile, pts)
            azimuths = srng.substream("views").uniform(0.0, 2 * np.pi, size=views)
            inside = inside_test(fam, params)
            ifiles = []
            for v, az in enumerate(azimuths):
                img = render_silhouette(inside, image_size, az, elevation, center, scale)
                ifile = f"images/{sid}_v{v}.ppm"
                write_ppm(root / ifile, img)
                ifiles.append(ifile)
            entries.append(ManifestEntry(sid, cid, split_of[i], pfile, ifiles))
    manifest = DatasetManifest(root, families, entries)
    manifest.save()
    return manifest


# -- in-memory datasets and batching ------------------------------------------

@dataclass
class Batch:
    points: list  # per-sample float32 [N, 3]
    images: np.ndarray | None  # float32 [B, H, W, 3] in [0, 1]
    labels: np.ndarray
    sample_ids: list
    indices: np.ndarray

    def __len__(self):
        return len(self.points)


class PairedDataset:
    """All samples of one split, loaded into memory (images kept as uint8)."""

    def __init__(self, manifest: DatasetManifest, split: str, sample_size: int | None = None,
                 rng: RngStream | None = None, image_size: int | None = None, load_images=True):
        entries = manifest.split(split)
        if not entries:
            raise ContractError(f"split {split!r} is empty")
        rng = rng if rng is not None else RngStream(0)
        self.split = split
        self.num_classes = manifest.num_classes
        self.sample_ids = [e.sample_id for e in entries]
        self.labels = np.array([e.class_id for e in entries], dtype=np.int64)
        self.points = [load_points(manifest.root / e.points_file, sample_size,
                                   rng.substream("subsample", e.sample_id))
                       for e in entries]
        self.images = None
        if load_images and all(e.image_files for e in entries):
            self.images = []
            for e in entries:
                views = [read_ppm(manifest.root / f) for f in e.image_files]
                if image_size is not None:
                    views = [resize_image(v, image_size) for v in views]
                self.images.append(views)

    def __len__(self):
        return len(self.points)

    @classmethod
    def from_arrays(cls, points, labels, images=None, num_classes=None, split="train"):
        self = cls.__new__(cls)
        self.split = split
        self.points = [np.asarray(p, dtype=np.float32) for p in points]
        self.labels = np.asarray(labels, dtype=np.int64)
        self.num_classes = int(num_classes if num_classes is not None else self.labels.max() + 1)
        self.sample_ids = [f"s{i:05d}" for i in range(len(self.points))]
        self.images = None if images is None else [[np.asarray(im)] for im in images]
        return self


def batch_iter(dataset: PairedDataset, batch_size: int, rng: RngStream | None = None,
               drop_last: bool = True, shuffle: bool = True, with_images: bool = True):
    """Yield :class:`Batch` objects; one random rendered view is paired per sample.

    Shuffling and view choice draw from ``rng`` (pass a fresh substream per
    epoch). With ``drop_last`` the trailing partial batch is discarded.
    """
    n = len(dataset)
    if n == 0:
        raise ContractError("cannot iterate an empty dataset")
    if batch_size < 1:
        raise ParameterError("batch_size must be positive")
    if shuffle:
        if rng is None:
            raise ParameterError("shuffling needs an rng")
        order = rng.substream("shuffle").permutation(n)
    else:
        order = np.arange(n)
    stop = n - n % batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        idx = order[start:start + batch_size]
        images = None
        if with_images and dataset.images is not None:
            picked = []
            for i in idx:
                views = dataset.images[i]
                v = 0 if rng is None else int(rng.substream("view", int(i)).integers(len(views)))
                picked.append(views[v])
            images = np.stack(picked).astype(np.float32) / np.float32(255.0)
        yield Batch([dataset.points[i] for i in idx], images, dataset.labels[idx],
                    [dataset.sample_ids[i] for i in idx], idx)
