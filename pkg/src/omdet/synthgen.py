"""Deterministic generator of fine-grained synthetic detection scenes.

Classes come in families sharing a silhouette; subclasses within a family
differ only by a cue whose magnitude scales with the confusability knob
``delta`` (ellipse aspect ratio, stripe contrast, trapezoid top width), so
smaller delta means more confusable subclasses. Objects are small and sparse,
leaving almost every spatial location background.

On-disk layout under a dataset directory:
  manifest.json                    counts, family structure, seed, checksum
  scene_<idx>.img                  magic "OMDS1", uint32 dims, float32 pixels
  annotations.jsonl                one record per scene
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .configio import from_dict, to_dict
from .errors import ContractError, DatasetFormatError

MAGIC = b"OMDS1"
FORMAT_VERSION = 1

# family silhouette constants (class cue scales with delta, these do not)
BAR_ASPECT = 1.6
BAR_STRIPES = 3
BAR_STRIPE_GAIN = 2.2
TRAPEZOID_TOP_BASE = 0.25
TRAPEZOID_TOP_GAIN = 1.1


@dataclass
class GenConfig:
    num_classes: int = 9
    num_families: int = 3
    image_size: int = 64
    delta: float = 0.08
    min_objects: int = 1
    max_objects: int = 4
    min_side: float = 9.0
    max_side: float = 22.0
    aspect_jitter: float = 0.25   # fraction of delta
    intensity: float = 0.62
    intensity_jitter: float = 0.10
    noise_sigma: float = 0.02
    max_clutter: int = 3
    background: float = 0.08
    max_place_tries: int = 20

    def __post_init__(self):
        if self.num_families < 1 or self.num_classes % self.num_families:
            raise ContractError(
                f"GenConfig: num_classes {self.num_classes} must split evenly "
                f"into {self.num_families} families"
            )
        if not (0.0 < self.delta <= 0.5):
            raise ContractError("GenConfig: delta must be in (0, 0.5]")
        if not (0 <= self.min_objects <= self.max_objects <= 6):
            raise ContractError("GenConfig: need 0 <= min_objects <= max_objects <= 6")
        if self.min_side < 4.0 or self.max_side > 24.0 or self.min_side > self.max_side:
            raise ContractError("GenConfig: sides must satisfy 4 <= min <= max <= 24")
        if self.image_size < 2 * self.max_side:
            raise ContractError("GenConfig: image too small for max_side")

    @property
    def subclasses_per_family(self) -> int:
        return self.num_classes // self.num_families

    def family_of(self, class_id: int) -> int:
        return class_id // self.subclasses_per_family


@dataclass
class Annotation:
    box: tuple  # (x1, y1, x2, y2) pixel coordinates
    class_id: int
    family_id: int


@dataclass
class Scene:
    image: np.ndarray  # [3, S, S] float64 in [0, 1]
    annotations: list
    seed: int
    fg_fraction: float | None = None  # generation-time stat, not serialized


@dataclass
class DatasetManifest:
    format_version: int
    seed: int
    scene_count: int
    num_classes: int
    num_families: int
    delta: float
    config: dict
    checksum: str


# ---------------------------------------------------------------------------
# shape rendering


def _pixel_grid(size: int):
    ys, xs = np.mgrid[0:size, 0:size]
    return xs + 0.5, ys + 0.5


def _ellipse_coverage(xs, ys, cx, cy, rx, ry):
    q = np.sqrt(((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2)
    sd = (q - 1.0) * min(rx, ry)
    return np.clip(0.5 - sd, 0.0, 1.0)


def _rect_sdf(xs, ys, cx, cy, hx, hy):
    ax = np.abs(xs - cx) - hx
    ay = np.abs(ys - cy) - hy
    outside = np.hypot(np.maximum(ax, 0.0), np.maximum(ay, 0.0))
    return outside + np.minimum(np.maximum(ax, ay), 0.0)


def _convex_sdf(xs, ys, vertices):
    # max of signed distances to edge lines; vertices counter-clockwise
    sd = np.full(xs.shape, -np.inf)
    n = len(vertices)
    for i in range(n):
        px, py = vertices[i]
        qx, qy = vertices[(i + 1) % n]
        ex, ey = qx - px, qy - py
        norm = np.hypot(ex, ey)
        nx, ny = -ey / norm, ex / norm  # outward for screen-CCW in y-down coords
        sd = np.maximum(sd, (xs - px) * nx + (ys - py) * ny)
    return sd


def _render_object(xs, ys, class_id: int, cx: float, cy: float, side: float,
                   orient: int, jitter: float, cfg: GenConfig):
    """Coverage in [0,1] and a multiplicative intensity pattern for one object."""
    m = class_id % cfg.subclasses_per_family
    family = cfg.family_of(class_id)
    pattern = None

    if family == 0:
        ratio = (1.0 + (m + 1) * cfg.delta) * (1.0 + jitter)
        long_r, short_r = side / 2.0, side / (2.0 * ratio)
        rx, ry = (long_r, short_r) if orient == 0 else (short_r, long_r)
        coverage = _ellipse_coverage(xs, ys, cx, cy, rx, ry)
    elif family == 1:
        aspect = BAR_ASPECT * (1.0 + jitter)
        long_h, short_h = side / 2.0, side / (2.0 * aspect)
        hx, hy = (long_h, short_h) if orient == 0 else (short_h, long_h)
        coverage = np.clip(0.5 - _rect_sdf(xs, ys, cx, cy, hx, hy), 0.0, 1.0)
        amp = m * cfg.delta * BAR_STRIPE_GAIN
        if amp > 0.0:
            u = ((xs - cx) if orient == 0 else (ys - cy)) / (2.0 * long_h) + 0.5
            pattern = 1.0 + amp * np.sin(2.0 * np.pi * BAR_STRIPES * u)
    else:
        top = side * np.clip(
            (TRAPEZOID_TOP_BASE + m * cfg.delta * TRAPEZOID_TOP_GAIN) * (1.0 + jitter),
            0.05, 0.9,
        )
        h2, b2, t2 = side / 2.0, side / 2.0, top / 2.0
        if orient == 0:  # narrow side up (y-down coordinates)
            verts = [(-b2, h2), (b2, h2), (t2, -h2), (-t2, -h2)]
        else:
            verts = [(-t2, h2), (t2, h2), (b2, -h2), (-b2, -h2)]
        verts = [(cx + vx, cy + vy) for vx, vy in verts]
        coverage = np.clip(0.5 - _convex_sdf(xs, ys, verts), 0.0, 1.0)

    return coverage, pattern


def render_template(class_id: int, cfg: GenConfig, side: float = 16.0) -> np.ndarray:
    """Noise-free centered rendering of one class, for confusability checks."""
    xs, ys = _pixel_grid(cfg.image_size)
    c = cfg.image_size / 2.0
    coverage, pattern = _render_object(xs, ys, class_id, c, c, side, 0, 0.0, cfg)
    img = np.full((cfg.image_size, cfg.image_size), cfg.background)
    shade = coverage * cfg.intensity
    if pattern is not None:
        shade = shade * pattern
    return np.clip(np.maximum(img, shade), 0.0, 1.0)


def _mask_bbox(mask: np.ndarray):
    rows = np.any(mask, axis=1)
    cols = np.any(mask, axis=0)
    if not rows.any():
        return None
    y_idx = np.where(rows)[0]
    x_idx = np.where(cols)[0]
    return (float(x_idx[0]), float(y_idx[0]), float(x_idx[-1] + 1), float(y_idx[-1] + 1))


def _boxes_overlap(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua


def generate_scene(seed: int, cfg: GenConfig) -> Scene:
    """Render one scene; a pure function of (seed, cfg)."""
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    xs, ys = _pixel_grid(size)
    gray = np.full((size, size), cfg.background)
    union_mask = np.zeros((size, size), dtype=bool)
    annotations: list[Annotation] = []

    count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    placed_estimates: list[tuple] = []
    for _ in range(count):
        class_id = int(rng.integers(cfg.num_classes))
        # keep the shortest rendered extent above the 4px floor
        worst_ratio = max(1.0 + cfg.subclasses_per_family * cfg.delta, BAR_ASPECT)
        lo = max(cfg.min_side, 4.6 * worst_ratio)
        side = float(rng.uniform(min(lo, cfg.max_side), cfg.max_side))
        orient = int(rng.integers(2))
        jitter = float(rng.uniform(-1.0, 1.0)) * cfg.aspect_jitter * cfg.delta
        placed = False
        for _ in range(cfg.max_place_tries):
            margin = side / 2.0 + 2.0
            cx = float(rng.uniform(margin, size - margin))
            cy = float(rng.uniform(margin, size - margin))
            est = (cx - side / 2, cy - side / 2, cx + side / 2, cy + side / 2)
            if all(_boxes_overlap(est, other) <= 0.10 for other in placed_estimates):
                placed = True
                break
        if not placed:
            continue  # emit the scene with fewer objects
        placed_estimates.append(est)

        coverage, pattern = _render_object(xs, ys, class_id, cx, cy, side, orient, jitter, cfg)
        mask = coverage > 0.5
        box = _mask_bbox(mask)
        if box is None:
            continue
        shade = coverage * (cfg.intensity + float(rng.uniform(-1, 1)) * cfg.intensity_jitter)
        if pattern is not None:
            shade = shade * pattern
        gray = np.maximum(gray, shade)
        union_mask |= mask
        annotations.append(Annotation(box=box, class_id=class_id,
                                      family_id=cfg.family_of(class_id)))

    for _ in range(int(rng.integers(0, cfg.max_clutter + 1))):
        bx = float(rng.uniform(2, size - 2))
        by = float(rng.uniform(2, size - 2))
        br = float(rng.uniform(1.0, 2.5))
        amp = float(rng.uniform(0.10, 0.28))
        bump = amp * np.exp(-(((xs - bx) ** 2 + (ys - by) ** 2) / (2 * br * br)))
        gray = np.maximum(gray, bump)

    if cfg.noise_sigma > 0:
        gray = gray + rng.normal(0.0, cfg.noise_sigma, gray.shape)
    gray = np.clip(gray, 0.0, 1.0)

    image = np.repeat(gray[None, :, :], 3, axis=0)
    return Scene(image=image, annotations=annotations, seed=seed,
                 fg_fraction=float(union_mask.mean()))


def scene_seed(master_seed: int, index: int) -> int:
    """Stable per-scene seed derived from the master seed and scene index."""
    return int(np.random.SeedSequence((master_seed, index)).generate_state(1)[0])


def generate_dataset(master_seed: int, count: int, cfg: GenConfig) -> list[Scene]:
    return [generate_scene(scene_seed(master_seed, i), cfg) for i in range(count)]


# ---------------------------------------------------------------------------
# on-disk format


def _scene_filename(index: int) -> str:
    return f"scene_{index:05d}.img"


def _encode_image(image: np.ndarray) -> bytes:
    c, h, w = image.shape
    header = MAGIC + struct.pack("<III", c, h, w)
    return header + image.astype("<f4").tobytes()


def _decode_image(raw: bytes, path: str) -> np.ndarray:
    if len(raw) < len(MAGIC) + 12:
        raise DatasetFormatError("truncated", f"{path} shorter than header")
    if raw[: len(MAGIC)] != MAGIC:
        raise DatasetFormatError("bad_magic", f"{path} does not start with {MAGIC!r}")
    c, h, w = struct.unpack("<III", raw[len(MAGIC):len(MAGIC) + 12])
    expected = len(MAGIC) + 12 + 4 * c * h * w
    if len(raw) != expected:
        raise DatasetFormatError(
            "truncated", f"{path}: expected {expected} bytes, found {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=len(MAGIC) + 12)
    return data.reshape(c, h, w).astype(np.float64)


def write_dataset(scenes: list[Scene], path, cfg: GenConfig, master_seed: int) -> DatasetManifest:
    """Write scenes + manifest; returns the manifest (checksum included)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    digest = hashlib.sha256()
    for i, scene in enumerate(scenes):
        blob = _encode_image(scene.image)
        (root / _scene_filename(i)).write_bytes(blob)
        digest.update(blob)
    ann_lines = []
    for i, scene in enumerate(scenes):
        rec = {
            "scene_id": i,
            "seed": scene.seed,
            "boxes": [[*ann.box, ann.class_id] for ann in scene.annotations],
        }
        ann_lines.append(json.dumps(rec, sort_keys=True))
    ann_blob = ("\n".join(ann_lines) + ("\n" if ann_lines else "")).encode("utf-8")
    (root / "annotations.jsonl").write_bytes(ann_blob)
    digest.update(ann_blob)

    manifest = DatasetManifest(
        format_version=FORMAT_VERSION,
        seed=master_seed,
        scene_count=len(scenes),
        num_classes=cfg.num_classes,
        num_families=cfg.num_families,
        delta=cfg.delta,
        config=to_dict(cfg),
        checksum=digest.hexdigest(),
    )
    with open(root / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(dataclasses.asdict(manifest), fh, sort_keys=True, indent=1)
    return manifest


def read_manifest(path) -> DatasetManifest:
    mpath = Path(path) / "manifest.json"
    if not mpath.exists():
        raise DatasetFormatError("missing_file", f"{mpath} not found")
    with open(mpath, encoding="utf-8") as fh:
        d = json.load(fh)
    if d.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(
            "version_mismatch",
            f"{mpath}: format_version {d.get('format_version')} != {FORMAT_VERSION}",
        )
    return DatasetManifest(**d)


def read_dataset(path) -> tuple[list[Scene], DatasetManifest]:
    """Load a dataset directory, verifying format and checksum."""
    root = Path(path)
    manifest = read_manifest(root)
    cfg = from_dict(GenConfig, manifest.config)
    digest = hashlib.sha256()
    images = []
    for i in range(manifest.scene_count):
        fpath = root / _scene_filename(i)
        if not fpath.exists():
            raise DatasetFormatError("missing_file", f"{fpath} not found")
        raw = fpath.read_bytes()
        digest.update(raw)
        images.append(_decode_image(raw, str(fpath)))
    apath = root / "annotations.jsonl"
    if not apath.exists():
        raise DatasetFormatError("missing_file", f"{apath} not found")
    ann_blob = apath.read_bytes()
    digest.update(ann_blob)
    if digest.hexdigest() != manifest.checksum:
        raise DatasetFormatError("checksum", f"{root}: content does not match manifest")

    scenes = []
    for line in ann_blob.decode("utf-8").splitlines():
        rec = json.loads(line)
        anns = [
            Annotation(
                box=tuple(float(v) for v in b[:4]),
                class_id=int(b[4]),
                family_id=cfg.family_of(int(b[4])),
            )
            for b in rec["boxes"]
        ]
        scenes.append(Scene(image=images[rec["scene_id"]], annotations=anns,
                            seed=int(rec["seed"])))
    if len(scenes) != manifest.scene_count:
        raise DatasetFormatError(
            "truncated",
            f"{apath}: {len(scenes)} records for {manifest.scene_count} scenes",
        )
    return scenes, manifest
