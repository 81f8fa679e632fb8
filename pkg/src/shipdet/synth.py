"""Deterministic synthetic SAR-like scenes with ship ground truth.

A scene is a clean reflectivity map (sea level, optional land band, bright
elliptical ships with soft edges) multiplied by L-look gamma speckle with
unit mean. Everything is a pure function of (seed, index).
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_dilation, gaussian_filter

from .head import Box
from .tensor import Tensor

log = logging.getLogger(__name__)

SMALL_AREA = 32 ** 2
LARGE_AREA = 96 ** 2
PGM_SCALE = 1000.0
MAX_ATTEMPTS = 100


def size_bucket(area: float) -> str:
    if area < SMALL_AREA:
        return "small"
    if area < LARGE_AREA:
        return "medium"
    return "large"


@dataclass
class SceneSpec:
    seed: int = 0
    size: int = 128
    n_ships: tuple[int, int] = (1, 6)
    length: tuple[float, float] = (10.0, 40.0)
    aspect: tuple[float, float] = (3.0, 6.0)
    dense_cluster_prob: float = 0.3
    cluster_size: tuple[int, int] = (2, 4)
    cluster_gap: float = 2.0
    land_band: float | None = None
    land_prob: float = 1.0
    speckle_looks: int = 4
    sea_mean: float = 1.0
    ship_contrast: tuple[float, float] = (4.0, 8.0)
    edge_sigma: float = 1.0
    cluster_angle_jitter: float = 15.0
    min_width: float = 2.0

    def __post_init__(self):
        for name in ("n_ships", "length", "aspect", "cluster_size", "ship_contrast"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.size <= 0 or self.size % 32:
            raise ValueError(f"scene size must be a positive multiple of 32, got {self.size}")
        lo, hi = self.n_ships
        if not 0 <= lo <= hi:
            raise ValueError(f"bad n_ships range {self.n_ships}")
        for name in ("length", "aspect", "ship_contrast"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"bad {name} range {(lo, hi)}")
        if self.ship_contrast[0] < 4.0:
            raise ValueError("ship contrast must be at least 4x the sea mean")
        lo, hi = self.cluster_size
        if not 2 <= lo <= hi:
            raise ValueError(f"cluster size range must start at 2, got {self.cluster_size}")
        if not 0.0 <= self.dense_cluster_prob <= 1.0 or not 0.0 <= self.land_prob <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        if self.cluster_gap < 1.0:
            raise ValueError("cluster_gap must be at least 1 pixel")
        if self.land_band is not None and not 0.0 < self.land_band < 0.5:
            raise ValueError("land_band must be a fraction in (0, 0.5)")
        if self.speckle_looks < 1 or self.sea_mean <= 0:
            raise ValueError("speckle_looks must be >= 1 and sea_mean > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Annotation:
    image_id: str
    boxes: list[Box] = field(default_factory=list)
    size_buckets: list[str] = field(default_factory=list)
    clusters: list[int] = field(default_factory=list)

    def box_array(self) -> np.ndarray:
        return np.array([b.as_list() for b in self.boxes], dtype=float).reshape(-1, 4)

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "boxes": [b.as_list() for b in self.boxes],
            "size_buckets": list(self.size_buckets),
            "clusters": list(self.clusters),
        }

    @classmethod
    def from_json(cls, d: dict) -> Annotation:
        boxes = [Box(*map(float, b)) for b in d.get("boxes", [])]
        buckets = d.get("size_buckets") or [size_bucket(b.area) for b in boxes]
        clusters = d.get("clusters") or [-1] * len(boxes)
        return cls(str(d["image_id"]), boxes, list(buckets), list(clusters))


@dataclass
class Scene:
    image: np.ndarray  # (S, S) speckled intensity
    annotation: Annotation
    seed: int
    index: int
    sea_mask: np.ndarray  # pixels with no ship or land contribution


def image_id_for(spec: SceneSpec, index: int) -> str:
    return f"s{spec.seed}_{index:05d}"


def _ship_field(size: int, cx: float, cy: float, theta: float, half_len: float, half_wid: float, sigma: float):
    """(mask, falloff) on the pixel grid for one elliptical ship."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    c, s = math.cos(theta), math.sin(theta)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    r = np.sqrt((u / half_len) ** 2 + (v / half_wid) ** 2)
    mask = r <= 1.0
    # first-order distance to the ellipse boundary: (r - 1) / |grad r|
    grad = np.hypot(u / half_len ** 2, v / half_wid ** 2) / np.maximum(r, 1e-9)
    outside = np.maximum(r - 1.0, 0.0) / np.maximum(grad, 1e-9)
    falloff = np.exp(-0.5 * (outside / sigma) ** 2)
    return mask, falloff


def _mask_box(mask: np.ndarray) -> Box | None:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return Box(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def _edge_distance(a: Box, b: Box) -> float:
    dx = max(b.x1 - a.x2, a.x1 - b.x2, 0.0)
    dy = max(b.y1 - a.y2, a.y1 - b.y2, 0.0)
    return math.hypot(dx, dy)


def _land(spec: SceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    s = spec.size
    width = spec.land_band * s
    coast = width + gaussian_filter(rng.normal(0, 1, s), 6) * 0.15 * width * 6
    mask = np.arange(s)[None, :] < coast[:, None]
    texture = np.exp(gaussian_filter(rng.normal(0, 1, (s, s)), 3) * 4.0)
    texture /= texture.mean()
    return mask, 3.0 * spec.sea_mean * texture


def render_scene(spec: SceneSpec, index: int) -> Scene:
    spec.validate()
    rng = np.random.default_rng([spec.seed & 0xFFFFFFFF, spec.seed >> 32, index])
    s = spec.size
    refl = np.full((s, s), spec.sea_mean)
    blocked = np.zeros((s, s), bool)
    land_mask = np.zeros((s, s), bool)
    if spec.land_band is not None and rng.random() < spec.land_prob:
        land_mask, land_refl = _land(spec, rng)
        refl[land_mask] = land_refl[land_mask]
        blocked |= binary_dilation(land_mask, iterations=3)

    boxes: list[Box] = []
    clusters: list[int] = []
    ship_union = np.zeros((s, s), bool)
    target = int(rng.integers(spec.n_ships[0], spec.n_ships[1] + 1))
    want_cluster = target >= 2 and rng.random() < spec.dense_cluster_prob
    attempts = 0
    cluster_id = 0
    while len(boxes) < target and attempts < MAX_ATTEMPTS:
        attempts += 1
        room = target - len(boxes)
        if want_cluster and room >= 2:
            m = int(rng.integers(spec.cluster_size[0], min(spec.cluster_size[1], room) + 1))
        else:
            m = 1
        placed = _try_place(spec, rng, m, blocked)
        if placed is None:
            continue
        ships, union = placed
        for mask, falloff, peak, box in ships:
            refl = np.maximum(refl, spec.sea_mean + (peak - spec.sea_mean) * falloff)
            boxes.append(box)
            clusters.append(cluster_id if m > 1 else -1)
        if m > 1:
            cluster_id += 1
            want_cluster = False
        ship_union |= union
        blocked |= binary_dilation(union, iterations=int(math.ceil(spec.cluster_gap)) + 2)
    if len(boxes) < target:
        log.info("scene %d: placed %d of %d ships after %d attempts", index, len(boxes), target, attempts)

    speckle = rng.gamma(spec.speckle_looks, 1.0 / spec.speckle_looks, size=(s, s))
    image = refl * speckle
    halo = binary_dilation(ship_union, iterations=4) if ship_union.any() else ship_union
    sea = ~(halo | land_mask)
    ann = Annotation(image_id_for(spec, index), boxes, [size_bucket(b.area) for b in boxes], clusters)
    return Scene(image, ann, spec.seed, index, sea)


def _try_place(spec: SceneSpec, rng: np.random.Generator, m: int, blocked: np.ndarray):
    s = spec.size
    if m > 1:
        # berthed rows: headings near the image axes
        jitter = math.radians(spec.cluster_angle_jitter)
        theta = rng.integers(0, 2) * math.pi / 2 + rng.uniform(-jitter, jitter)
    else:
        theta = rng.uniform(0, math.pi)
    base_len = rng.uniform(*spec.length)
    cx, cy = rng.uniform(0, s, size=2)
    normal = (-math.sin(theta), math.cos(theta))
    ships = []
    offset = 0.0
    prev_half = None
    for i in range(m):
        length = base_len * (rng.uniform(0.85, 1.15) if m > 1 else 1.0)
        length = min(max(length, spec.length[0]), spec.length[1])
        half_len = length / 2
        half_wid = max(spec.min_width / 2, half_len / rng.uniform(*spec.aspect))
        if prev_half is not None:
            offset += prev_half + spec.cluster_gap + half_wid
        prev_half = half_wid
        px, py = cx + offset * normal[0], cy + offset * normal[1]
        mask, falloff = _ship_field(s, px, py, theta, half_len, half_wid, spec.edge_sigma)
        box = _mask_box(mask)
        if box is None or box.area < 4 or box.x2 - box.x1 < 2 or box.y2 - box.y1 < 2:
            return None
        if box.x1 < 1 or box.y1 < 1 or box.x2 > s - 1 or box.y2 > s - 1:
            return None
        if (mask & blocked).any():
            return None
        peak = spec.sea_mean * rng.uniform(*spec.ship_contrast)
        ships.append((mask, falloff, peak, box))
    union = np.zeros((s, s), bool)
    for mask, *_ in ships:
        if (binary_dilation(mask) & union).any():
            return None
        union |= mask
    if m > 1:
        bx = [sh[3] for sh in ships]
        if not any(_edge_distance(bx[i], bx[i + 1]) <= spec.cluster_gap for i in range(m - 1)):
            return None
    return ships, union


def generate_scene(spec: SceneSpec, index: int) -> tuple[Tensor, Annotation]:
    scene = render_scene(spec, index)
    s = spec.size
    return Tensor(scene.image.reshape(1, 1, s, s)), scene.annotation


def cluster_pairs_within_gap(ann: Annotation, gap: float) -> int:
    """Number of box pairs whose axis-aligned edge distance is at most ``gap``."""
    n = len(ann.boxes)
    return sum(
        _edge_distance(ann.boxes[i], ann.boxes[j]) <= gap
        for i in range(n) for j in range(i + 1, n)
    )


# ---------------------------------------------------------------------------
# PGM + JSON-lines dataset layout
# ---------------------------------------------------------------------------
def to_pgm_values(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * PGM_SCALE), 0, 65535).astype(np.uint16)


def write_pgm(path: str | Path, values: np.ndarray) -> None:
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError("PGM needs a 2-d array")
    h, w = values.shape
    data = np.clip(values, 0, 65535).astype(">u2").tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(data)


def read_pgm(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos].decode("ascii"))
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != "P5":
        raise ValueError(f"{path}: not a binary PGM ({magic})")
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(buf, dtype=dtype, count=w * h, offset=pos).reshape(h, w).astype(np.uint16)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_dataset(spec: SceneSpec, n_images: int, out_dir: str | Path, start_index: int = 0) -> dict:
    """Write ``n_images`` scenes as 16-bit PGMs plus annotations and a manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    files = []
    lines = []
    for index in range(start_index, start_index + n_images):
        scene = render_scene(spec, index)
        name = f"images/{scene.annotation.image_id}.pgm"
        write_pgm(out / name, to_pgm_values(scene.image))
        files.append({"image_id": scene.annotation.image_id, "file": name, "sha256": _sha256(out / name)})
        lines.append(json.dumps(scene.annotation.to_json(), sort_keys=True))
    ann_path = out / "annotations.jsonl"
    ann_path.write_text("".join(line + "\n" for line in lines))
    digest = hashlib.sha256()
    for f in files:
        digest.update(f["sha256"].encode())
    digest.update(_sha256(ann_path).encode())
    manifest = {
        "spec": spec.to_dict(),
        "n_images": n_images,
        "start_index": start_index,
        "images": files,
        "annotations": "annotations.jsonl",
        "annotations_sha256": _sha256(ann_path),
        "checksum": digest.hexdigest(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read_annotations(path: str | Path) -> list[Annotation]:
    anns = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            anns.append(Annotation.from_json(json.loads(line)))
    return anns


@dataclass
class Sample:
    image: np.ndarray  # (S, S) zero-mean unit-std
    annotation: Annotation


def normalize_image(values: np.ndarray) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64)
    std = x.std()
    return (x - x.mean()) / (std if std > 0 else 1.0)


def load_dataset(data_dir: str | Path) -> list[Sample]:
    """Load a dataset written by :func:`write_dataset` (or converted real data in the same layout)."""
    root = Path(data_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no manifest.json in {root}")
    manifest = json.loads(manifest_path.read_text())
    anns = {a.image_id: a for a in read_annotations(root / manifest.get("annotations", "annotations.jsonl"))}
    samples = []
    for entry in manifest["images"]:
        values = read_pgm(root / entry["file"])
        ann = anns.get(entry["image_id"], Annotation(entry["image_id"]))
        samples.append(Sample(normalize_image(values), ann))
    if not samples:
        raise ValueError(f"dataset in {root} is empty")
    return samples
