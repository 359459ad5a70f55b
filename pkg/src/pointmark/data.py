"""Synthetic desk-scale datasets and on-disk persistence.

Clouds come from a catalog of parametric surfaces (spheres, boxes,
cylinders, tori, ...), jittered and normalized into [0,1]^3.  Datasets
persist as a JSON manifest plus one plain-text cloud file per sample;
coordinates round-trip bit-exactly through the shortest-repr float
formatting.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import CloudParseError, InvalidArgumentError, ManifestValidationError
from .geometry import as_cloud, normalize_cloud
from .rng import rng_for

MANIFEST_VERSION = 1
SPLITS = ("train", "test", "verify")


# ---------------------------------------------------------------------------
# parametric surface samplers (canonical scale; normalized afterwards)

def _sample_sphere(rng, n, radii=(1.0, 1.0, 1.0)):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * np.asarray(radii)


def _sample_box(rng, n, half=(1.0, 1.0, 1.0)):
    hx, hy, hz = half
    areas = np.array([hy * hz, hx * hz, hx * hy], dtype=float)
    areas /= areas.sum()
    axis = rng.choice(3, size=n, p=areas)
    side = rng.choice([-1.0, 1.0], size=n)
    u = rng.uniform(-1, 1, size=(n, 3)) * np.asarray(half)
    pts = u
    for i, h in enumerate(half):
        mask = axis == i
        pts[mask, i] = side[mask] * h
    return pts


def _sample_cylinder(rng, n, radius=0.5, height=2.0):
    lateral = 2 * math.pi * radius * height
    caps = 2 * math.pi * radius ** 2
    on_side = rng.uniform(size=n) < lateral / (lateral + caps)
    ang = rng.uniform(0, 2 * math.pi, n)
    pts = np.empty((n, 3))
    pts[:, 0] = np.cos(ang)
    pts[:, 1] = np.sin(ang)
    r_disk = radius * np.sqrt(rng.uniform(size=n))
    pts[~on_side, 0] *= r_disk[~on_side]
    pts[~on_side, 1] *= r_disk[~on_side]
    pts[on_side, 0] *= radius
    pts[on_side, 1] *= radius
    pts[:, 2] = np.where(
        on_side,
        rng.uniform(-height / 2, height / 2, n),
        rng.choice([-1.0, 1.0], size=n) * height / 2,
    )
    return pts


def _sample_cone(rng, n, radius=1.0, height=1.5):
    slant_area = math.pi * radius * math.hypot(radius, height)
    base_area = math.pi * radius ** 2
    on_side = rng.uniform(size=n) < slant_area / (slant_area + base_area)
    ang = rng.uniform(0, 2 * math.pi, n)
    frac = np.sqrt(rng.uniform(size=n))  # uniform over the unrolled sector
    r = np.where(on_side, frac * radius, radius * np.sqrt(rng.uniform(size=n)))
    z = np.where(on_side, height * (1.0 - frac), 0.0)
    return np.stack([r * np.cos(ang), r * np.sin(ang), z - height / 3], axis=1)


def _sample_torus(rng, n, ring=1.0, tube=0.35):
    pts = np.empty((n, 3))
    filled = 0
    while filled < n:
        take = (n - filled) * 2 + 8
        u = rng.uniform(0, 2 * math.pi, take)
        v = rng.uniform(0, 2 * math.pi, take)
        keep = rng.uniform(size=take) < (ring + tube * np.cos(v)) / (ring + tube)
        u, v = u[keep], v[keep]
        got = min(len(u), n - filled)
        r = ring + tube * np.cos(v[:got])
        pts[filled : filled + got, 0] = r * np.cos(u[:got])
        pts[filled : filled + got, 1] = r * np.sin(u[:got])
        pts[filled : filled + got, 2] = tube * np.sin(v[:got])
        filled += got
    return pts


def _sample_pyramid(rng, n, half_base=1.0, height=1.6):
    apex = np.array([0.0, 0.0, height])
    corners = np.array(
        [[-half_base, -half_base, 0], [half_base, -half_base, 0],
         [half_base, half_base, 0], [-half_base, half_base, 0]]
    )
    tri_area = 4 * (0.5 * np.linalg.norm(np.cross(corners[1] - corners[0], apex - corners[0])))
    base_area = (2 * half_base) ** 2
    on_side = rng.uniform(size=n) < tri_area / (tri_area + base_area)
    face = rng.integers(0, 4, size=n)
    u = rng.uniform(size=n)
    v = rng.uniform(size=n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    a = corners[face]
    b = corners[(face + 1) % 4]
    side_pts = a + u[:, None] * (b - a) + v[:, None] * (apex - a)
    base_pts = np.stack(
        [rng.uniform(-half_base, half_base, n), rng.uniform(-half_base, half_base, n), np.zeros(n)],
        axis=1,
    )
    pts = np.where(on_side[:, None], side_pts, base_pts)
    pts[:, 2] -= height / 3
    return pts


def _sample_bumpy_plane(rng, n, bumps=((0.0, 0.0, 0.9),), width=0.45):
    xy = rng.uniform(-1, 1, size=(n, 2))
    z = np.zeros(n)
    for bx, by, h in bumps:
        d2 = (xy[:, 0] - bx) ** 2 + (xy[:, 1] - by) ** 2
        z += h * np.exp(-d2 / width ** 2)
    return np.column_stack([xy, z])


def _sample_helix(rng, n, turns=2.0, ring=0.8, tube=0.1, height=1.6, strands=1):
    strand = rng.integers(0, strands, size=n)
    t = rng.uniform(0, 2 * math.pi * turns, n)
    phase = strand * (2 * math.pi / max(strands, 1))
    ang = t + phase
    center = np.stack(
        [ring * np.cos(ang), ring * np.sin(ang), height * t / (2 * math.pi * turns) - height / 2],
        axis=1,
    )
    tangent = np.stack(
        [-ring * np.sin(ang), ring * np.cos(ang), np.full(n, height / (2 * math.pi * turns))],
        axis=1,
    )
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    ref = np.tile(np.array([0.0, 0.0, 1.0]), (n, 1))
    n1 = np.cross(tangent, ref)
    n1 /= np.linalg.norm(n1, axis=1, keepdims=True)
    n2 = np.cross(tangent, n1)
    beta = rng.uniform(0, 2 * math.pi, n)
    return center + tube * (np.cos(beta)[:, None] * n1 + np.sin(beta)[:, None] * n2)


SHAPE_CATALOG = (
    ("sphere", _sample_sphere, {}),
    ("cube", _sample_box, {}),
    ("cylinder", _sample_cylinder, {}),
    ("cone", _sample_cone, {}),
    ("torus", _sample_torus, {}),
    ("pyramid", _sample_pyramid, {}),
    ("bumpy-plane", _sample_bumpy_plane, {}),
    ("helix", _sample_helix, {}),
    ("ellipsoid", _sample_sphere, {"radii": (1.0, 0.55, 0.35)}),
    ("slab", _sample_box, {"half": (1.0, 0.8, 0.25)}),
    ("thin-cylinder", _sample_cylinder, {"radius": 0.18, "height": 2.0}),
    ("squat-cone", _sample_cone, {"radius": 1.2, "height": 0.6}),
    ("thin-torus", _sample_torus, {"tube": 0.12}),
    ("tall-pyramid", _sample_pyramid, {"half_base": 0.6, "height": 2.4}),
    ("two-bump-plane", _sample_bumpy_plane, {"bumps": ((-0.5, -0.5, 0.8), (0.5, 0.5, -0.8)), "width": 0.4}),
    ("double-helix", _sample_helix, {"strands": 2, "tube": 0.08}),
)

MAX_CLASSES = len(SHAPE_CATALOG)


@dataclass
class SyntheticShapeSpec:
    class_count: int = 8
    samples_per_class: int = 160
    points_per_cloud: int = 256
    jitter: float = 0.02
    seed: int = 0
    split_fractions: tuple = (0.7, 0.15, 0.15)
    extra_verify_per_class: int = 0

    def __post_init__(self):
        if not 2 <= self.class_count <= MAX_CLASSES:
            raise InvalidArgumentError(
                f"class_count must be in [2, {MAX_CLASSES}], got {self.class_count}"
            )
        if self.points_per_cloud < 64:
            raise InvalidArgumentError("points_per_cloud must be >= 64")
        if self.jitter < 0:
            raise InvalidArgumentError("jitter must be >= 0")
        if self.samples_per_class < 1:
            raise InvalidArgumentError("samples_per_class must be >= 1")
        fr = tuple(float(f) for f in self.split_fractions)
        if len(fr) != 3 or abs(sum(fr) - 1.0) > 1e-9 or any(f < 0 for f in fr):
            raise InvalidArgumentError("split_fractions must be three nonnegative values summing to 1")
        object.__setattr__(self, "split_fractions", fr)

    def to_dict(self):
        return {
            "class_count": self.class_count,
            "samples_per_class": self.samples_per_class,
            "points_per_cloud": self.points_per_cloud,
            "jitter": self.jitter,
            "seed": self.seed,
            "split_fractions": list(self.split_fractions),
            "extra_verify_per_class": self.extra_verify_per_class,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "split_fractions" in d:
            d["split_fractions"] = tuple(d["split_fractions"])
        return cls(**d)


@dataclass
class Sample:
    cloud: np.ndarray
    label: int
    split: str
    watermark: dict | None = None


@dataclass
class Dataset:
    samples: list
    class_names: list
    seeds: dict = field(default_factory=dict)
    spec: dict | None = None
    watermark: dict | None = None

    @property
    def class_count(self):
        return len(self.class_names)

    def __len__(self):
        return len(self.samples)

    def indices(self, split=None, label=None, exclude_label=None):
        out = []
        for i, s in enumerate(self.samples):
            if split is not None and s.split != split:
                continue
            if label is not None and s.label != label:
                continue
            if exclude_label is not None and s.label == exclude_label:
                continue
            out.append(i)
        return out

    def clouds(self, indices):
        return np.stack([self.samples[i].cloud for i in indices])

    def labels(self, indices):
        return np.array([self.samples[i].label for i in indices], dtype=np.int64)

    def copy(self):
        return Dataset(
            samples=[Sample(s.cloud.copy(), s.label, s.split,
                            None if s.watermark is None else dict(s.watermark))
                     for s in self.samples],
            class_names=list(self.class_names),
            seeds=dict(self.seeds),
            spec=None if self.spec is None else dict(self.spec),
            watermark=None if self.watermark is None else dict(self.watermark),
        )


def sample_class_cloud(spec, class_index, sample_index):
    """One normalized, jittered cloud for the given class; pure in its seeds."""
    name, fn, kwargs = SHAPE_CATALOG[class_index]
    rng = rng_for("cloud", spec.seed, class_index, sample_index)
    pts = fn(rng, spec.points_per_cloud, **kwargs)
    if spec.jitter > 0:
        pts = pts + rng.normal(scale=spec.jitter, size=pts.shape)
    return normalize_cloud(pts)


def _split_counts(n, fractions):
    n_test = round(n * fractions[1])
    n_verify = round(n * fractions[2])
    n_train = n - n_test - n_verify
    return n_train, n_test, n_verify


def generate_synthetic_dataset(spec):
    """Deterministic dataset; stratified train/test/verify split per class."""
    samples = []
    n_train, n_test, n_verify = _split_counts(spec.samples_per_class, spec.split_fractions)
    for c in range(spec.class_count):
        for i in range(spec.samples_per_class + spec.extra_verify_per_class):
            if i < n_train:
                split = "train"
            elif i < n_train + n_test:
                split = "test"
            else:
                split = "verify"
            samples.append(Sample(cloud=sample_class_cloud(spec, c, i), label=c, split=split))
    names = [SHAPE_CATALOG[c][0] for c in range(spec.class_count)]
    return Dataset(samples=samples, class_names=names, seeds={"data": spec.seed}, spec=spec.to_dict())


# ---------------------------------------------------------------------------
# persistence

def write_cloud_file(path, cloud):
    cloud = as_cloud(cloud)
    lines = [str(cloud.shape[0])]
    for p in cloud.tolist():  # python floats: repr is shortest exact round-trip
        lines.append(f"{p[0]!r} {p[1]!r} {p[2]!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_cloud_file(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise CloudParseError(f"{path}: empty cloud file")
    try:
        count = int(lines[0].strip())
    except ValueError:
        raise CloudParseError(f"{path}: line 1: expected point count, got {lines[0]!r}") from None
    rows = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise CloudParseError(f"{path}: line {ln}: expected 3 coordinates, got {len(parts)}")
        try:
            rows.append([float(v) for v in parts])
        except ValueError:
            raise CloudParseError(f"{path}: line {ln}: malformed coordinate") from None
    if len(rows) != count:
        raise CloudParseError(
            f"{path}: line {len(lines)}: header says {count} points, found {len(rows)}"
        )
    try:
        return as_cloud(np.array(rows, dtype=np.float64).reshape(len(rows), 3))
    except InvalidArgumentError as exc:
        raise CloudParseError(f"{path}: {exc}") from None


def save_dataset(dataset, path, inline=False):
    """Write manifest.json (+ clouds/*.xyz unless inline) under `path`."""
    os.makedirs(path, exist_ok=True)
    records = []
    if not inline:
        os.makedirs(os.path.join(path, "clouds"), exist_ok=True)
    for i, s in enumerate(dataset.samples):
        rec = {"label": int(s.label), "split": s.split}
        if s.watermark is not None:
            rec["watermark"] = s.watermark
        if inline:
            rec["points"] = s.cloud.tolist()
        else:
            rel = f"clouds/{i:05d}.xyz"
            write_cloud_file(os.path.join(path, rel), s.cloud)
            rec["file"] = rel
        records.append(rec)
    manifest = {
        "format_version": MANIFEST_VERSION,
        "kind": "pointmark-dataset",
        "class_names": list(dataset.class_names),
        "seeds": dataset.seeds,
        "spec": dataset.spec,
        "watermark": dataset.watermark,
        "samples": records,
    }
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)


def load_dataset(path):
    """Read a dataset directory; validates manifest consistency on load."""
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise ManifestValidationError(f"{manifest_path}: missing manifest")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("kind") != "pointmark-dataset":
        raise ManifestValidationError(f"{manifest_path}: not a dataset manifest")
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise ManifestValidationError(
            f"{manifest_path}: unsupported format version {manifest.get('format_version')}"
        )
    class_names = manifest["class_names"]
    k = len(class_names)
    samples = []
    for i, rec in enumerate(manifest["samples"]):
        label = int(rec["label"])
        if not 0 <= label < k:
            raise ManifestValidationError(f"sample {i}: label {label} outside [0, {k})")
        split = rec["split"]
        if split not in SPLITS:
            raise ManifestValidationError(f"sample {i}: unknown split tag {split!r}")
        if "file" in rec:
            cloud_path = os.path.join(path, rec["file"])
            if not os.path.exists(cloud_path):
                raise ManifestValidationError(f"sample {i}: missing cloud file {rec['file']}")
            cloud = read_cloud_file(cloud_path)
        elif "points" in rec:
            cloud = as_cloud(np.array([[float(v) for v in p] for p in rec["points"]]))
        else:
            raise ManifestValidationError(f"sample {i}: neither file nor inline points")
        samples.append(Sample(cloud=cloud, label=label, split=split, watermark=rec.get("watermark")))
    wm = manifest.get("watermark")
    modified = set((wm or {}).get("modified_indices", []))
    for i, s in enumerate(samples):
        if (i in modified) != (s.watermark is not None):
            raise ManifestValidationError(
                f"sample {i}: watermark provenance inconsistent with manifest watermark section"
            )
    return Dataset(
        samples=samples,
        class_names=class_names,
        seeds=manifest.get("seeds", {}),
        spec=manifest.get("spec"),
        watermark=wm,
    )
