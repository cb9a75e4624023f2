"""Synthetic shape dataset: generation, on-disk format, splits.

A dataset directory holds ``manifest.json``, ``objects.f32`` (per sample a
row-major, little-endian float32 stream of interleaved real/imaginary parts)
and ``labels.csv``.  Complex objects are built from an amplitude map A in
[0, 1] with phase 2A, zero-padded into the simulation grid.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.path import Path as _MplPath
from scipy.ndimage import uniform_filter

from .errors import CorruptDatasetError, ValidationError
from .optics import ComplexField, Plane

MANIFEST_VERSION = 1

LABEL_RECTANGLE = 0
LABEL_TRIANGLE = 1
LABEL_NAMES = {LABEL_RECTANGLE: "rectangle", LABEL_TRIANGLE: "triangle"}


class ShapeKind(enum.Enum):
    RECTANGLE = "rectangle"
    TRIANGLE = "triangle"


class Split(enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass
class SampleRecord:
    object: ComplexField
    label: int
    sample_id: str
    base_id: str
    split: Split | None = None


@dataclass
class Dataset:
    records: list[SampleRecord]
    grid_n: int
    manifest: dict
    amplitude_scale: float = 1.0

    def __len__(self):
        return len(self.records)

    def batch_objects(self, indices) -> np.ndarray:
        """Materialize a (B, grid_n, grid_n) complex stack for the given rows."""
        out = np.stack([np.asarray(self.records[i].object.data) for i in indices])
        if self.amplitude_scale != 1.0:
            out = out / self.amplitude_scale
        return out

    def split_indices(self, split: Split) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.split is split]


# -- shape generation ----------------------------------------------------------


def _polygon_mask(vertices: np.ndarray, canvas_n: int) -> np.ndarray:
    ax = np.arange(canvas_n) + 0.5
    xx, yy = np.meshgrid(ax, ax)
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    inside = _MplPath(vertices).contains_points(pts)
    return inside.reshape(canvas_n, canvas_n).astype(float)


def _fit_to_canvas(vertices: np.ndarray, canvas_n: int, frac: float) -> np.ndarray:
    """Center the polygon and scale its larger extent to frac * canvas_n."""
    lo, hi = vertices.min(axis=0), vertices.max(axis=0)
    extent = (hi - lo).max()
    scale = frac * canvas_n / extent
    center = (lo + hi) / 2
    return (vertices - center) * scale + canvas_n / 2


def generate_shape(kind: ShapeKind, canvas_n: int, rng: np.random.Generator) -> np.ndarray:
    """Random filled convex polygon, box-blurred, values in [0, 1].

    The shape occupies 20-60 % of the canvas extent; degenerate draws (area
    below 1 % of the canvas) are silently regenerated.
    """
    if canvas_n < 32:
        raise ValidationError(f"canvas_n must be >= 32, got {canvas_n}")
    kind = ShapeKind(kind)
    min_area = 0.01 * canvas_n * canvas_n
    for _ in range(100):
        frac = rng.uniform(0.2, 0.6)
        theta = rng.uniform(0, 2 * math.pi)
        rot = np.array(
            [[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]]
        )
        if kind is ShapeKind.RECTANGLE:
            aspect = rng.uniform(0.35, 1.0)
            half = np.array([1.0, aspect])
            verts = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]]) * half
        else:
            # resample until comfortably non-collinear
            while True:
                verts = rng.uniform(-1, 1, size=(3, 2))
                e1, e2 = verts[1] - verts[0], verts[2] - verts[0]
                area2 = abs(e1[0] * e2[1] - e1[1] * e2[0])
                span = max(np.ptp(verts[:, 0]), np.ptp(verts[:, 1]))
                if area2 > 0.35 * span * span:
                    break
        verts = _fit_to_canvas(verts @ rot.T, canvas_n, frac)
        mask = _polygon_mask(verts, canvas_n)
        if mask.sum() < min_area:
            continue
        soft = uniform_filter(mask, size=3, mode="constant")
        return np.clip(soft, 0.0, 1.0)
    raise ValidationError("failed to generate a non-degenerate shape in 100 draws")


def object_from_amplitude(amplitude: np.ndarray, pad_to: int) -> ComplexField:
    """Complex object with modulus A and phase 2A, zero-padded and centered."""
    a = np.asarray(amplitude, dtype=float)
    if a.ndim != 2:
        raise ValidationError(f"amplitude must be 2D, got shape {a.shape}")
    if a.shape[0] > pad_to or a.shape[1] > pad_to:
        raise ValidationError(f"amplitude {a.shape} larger than pad_to {pad_to}")
    if a.min() < 0 or a.max() > 1:
        raise ValidationError("amplitude values must lie in [0, 1]")
    obj = a * np.exp(2j * a)
    out = np.zeros((pad_to, pad_to), dtype=np.complex128)
    r0 = (pad_to - a.shape[0]) // 2
    c0 = (pad_to - a.shape[1]) // 2
    out[r0 : r0 + a.shape[0], c0 : c0 + a.shape[1]] = obj
    return ComplexField(out, Plane.OBJECT)


# -- dataset build / load --------------------------------------------------------


def _place_translated(amplitude: np.ndarray, grid_n: int, max_shift: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Random integer translation keeping the canvas fully inside the grid."""
    h, w = amplitude.shape
    r_center = (grid_n - h) // 2
    c_center = (grid_n - w) // 2
    for _ in range(100):
        ty = int(rng.integers(-max_shift, max_shift + 1))
        tx = int(rng.integers(-max_shift, max_shift + 1))
        r0, c0 = r_center + ty, c_center + tx
        if 0 <= r0 and r0 + h <= grid_n and 0 <= c0 and c0 + w <= grid_n:
            out = np.zeros((grid_n, grid_n), dtype=float)
            out[r0 : r0 + h, c0 : c0 + w] = amplitude
            return out
    raise ValidationError(
        f"cannot place a {h}x{w} canvas inside grid {grid_n} with shift {max_shift}"
    )


def build_synthetic_dataset(
    n_per_class: int,
    augment_translations: int,
    grid_n: int,
    seed: int,
    out_dir: str | Path,
    canvas_n: int = 64,
    max_shift: int | None = None,
    meta: dict | None = None,
) -> dict:
    """Generate and persist the two-class shape dataset; returns the manifest.

    Per class, ``n_per_class`` base shapes are drawn and each is written as
    ``augment_translations`` randomly translated copies (shifts within
    +-grid_n/8 by default).  Output bytes are a pure function of the
    arguments.
    """
    if n_per_class < 10:
        raise ValidationError(f"n_per_class must be >= 10, got {n_per_class}")
    if augment_translations < 1:
        raise ValidationError("augment_translations must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if max_shift is None:
        max_shift = grid_n // 8
    root = np.random.SeedSequence(seed)
    samples = []
    offset = 0
    with open(out_dir / "objects.f32", "wb") as blob:
        for label, kind in ((LABEL_RECTANGLE, ShapeKind.RECTANGLE),
                            (LABEL_TRIANGLE, ShapeKind.TRIANGLE)):
            class_seq = root.spawn(1)[0]
            for b in range(n_per_class):
                base_rng = np.random.default_rng(class_seq.spawn(1)[0])
                amp = generate_shape(kind, canvas_n, base_rng)
                base_id = f"{LABEL_NAMES[label][:4]}-{b:04d}"
                for t in range(augment_translations):
                    placed = _place_translated(amp, grid_n, max_shift, base_rng)
                    obj = object_from_amplitude(placed, grid_n).data
                    interleaved = np.empty((grid_n, grid_n, 2), dtype="<f4")
                    interleaved[..., 0] = obj.real
                    interleaved[..., 1] = obj.imag
                    blob.write(interleaved.tobytes())
                    samples.append(
                        {
                            "id": f"{base_id}-t{t}",
                            "label": label,
                            "base_id": base_id,
                            "offset_bytes": offset,
                        }
                    )
                    offset += interleaved.nbytes
    manifest = {
        "version": MANIFEST_VERSION,
        "grid_n": grid_n,
        "seed": seed,
        "n_per_class": n_per_class,
        "augment_translations": augment_translations,
        "canvas_n": canvas_n,
        "max_shift": max_shift,
        "amplitude_scale": 1.0,
        "counts": {name: n_per_class * augment_translations for name in LABEL_NAMES.values()},
        "objects_file": "objects.f32",
        "objects_bytes": offset,
        "samples": samples,
    }
    if meta:
        manifest.update(meta)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    with open(out_dir / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "base_id"])
        for s in samples:
            writer.writerow([s["id"], s["label"], s["base_id"]])
    return manifest


def load_object_stack(manifest_path: str | Path, validate: bool = True) -> Dataset:
    """Load a dataset directory; objects are memory-mapped lazily.

    Amplitudes above 1 are renormalized by the global maximum modulus and the
    scale recorded on the returned dataset.
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    base = manifest_path.parent
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise CorruptDatasetError(f"unsupported manifest version {manifest.get('version')!r}")
    grid_n = manifest["grid_n"]
    samples = manifest["samples"]
    declared = sum(manifest["counts"].values())
    if declared != len(samples):
        raise CorruptDatasetError(
            f"manifest counts sum to {declared} but {len(samples)} samples listed"
        )
    ids = [s["id"] for s in samples]
    if len(set(ids)) != len(ids):
        raise CorruptDatasetError("duplicate sample ids in manifest")

    per_sample = grid_n * grid_n * 2 * 4  # interleaved float32 pairs
    records: list[SampleRecord] = []
    max_mod = 0.0
    if samples:
        blob_path = base / manifest["objects_file"]
        if not blob_path.exists():
            raise CorruptDatasetError(f"missing object blob {blob_path.name}")
        actual = blob_path.stat().st_size
        if actual != manifest["objects_bytes"]:
            raise CorruptDatasetError(
                f"{blob_path.name}: {actual} bytes on disk, manifest says "
                f"{manifest['objects_bytes']}"
            )
        raw = np.memmap(blob_path, dtype="<f4", mode="r")
        for s in samples:
            off = s["offset_bytes"]
            if off % 4 != 0 or off + per_sample > actual:
                raise CorruptDatasetError(f"sample {s['id']}: offset {off} out of range")
            view = raw[off // 4 : off // 4 + per_sample // 4].view(np.complex64)
            view = view.reshape(grid_n, grid_n)
            if validate and not np.all(np.isfinite(view)):
                raise CorruptDatasetError(f"sample {s['id']}: non-finite values")
            if validate:
                max_mod = max(max_mod, float(np.abs(view).max()))
            records.append(
                SampleRecord(
                    object=ComplexField(view, Plane.OBJECT, validate=False),
                    label=int(s["label"]),
                    sample_id=s["id"],
                    base_id=s.get("base_id", s["id"]),
                )
            )
    scale = max_mod if max_mod > 1.0 + 1e-6 else 1.0
    return Dataset(records=records, grid_n=grid_n, manifest=manifest, amplitude_scale=scale)


def split(
    dataset: Dataset,
    ratios: tuple[float, float, float],
    seed: int,
) -> Dataset:
    """Assign train/val/test tags, stratified by class and grouped by base id.

    All augmented copies of one base shape land in the same split.  Base
    counts per class follow largest-remainder rounding of the ratios, so the
    realized sample fractions match the ratios only up to whole base groups.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValidationError(f"all three ratios must be positive, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios must sum to 1, got sum {sum(ratios)}")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[str]] = {}
    groups: dict[str, list[SampleRecord]] = {}
    for rec in dataset.records:
        if rec.base_id not in groups:
            groups[rec.base_id] = []
            by_class.setdefault(rec.label, []).append(rec.base_id)
        groups[rec.base_id].append(rec)
    for label, bases in sorted(by_class.items()):
        order = list(bases)
        rng.shuffle(order)
        n = len(order)
        quotas = _largest_remainder([r * n for r in ratios])
        if any(q == 0 for q in quotas):
            raise ValidationError(
                f"class {label}: split sizes {quotas} leave a split with no samples"
            )
        bounds = np.cumsum(quotas)
        for i, base in enumerate(order):
            tag = Split.TRAIN if i < bounds[0] else Split.VAL if i < bounds[1] else Split.TEST
            for rec in groups[base]:
                rec.split = tag
    return dataset


def _largest_remainder(targets: list[float]) -> list[int]:
    floors = [int(math.floor(t)) for t in targets]
    rem = round(sum(targets)) - sum(floors)
    # distribute leftovers to the largest fractional parts; ties by position
    order = sorted(range(len(targets)), key=lambda i: (floors[i] - targets[i], i))
    out = list(floors)
    for i in order[:rem]:
        out[i] += 1
    return out
