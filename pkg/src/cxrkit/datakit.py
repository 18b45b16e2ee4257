"""Synthetic corpus generation, manifest and annotation file IO.

The generator renders chest-film-like scenes (body over a gradient, dark
lung fields, a mediastinal ridge, cardiac silhouette, bright abdomen, noisy
collimation border, occasional exact-value burn-in blocks, acquisition gain
jitter) and plants configurable abnormality shapes into them. Every planted
shape carries its ground truth with it: the per-class label vector, the
9-region location flags derived from where the shape actually landed, and
lung/heart masks drawn from the same ellipses the renderer painted.

Two label vocabularies coexist: each patient belongs to source dataset A or
B, and a row's labels cover only its own dataset's class list. Reader
panels are simulated as seeded per-reader label flips on top of the truth.

Everything is reproducible: image content derives from (seed, image index),
patient attributes from (seed, patient index), reader noise from
(seed, image index) on a separate stream, so corpus generation could run
per-image in parallel without changing a single pixel.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .agreement import ReaderMatrix
from .exceptions import ConfigError, IngestError, ShapeError
from .losses import LabelRecord
from .normalize import normalize_image
from .training import LabeledSample

DATASET_IDS = ("A", "B")

# Location vocabulary: two lateral flags, five vertical bands (top to
# bottom), two extent flags. Column k in files is named region_{k+1}.
REGION_NAMES = ("left_lobe", "right_lobe", "lower", "lower_middle", "middle",
                "upper_middle", "upper", "diffuse", "multiple")
NUM_REGIONS = len(REGION_NAMES)

_SIDE_REGION = {"left": 1, "right": 2}
_BANDS = ("upper", "upper_middle", "middle", "lower_middle", "lower")
_BAND_REGION = {"upper": 7, "upper_middle": 6, "middle": 5,
                "lower_middle": 4, "lower": 3}
_DIFFUSE_REGION = 8
_MULTIPLE_REGION = 9

_SIDES = ("left", "right", "either", "center")
_EXTENTS = ("focal", "diffuse", "scatter")
_SHAPES = ("heart", "blob", "smear", "base_band", "veil", "rim")

# Scene geometry, in fractions of the image side. The lung ellipses are the
# coordinate frame for every placement.
_BODY_CX, _BODY_CY = 0.50, 0.55
_BODY_AX, _BODY_AY = math.sqrt(0.18), math.sqrt(0.35)
_LUNG_CX = {"left": 0.32, "right": 0.68}
_LUNG_CY = 0.42
_LUNG_AX, _LUNG_AY = math.sqrt(0.018), math.sqrt(0.06)
_HEART_CX, _HEART_CY = 0.53, 0.60
_HEART_AX, _HEART_AY = 0.12, 0.145
_HEART_BASE_AMP = 0.08

# Dense anatomy saturates here, before pixel noise is added. The cap turns
# any structure brighter than the abdomen band into a broad plateau whose
# noise-spread histogram mass keeps the top quantile stable when an image
# is windowed twice; a thin bright tail would move it by several bins.
_SCENE_CAP = 1.30

_LUNG_TOP = _LUNG_CY - _LUNG_AY
_BAND_HEIGHT = 2.0 * _LUNG_AY / len(_BANDS)

_IMAGE_MAX = 65535.0


# ---------------------------------------------------------------- recipes

@dataclass(frozen=True)
class Placement:
    """Where a shape may land.

    side: a fixed lobe, "either" (sampled per image), or "center".
    band: one of the five vertical bands, or "any" (sampled per image).
    extent: "focal" (one shape), "diffuse" (one broad smear, sets the
    diffuse region flag), "scatter" (1..3 shapes, sets the multiple flag
    when more than one lands).
    """

    side: str = "either"
    band: str = "any"
    extent: str = "focal"

    def __post_init__(self):
        if self.side not in _SIDES:
            raise ConfigError(f"unknown side {self.side!r}")
        if self.band != "any" and self.band not in _BANDS:
            raise ConfigError(f"unknown band {self.band!r}")
        if self.extent not in _EXTENTS:
            raise ConfigError(f"unknown extent {self.extent!r}")


@dataclass(frozen=True)
class AbnormalityRule:
    """Generative recipe for one abnormality class.

    size_range and intensity_range are uniform sampling bounds; size is a
    fraction of the image side except for shape "heart", where it is the
    silhouette enlargement factor. Spatial labels may only be declared on
    dataset A (the location-annotated source).
    """

    name: str
    dataset_id: str
    shape: str
    size_range: tuple
    intensity_range: tuple
    placement: Placement = Placement()
    prevalence: float = 0.3
    has_spatial: bool = False

    def __post_init__(self):
        if not self.name or not self.name.replace("_", "").isalnum():
            raise ConfigError(f"rule name {self.name!r} must be alphanumeric/underscore")
        if self.dataset_id not in DATASET_IDS:
            raise ConfigError(f"unknown dataset_id {self.dataset_id!r}")
        if self.shape not in _SHAPES:
            raise ConfigError(f"unknown shape {self.shape!r}")
        for label, rng_ in (("size_range", self.size_range),
                            ("intensity_range", self.intensity_range)):
            lo, hi = float(rng_[0]), float(rng_[1])
            if not 0.0 < lo <= hi:
                raise ConfigError(f"{label} must satisfy 0 < lo <= hi, got {rng_}")
            object.__setattr__(self, label, (lo, hi))
        if not 0.0 < self.prevalence < 1.0:
            raise ConfigError(f"prevalence must lie in (0, 1), got {self.prevalence}")
        if self.has_spatial and self.dataset_id != "A":
            raise ConfigError("spatial labels are only available on dataset A")
        if self.placement.extent == "scatter" and self.shape != "blob":
            raise ConfigError("scatter extent requires shape 'blob'")
        if self.placement.extent == "diffuse" and self.shape not in ("smear", "veil"):
            raise ConfigError("diffuse extent requires shape 'smear' or 'veil'")


def default_rules() -> tuple:
    """Seven classes spanning the difficulty spectrum: a large fixed-place
    silhouette change at the easy end, small scattered blobs at the hard
    end. Dataset A carries location flags for two of its classes."""
    return (
        AbnormalityRule("cardiomegaly", "A", "heart", (1.35, 1.60), (0.14, 0.22),
                        Placement("center", "lower_middle", "focal"), 0.35),
        AbnormalityRule("nodule", "A", "blob", (0.040, 0.070), (0.10, 0.16),
                        Placement("either", "any", "scatter"), 0.30, True),
        AbnormalityRule("infiltrate", "A", "smear", (0.10, 0.16), (0.07, 0.12),
                        Placement("either", "any", "diffuse"), 0.25, True),
        AbnormalityRule("effusion", "A", "base_band", (0.12, 0.22), (0.12, 0.18),
                        Placement("either", "lower", "focal"), 0.25),
        AbnormalityRule("mass", "B", "blob", (0.075, 0.120), (0.14, 0.20),
                        Placement("either", "any", "focal"), 0.30),
        AbnormalityRule("opacity", "B", "veil", (0.16, 0.24), (0.05, 0.09),
                        Placement("either", "any", "focal"), 0.30),
        AbnormalityRule("pneumothorax", "B", "rim", (0.10, 0.16), (0.10, 0.16),
                        Placement("either", "upper", "focal"), 0.25),
    )


@dataclass(frozen=True)
class SyntheticSpec:
    """Complete description of a synthetic corpus."""

    image_size: int = 64
    rules: tuple = field(default_factory=default_rules)
    count: int = 200
    images_per_patient: int = 2
    dataset_a_fraction: float = 0.6
    reader_flip_probs: tuple = (0.02, 0.06, 0.10)
    seed: int = 0

    def __post_init__(self):
        if int(self.image_size) < 16:
            raise ConfigError(f"image_size must be at least 16, got {self.image_size}")
        if int(self.count) < 1:
            raise ConfigError("count must be positive")
        if int(self.images_per_patient) < 1:
            raise ConfigError("images_per_patient must be positive")
        if not 0.0 <= self.dataset_a_fraction <= 1.0:
            raise ConfigError("dataset_a_fraction must lie in [0, 1]")
        object.__setattr__(self, "rules", tuple(self.rules))
        if not self.rules:
            raise ConfigError("need at least one abnormality rule")
        names = [r.name for r in self.rules]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate abnormality names")
        if self.dataset_a_fraction > 0.0 and not self.rules_for("A"):
            raise ConfigError("dataset A patients possible but no A rules given")
        if self.dataset_a_fraction < 1.0 and not self.rules_for("B"):
            raise ConfigError("dataset B patients possible but no B rules given")
        flips = tuple(float(p) for p in self.reader_flip_probs)
        if len(flips) < 2:
            raise ConfigError("need at least two readers")
        if any(not 0.0 <= p <= 0.5 for p in flips):
            raise ConfigError("reader flip probabilities must lie in [0, 0.5]")
        object.__setattr__(self, "reader_flip_probs", flips)
        object.__setattr__(self, "image_size", int(self.image_size))
        object.__setattr__(self, "count", int(self.count))
        object.__setattr__(self, "images_per_patient", int(self.images_per_patient))
        object.__setattr__(self, "seed", int(self.seed))

    def rules_for(self, dataset_id: str) -> tuple:
        return tuple(r for r in self.rules if r.dataset_id == dataset_id)

    @property
    def class_names_a(self) -> tuple:
        return tuple(r.name for r in self.rules_for("A"))

    @property
    def class_names_b(self) -> tuple:
        return tuple(r.name for r in self.rules_for("B"))

    @property
    def class_names(self) -> tuple:
        return self.class_names_a + self.class_names_b

    @property
    def num_classes(self) -> int:
        return len(self.rules)

    @property
    def num_patients(self) -> int:
        return -(-self.count // self.images_per_patient)

    def class_slice(self, dataset_id: str) -> slice:
        d1 = len(self.class_names_a)
        if dataset_id == "A":
            return slice(0, d1)
        return slice(d1, self.num_classes)


# ---------------------------------------------------------------- painting

def _grids(n: int):
    yy, xx = np.mgrid[0:n, 0:n] / (n - 1)
    return yy, xx


def _rho(yy, xx, cy, cx, ay, ax):
    """Squared normalized ellipse radius; 1.0 on the boundary."""
    return ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2


def _base_scene(yy, xx):
    img = 0.45 + 0.25 * yy
    body = _rho(yy, xx, _BODY_CY, _BODY_CX, _BODY_AY, _BODY_AX) < 1.0
    img = img + 0.25 * body
    ridge = 0.30 * np.exp(-0.5 * ((xx - 0.5) / 0.09) ** 2)
    img += ridge * np.clip((0.80 - yy) / 0.10, 0.0, 1.0) * (yy > 0.18)
    # The abdomen band overshoots _SCENE_CAP on purpose: every scene then
    # ends in the same saturated plateau, whatever else was painted.
    img += 0.42 * np.clip((yy - 0.74) / 0.06, 0.0, 1.0) * body
    lung = np.zeros(yy.shape, dtype=bool)
    for side in ("left", "right"):
        m = _rho(yy, xx, _LUNG_CY, _LUNG_CX[side], _LUNG_AY, _LUNG_AX) < 1.0
        img -= 0.22 * m
        lung |= m
    return img, lung


def _heart_rho(yy, xx, factor: float):
    return _rho(yy, xx, _HEART_CY, _HEART_CX, _HEART_AY * factor, _HEART_AX * factor)


def _paint_heart(img, yy, xx, factor: float, amp: float):
    soft = np.clip((1.0 - _heart_rho(yy, xx, factor)) / 0.15, 0.0, 1.0)
    img += amp * soft


def _band_range(band_index: int):
    lo = _LUNG_TOP + band_index * _BAND_HEIGHT
    return lo + 0.1 * _BAND_HEIGHT, lo + 0.9 * _BAND_HEIGHT


def _sample_center(rng, side: str, band_index: int):
    y = rng.uniform(*_band_range(band_index))
    half = _LUNG_AX * math.sqrt(max(1.0 - ((y - _LUNG_CY) / _LUNG_AY) ** 2, 0.0))
    x = _LUNG_CX[side] + rng.uniform(-0.75, 0.75) * max(half, 0.02)
    return y, x


def _paint_blob(img, yy, xx, y, x, radius, amp):
    sigma = max(radius * 0.55, 1e-3)
    img += amp * np.exp(-0.5 * ((yy - y) ** 2 + (xx - x) ** 2) / sigma ** 2)


def _paint_smear(img, yy, xx, y, x, size, amp):
    img += amp * np.exp(-0.5 * (((yy - y) / size) ** 2
                                + ((xx - x) / (0.55 * size)) ** 2))


def _paint_veil(img, yy, xx, y, x, size, amp):
    img += amp * np.exp(-0.5 * ((yy - y) ** 2 + (xx - x) ** 2) / size ** 2)


def _paint_base_band(img, yy, xx, side, depth, amp):
    inside = _rho(yy, xx, _LUNG_CY, _LUNG_CX[side], _LUNG_AY, _LUNG_AX) < 1.0
    y0 = _LUNG_CY + _LUNG_AY * (1.0 - 2.0 * depth)
    img += amp * np.clip((yy - y0) / 0.03, 0.0, 1.0) * inside


def _paint_rim(img, yy, xx, side, thickness, amp):
    rho = _rho(yy, xx, _LUNG_CY, _LUNG_CX[side], _LUNG_AY, _LUNG_AX)
    ring = (rho < 1.0) & (rho >= (1.0 - thickness) ** 2)
    img -= amp * ring


def _pick_side(rng, placement: Placement) -> str:
    if placement.side == "either":
        return "left" if rng.integers(2) == 0 else "right"
    return placement.side


def _pick_band(rng, placement: Placement) -> int:
    if placement.band == "any":
        return int(rng.integers(len(_BANDS)))
    return _BANDS.index(placement.band)


def _render_image(rng, n: int, rules: tuple):
    """Render one image for one dataset's rule list.

    Draw order (fixed, so content is a pure function of the rng state):
    per-rule presence coins, heart factor/amplitude, per positive rule its
    size and amplitude then per-shape placements, then pixel noise, border,
    burn-in coin, and detector gain/offset.

    Returns (uint16 image, (2, n, n) uint8 masks, truth 0/1 per rule,
    region flag vector, spatial_active).
    """
    yy, xx = _grids(n)
    img, lung = _base_scene(yy, xx)

    truth = np.array([rng.random() < r.prevalence for r in rules], dtype=np.uint8)

    heart_factor, heart_amp = 1.0, _HEART_BASE_AMP
    for k, rule in enumerate(rules):
        if rule.shape == "heart" and truth[k]:
            heart_factor = max(heart_factor, rng.uniform(*rule.size_range))
            heart_amp += rng.uniform(*rule.intensity_range)
    _paint_heart(img, yy, xx, heart_factor, heart_amp)

    regions = np.zeros(NUM_REGIONS, dtype=np.uint8)
    spatial_active = False
    for k, rule in enumerate(rules):
        if not truth[k] or rule.shape == "heart":
            continue
        size = rng.uniform(*rule.size_range)
        amp = rng.uniform(*rule.intensity_range)
        marks = _place_and_paint(img, yy, xx, rng, rule, size, amp)
        if rule.has_spatial:
            spatial_active = True
            for region in marks:
                regions[region - 1] = 1

    img = np.minimum(img, _SCENE_CAP)
    img += rng.uniform(-0.04, 0.04, size=(n, n))
    border = max(2, int(round(n * rng.uniform(0.03, 0.07))))
    border_values = np.clip(rng.normal(0.02, 0.015, size=(n, n)), 0.0, None)
    for sl in (np.s_[:border, :], np.s_[-border:, :],
               np.s_[:, :border], np.s_[:, -border:]):
        img[sl] = border_values[sl]
    if rng.random() < 0.5:
        r0, r1 = max(1, round(0.04 * n)), max(3, round(0.10 * n))
        c0, c1 = n - max(5, round(0.15 * n)), n - max(1, round(0.04 * n))
        img[r0:r1, c0:c1] = 1.6  # burn-in block: one exact value, a true spike
    gain = rng.uniform(600.0, 3500.0)
    offset = rng.uniform(0.0, 400.0)
    raw = np.clip(img, 0.0, 1.8) * gain + offset

    heart = _heart_rho(yy, xx, heart_factor) <= 1.0
    masks = np.stack([lung, heart]).astype(np.uint8)
    return raw.round().astype(np.uint16), masks, truth, regions, spatial_active


def _place_and_paint(img, yy, xx, rng, rule: AbnormalityRule, size, amp):
    """Paint one positive, non-heart rule; returns the region numbers hit."""
    marks = set()
    if rule.shape == "base_band":
        side = _pick_side(rng, rule.placement)
        _paint_base_band(img, yy, xx, side, size, amp)
        marks.update((_SIDE_REGION[side], _BAND_REGION["lower"]))
    elif rule.shape == "rim":
        side = _pick_side(rng, rule.placement)
        _paint_rim(img, yy, xx, side, size, amp)
        marks.update((_SIDE_REGION[side], _BAND_REGION[rule.placement.band]
                      if rule.placement.band != "any" else _BAND_REGION["upper"]))
    elif rule.placement.extent == "diffuse":
        side = _pick_side(rng, rule.placement)
        band = _pick_band(rng, rule.placement)
        y, x = _sample_center(rng, side, band)
        painter = _paint_smear if rule.shape == "smear" else _paint_veil
        painter(img, yy, xx, y, x, size, amp)
        marks.update((_SIDE_REGION[side], _BAND_REGION[_BANDS[band]], _DIFFUSE_REGION))
    else:
        count = int(rng.integers(1, 4)) if rule.placement.extent == "scatter" else 1
        for _ in range(count):
            side = _pick_side(rng, rule.placement)
            band = _pick_band(rng, rule.placement)
            y, x = _sample_center(rng, side, band)
            if rule.shape == "blob":
                _paint_blob(img, yy, xx, y, x, size, amp)
            elif rule.shape == "smear":
                _paint_smear(img, yy, xx, y, x, size, amp)
            else:
                _paint_veil(img, yy, xx, y, x, size, amp)
            marks.update((_SIDE_REGION[side], _BAND_REGION[_BANDS[band]]))
        if count > 1:
            marks.add(_MULTIPLE_REGION)
    return marks


# ---------------------------------------------------------------- manifest

@dataclass(frozen=True)
class ManifestRow:
    """One image entry. labels covers this row's own dataset class list;
    spatial is the 9 region flags or None when the row has no location
    annotation; mask_path is None when no segmentation target exists."""

    image_path: str
    patient_id: str
    dataset_id: str
    labels: tuple
    spatial: tuple | None = None
    mask_path: str | None = None

    def __post_init__(self):
        if self.dataset_id not in DATASET_IDS:
            raise ConfigError(f"unknown dataset_id {self.dataset_id!r}")
        labels = tuple(int(v) for v in self.labels)
        if any(v not in (0, 1) for v in labels):
            raise ConfigError("labels must be 0/1")
        object.__setattr__(self, "labels", labels)
        if self.spatial is not None:
            spatial = tuple(int(v) for v in self.spatial)
            if len(spatial) != NUM_REGIONS or any(v not in (0, 1) for v in spatial):
                raise ConfigError(f"spatial must be {NUM_REGIONS} 0/1 flags")
            if self.dataset_id != "A":
                raise ConfigError("spatial labels are only available on dataset A")
            object.__setattr__(self, "spatial", spatial)

    @property
    def case_id(self) -> str:
        return Path(self.image_path).stem


@dataclass(frozen=True)
class Manifest:
    """Typed view of a manifest file: the two class vocabularies plus rows."""

    class_names_a: tuple
    class_names_b: tuple
    rows: tuple

    def __post_init__(self):
        object.__setattr__(self, "class_names_a", tuple(self.class_names_a))
        object.__setattr__(self, "class_names_b", tuple(self.class_names_b))
        object.__setattr__(self, "rows", tuple(self.rows))
        names = self.class_names_a + self.class_names_b
        if not names:
            raise ConfigError("manifest needs at least one class column")
        if len(set(names)) != len(names):
            raise ConfigError("duplicate class names")
        widths = {"A": len(self.class_names_a), "B": len(self.class_names_b)}
        for i, row in enumerate(self.rows, start=1):
            if widths[row.dataset_id] == 0:
                raise ConfigError(f"row {i}: dataset {row.dataset_id} row but "
                                  "no such class columns")
            if len(row.labels) != widths[row.dataset_id]:
                raise ConfigError(f"row {i}: {len(row.labels)} labels for a "
                                  f"{widths[row.dataset_id]}-class dataset")

    @property
    def class_names(self) -> tuple:
        return self.class_names_a + self.class_names_b

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def header(self) -> list:
        cols = ["image_path", "patient_id", "dataset_id"]
        cols += [f"A:{n}" for n in self.class_names_a]
        cols += [f"B:{n}" for n in self.class_names_b]
        cols += [f"region_{k}" for k in range(1, NUM_REGIONS + 1)]
        cols.append("mask_path")
        return cols


def write_manifest(manifest: Manifest, path) -> Path:
    path = Path(path)
    d1, d2 = len(manifest.class_names_a), len(manifest.class_names_b)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(manifest.header())
        for row in manifest.rows:
            a = list(row.labels) + [""] * d2 if row.dataset_id == "A" \
                else [""] * d1 + list(row.labels)
            spatial = list(row.spatial) if row.spatial is not None \
                else [""] * NUM_REGIONS
            writer.writerow([row.image_path, row.patient_id, row.dataset_id,
                             *a, *spatial, row.mask_path or ""])
    return path


def _parse_manifest_header(header, path_name: str):
    fixed = ["image_path", "patient_id", "dataset_id"]
    if header[:3] != fixed:
        raise IngestError(f"{path_name} row 0: header must start with "
                          f"{','.join(fixed)}", row=0)
    names_a, names_b = [], []
    i = 3
    while i < len(header) and header[i].startswith("A:"):
        names_a.append(header[i][2:])
        i += 1
    while i < len(header) and header[i].startswith("B:"):
        names_b.append(header[i][2:])
        i += 1
    if i < len(header) and header[i].startswith("A:"):
        raise IngestError(f"{path_name} row 0: A: class columns must precede "
                          "B: columns", row=0)
    if not names_a and not names_b:
        raise IngestError(f"{path_name} row 0: no class columns", row=0)
    regions = [f"region_{k}" for k in range(1, NUM_REGIONS + 1)]
    has_regions = header[i:i + NUM_REGIONS] == regions
    if has_regions:
        i += NUM_REGIONS
    has_mask = i < len(header) and header[i] == "mask_path"
    if has_mask:
        i += 1
    if i != len(header):
        raise IngestError(f"{path_name} row 0: unexpected column "
                          f"{header[i]!r}", row=0)
    return tuple(names_a), tuple(names_b), has_regions, has_mask


def _parse_binary_cell(cell: str, what: str, path_name: str, row: int) -> int:
    if cell not in ("0", "1"):
        raise IngestError(f"{path_name} row {row}: malformed {what} "
                          f"value {cell!r}", row=row)
    return int(cell)


def read_manifest(path) -> Manifest:
    """Parse a manifest CSV without touching any image files."""
    path = Path(path)
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path.name} row 0: empty file", row=0) from None
        names_a, names_b, has_regions, has_mask = \
            _parse_manifest_header(header, path.name)
        rows = []
        for i, cells in enumerate(reader, start=1):
            if len(cells) != len(header):
                raise IngestError(f"{path.name} row {i}: expected "
                                  f"{len(header)} cells, got {len(cells)}", row=i)
            image_path, patient_id, dataset_id = cells[0], cells[1], cells[2]
            if dataset_id not in DATASET_IDS:
                raise IngestError(f"{path.name} row {i}: unknown dataset_id "
                                  f"{dataset_id!r}", row=i)
            if not image_path:
                raise IngestError(f"{path.name} row {i}: empty image_path", row=i)
            a_cells = cells[3:3 + len(names_a)]
            b_cells = cells[3 + len(names_a):3 + len(names_a) + len(names_b)]
            own, other = (a_cells, b_cells) if dataset_id == "A" else (b_cells, a_cells)
            if any(c != "" for c in other):
                raise IngestError(f"{path.name} row {i}: labels present for the "
                                  "other dataset's classes", row=i)
            labels = tuple(_parse_binary_cell(c, "label", path.name, i) for c in own)
            pos = 3 + len(names_a) + len(names_b)
            spatial = None
            if has_regions:
                region_cells = cells[pos:pos + NUM_REGIONS]
                pos += NUM_REGIONS
                filled = [c != "" for c in region_cells]
                if any(filled):
                    if not all(filled):
                        raise IngestError(f"{path.name} row {i}: partially filled "
                                          "region columns", row=i)
                    if dataset_id != "A":
                        raise IngestError(f"{path.name} row {i}: spatial labels on "
                                          f"dataset {dataset_id}", row=i)
                    spatial = tuple(_parse_binary_cell(c, "region", path.name, i)
                                    for c in region_cells)
            mask_path = cells[pos] if has_mask and cells[pos] else None
            rows.append(ManifestRow(image_path, patient_id, dataset_id,
                                    labels, spatial, mask_path))
    try:
        return Manifest(names_a, names_b, rows)
    except ConfigError as exc:
        raise IngestError(f"{path.name}: {exc}") from exc


# ---------------------------------------------------------------- image IO

def write_image_png(path, raw: np.ndarray) -> None:
    """16-bit grayscale PNG from a uint16 (or [0, 65535] numeric) array."""
    arr = np.asarray(raw)
    if arr.ndim != 2:
        raise ShapeError(f"image must be 2-d, got shape {arr.shape}")
    Image.fromarray(arr.astype(np.uint16)).save(Path(path), format="PNG")


def read_image_png(path) -> np.ndarray:
    """Grayscale PNG to float64 in [0, 1] (scaled by the sample depth)."""
    with Image.open(Path(path)) as img:
        arr = np.array(img)
    if arr.ndim != 2:
        raise ShapeError(f"{Path(path).name}: not a grayscale image")
    full = 255.0 if arr.dtype == np.uint8 else _IMAGE_MAX
    return arr.astype(np.float64) / full


def write_mask_png(path, masks: np.ndarray) -> None:
    """(2, N, N) 0/1 masks as one (N, 2N) 8-bit PNG: lung plane then heart."""
    m = np.asarray(masks)
    if m.ndim != 3 or m.shape[0] != 2 or m.shape[1] != m.shape[2]:
        raise ShapeError(f"masks must be (2, N, N), got {m.shape}")
    flat = np.concatenate([m[0], m[1]], axis=1)
    Image.fromarray((flat > 0).astype(np.uint8) * 255).save(Path(path), format="PNG")


def read_mask_png(path) -> np.ndarray:
    with Image.open(Path(path)) as img:
        arr = np.array(img)
    if arr.ndim != 2 or arr.shape[1] != 2 * arr.shape[0]:
        raise ShapeError(f"{Path(path).name}: mask file must be (N, 2N) grayscale")
    n = arr.shape[0]
    return np.stack([arr[:, :n] > 127, arr[:, n:] > 127]).astype(np.uint8)


# ---------------------------------------------------------------- corpus

@dataclass(frozen=True)
class Corpus:
    """In-memory synthetic corpus: pixel data plus every label view of it.

    images hold raw detector counts (uint16); truth/spatial cover the full
    combined class list with zeros outside each row's own dataset. readers
    maps dataset id to that dataset's reader panel.
    """

    spec: SyntheticSpec
    images: np.ndarray
    seg_masks: tuple
    manifest: Manifest
    readers: dict
    truth: np.ndarray
    spatial: np.ndarray
    spatial_active: np.ndarray

    @property
    def case_ids(self) -> tuple:
        return tuple(row.case_id for row in self.manifest.rows)

    def to_samples(self, normalize: bool = True) -> list:
        """Training-ready samples; dynamic windowing applied by default."""
        samples = []
        for i, row in enumerate(self.manifest.rows):
            image = self.images[i].astype(np.float64) / _IMAGE_MAX
            if normalize:
                image = normalize_image(image)
            samples.append(LabeledSample(
                image=image,
                labels=_record_for(self.spec, row.dataset_id, self.truth[i],
                                   self.spatial[i], bool(self.spatial_active[i]),
                                   self.seg_masks[i]),
                patient_id=row.patient_id,
                sample_id=row.case_id,
            ))
        return samples


def _record_for(spec, dataset_id, truth_row, spatial_row, spatial_on, seg) -> LabelRecord:
    mask = np.zeros(spec.num_classes)
    mask[spec.class_slice(dataset_id)] = 1.0
    return LabelRecord(
        abnormality_labels=truth_row.astype(np.float64),
        dataset_mask=mask,
        spatial_labels=spatial_row.astype(np.float64) if spatial_on else None,
        spatial_active=spatial_on,
        seg_mask=seg,
        seg_active=seg is not None,
    )


def generate_corpus(spec: SyntheticSpec) -> Corpus:
    """Render the full corpus described by ``spec``.

    Patients alternate between datasets by a seeded coin; all of a
    patient's images share its dataset. Dataset A rows get lung/heart
    masks and, when a location-annotated class is present, region flags.
    Reader votes are the truth with seeded per-reader flips on the row's
    own classes.
    """
    n, count = spec.image_size, spec.count
    d = spec.num_classes
    n_readers = len(spec.reader_flip_probs)
    rules = {ds: spec.rules_for(ds) for ds in DATASET_IDS}

    patient_ds = {}
    for p in range(spec.num_patients):
        coin = np.random.default_rng([spec.seed, 2, p]).random()
        patient_ds[p] = "A" if coin < spec.dataset_a_fraction else "B"

    images = np.zeros((count, n, n), dtype=np.uint16)
    seg_masks = []
    truth = np.zeros((count, d), dtype=np.uint8)
    spatial = np.zeros((count, NUM_REGIONS), dtype=np.uint8)
    spatial_active = np.zeros(count, dtype=bool)
    votes = np.zeros((count, n_readers, d), dtype=np.uint8)
    rows = []

    flip_probs = np.array(spec.reader_flip_probs)[:, None]
    for i in range(count):
        p = i // spec.images_per_patient
        ds = patient_ds[p]
        sl = spec.class_slice(ds)
        rng = np.random.default_rng([spec.seed, 1, i])
        raw, masks, own_truth, regions, active = _render_image(rng, n, rules[ds])
        images[i] = raw
        truth[i, sl] = own_truth
        spatial[i] = regions
        spatial_active[i] = active
        seg_masks.append(masks if ds == "A" else None)

        flip_rng = np.random.default_rng([spec.seed, 3, i])
        flips = flip_rng.random((n_readers, len(own_truth))) < flip_probs
        votes[i, :, sl] = own_truth[None, :] ^ flips

        rows.append(ManifestRow(
            image_path=f"images/img_{i:05d}.png",
            patient_id=f"p{p:04d}",
            dataset_id=ds,
            labels=tuple(int(v) for v in own_truth),
            spatial=tuple(int(v) for v in regions) if active else None,
            mask_path=f"masks/msk_{i:05d}.png" if ds == "A" else None,
        ))

    manifest = Manifest(spec.class_names_a, spec.class_names_b, rows)
    reader_names = tuple(f"reader_{k + 1}" for k in range(n_readers))
    readers = {}
    for ds in DATASET_IDS:
        idx = [i for i, row in enumerate(manifest.rows) if row.dataset_id == ds]
        if not idx or not rules[ds]:
            continue
        sl = spec.class_slice(ds)
        block = np.transpose(votes[idx][:, :, sl], (0, 2, 1))
        readers[ds] = ReaderMatrix(block, tuple(r.name for r in rules[ds]),
                                   reader_names, original=0,
                                   case_ids=tuple(manifest.rows[i].case_id
                                                  for i in idx))
    return Corpus(spec=spec, images=images, seg_masks=tuple(seg_masks),
                  manifest=manifest, readers=readers, truth=truth,
                  spatial=spatial, spatial_active=spatial_active)


def write_corpus(corpus: Corpus, out_dir) -> Path:
    """Write images, masks, manifest.csv, and annotations.csv; returns the
    manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for i, row in enumerate(corpus.manifest.rows):
        write_image_png(out / row.image_path, corpus.images[i])
        if row.mask_path is not None:
            write_mask_png(out / row.mask_path, corpus.seg_masks[i])
    manifest_path = write_manifest(corpus.manifest, out / "manifest.csv")
    write_annotations(out / "annotations.csv",
                      [corpus.readers[ds] for ds in DATASET_IDS
                       if ds in corpus.readers])
    return manifest_path


def load_manifest(path) -> list:
    """Read a manifest and its referenced files into labeled samples.

    Image intensities come back as raw [0, 1] floats (sample depth
    scaled, no windowing). Every referenced file must exist and parse;
    failures name the 1-based manifest row.
    """
    path = Path(path)
    manifest = read_manifest(path)
    base = path.parent
    d1 = len(manifest.class_names_a)
    d = manifest.num_classes
    samples = []
    for i, row in enumerate(manifest.rows, start=1):
        image_file = base / row.image_path
        if not image_file.is_file():
            raise IngestError(f"{path.name} row {i}: missing image "
                              f"{row.image_path}", row=i)
        try:
            image = read_image_png(image_file)
        except (OSError, ShapeError) as exc:
            raise IngestError(f"{path.name} row {i}: unreadable image "
                              f"{row.image_path}: {exc}", row=i) from exc
        seg = None
        if row.mask_path is not None:
            mask_file = base / row.mask_path
            if not mask_file.is_file():
                raise IngestError(f"{path.name} row {i}: missing mask "
                                  f"{row.mask_path}", row=i)
            try:
                seg = read_mask_png(mask_file)
            except (OSError, ShapeError) as exc:
                raise IngestError(f"{path.name} row {i}: unreadable mask "
                                  f"{row.mask_path}: {exc}", row=i) from exc
            if seg.shape[1:] != image.shape:
                raise IngestError(f"{path.name} row {i}: mask shape "
                                  f"{seg.shape[1:]} does not match image "
                                  f"{image.shape}", row=i)

        labels = np.zeros(d)
        mask = np.zeros(d)
        offset = 0 if row.dataset_id == "A" else d1
        labels[offset:offset + len(row.labels)] = row.labels
        mask[offset:offset + len(row.labels)] = 1.0
        samples.append(LabeledSample(
            image=image,
            labels=LabelRecord(
                abnormality_labels=labels,
                dataset_mask=mask,
                spatial_labels=np.array(row.spatial, dtype=np.float64)
                if row.spatial is not None else None,
                spatial_active=row.spatial is not None,
                seg_mask=seg,
                seg_active=seg is not None,
            ),
            patient_id=row.patient_id,
            sample_id=row.case_id,
        ))
    return samples


# ---------------------------------------------------------------- tables

def write_annotations(path, matrices) -> Path:
    """Reader votes as CSV rows (case_id, abnormality, one vote column per
    reader). All matrices must share the same reader panel."""
    matrices = list(matrices)
    if not matrices:
        raise ConfigError("no reader matrices to write")
    readers = matrices[0].readers
    for m in matrices:
        if m.readers != readers:
            raise ConfigError("reader panels differ between matrices")
    path = Path(path)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["case_id", "abnormality", *readers])
        for m in matrices:
            for j, name in enumerate(m.abnormalities):
                for i, case in enumerate(m.case_ids):
                    writer.writerow([case, name, *m.votes[i, j, :]])
    return path


def read_annotations(path) -> tuple:
    """Rebuild reader matrices from an annotation CSV.

    Abnormalities that cover the same case list (in the same order) are
    grouped back into one matrix; the result is a tuple of matrices in
    first-appearance order.
    """
    path = Path(path)
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path.name} row 0: empty file", row=0) from None
        if header[:2] != ["case_id", "abnormality"] or len(header) < 4:
            raise IngestError(f"{path.name} row 0: header must be case_id,"
                              "abnormality,<reader...> with at least two "
                              "readers", row=0)
        reader_names = tuple(header[2:])
        per_class = {}
        for i, cells in enumerate(reader, start=1):
            if len(cells) != len(header):
                raise IngestError(f"{path.name} row {i}: expected "
                                  f"{len(header)} cells, got {len(cells)}", row=i)
            case, name = cells[0], cells[1]
            vote_row = [_parse_binary_cell(c, "vote", path.name, i)
                        for c in cells[2:]]
            ids, votes = per_class.setdefault(name, ([], []))
            if case in ids:
                raise IngestError(f"{path.name} row {i}: duplicate case "
                                  f"{case!r} for {name!r}", row=i)
            ids.append(case)
            votes.append(vote_row)

    if not per_class:
        raise IngestError(f"{path.name}: no annotation rows")
    groups = {}
    for name, (ids, votes) in per_class.items():
        groups.setdefault(tuple(ids), []).append((name, np.array(votes)))
    matrices = []
    for ids, members in groups.items():
        block = np.stack([votes for _, votes in members], axis=1)
        matrices.append(ReaderMatrix(block, tuple(name for name, _ in members),
                                     reader_names, original=0, case_ids=ids))
    return tuple(matrices)


@dataclass(frozen=True)
class ScoreTable:
    """Per-abnormality model scores with their evaluation labels."""

    case_ids: tuple
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "case_ids", tuple(self.case_ids))
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=np.float64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.float64))
        if not (len(self.case_ids) == len(self.scores) == len(self.labels)):
            raise ShapeError("case_ids, scores, and labels must align")


def write_scores(path, tables: dict) -> Path:
    """Scores CSV: one row per (case, abnormality) as
    case_id,abnormality,score,label."""
    path = Path(path)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["case_id", "abnormality", "score", "label"])
        for name, table in tables.items():
            for case, score, label in zip(table.case_ids, table.scores,
                                          table.labels):
                writer.writerow([case, name, repr(float(score)),
                                 int(label)])
    return path


def read_scores(path) -> dict:
    """Parse a scores CSV back into {abnormality: ScoreTable}."""
    path = Path(path)
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path.name} row 0: empty file", row=0) from None
        if header != ["case_id", "abnormality", "score", "label"]:
            raise IngestError(f"{path.name} row 0: header must be "
                              "case_id,abnormality,score,label", row=0)
        acc = {}
        for i, cells in enumerate(reader, start=1):
            if len(cells) != 4:
                raise IngestError(f"{path.name} row {i}: expected 4 cells, "
                                  f"got {len(cells)}", row=i)
            case, name, score_cell, label_cell = cells
            try:
                score = float(score_cell)
            except ValueError:
                raise IngestError(f"{path.name} row {i}: malformed score "
                                  f"{score_cell!r}", row=i) from None
            if not math.isfinite(score):
                raise IngestError(f"{path.name} row {i}: non-finite score", row=i)
            label = _parse_binary_cell(label_cell, "label", path.name, i)
            ids, scores, labels = acc.setdefault(name, ([], [], []))
            ids.append(case)
            scores.append(score)
            labels.append(label)
    if not acc:
        raise IngestError(f"{path.name}: no score rows")
    return {name: ScoreTable(ids, scores, labels)
            for name, (ids, scores, labels) in acc.items()}


# ---------------------------------------------------------------- studies

@dataclass(frozen=True)
class ReaderStudy:
    """Score-level reader panel for band experiments.

    One abnormality; scores play the trained model, votes the reader
    panel. The evaluation labels are the original reader's votes, so
    cases whose score sits near the decision boundary carry noisy labels
    exactly where an uncertainty band would cut.
    """

    matrix: ReaderMatrix
    scores: np.ndarray
    truth: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        return self.matrix.votes[:, 0, self.matrix.original].astype(np.float64)

    @property
    def categories(self) -> np.ndarray:
        """Positive-vote count per case (0..readers)."""
        return self.matrix.votes[:, 0, :].sum(axis=1)


def generate_reader_study(n_cases: int = 600, seed: int = 0,
                          category_weights=(0.45, 0.12, 0.13, 0.30),
                          n_readers: int = 3,
                          boundary=(0.38, 0.62),
                          clear_negative=(0.02, 0.40),
                          clear_positive=(0.60, 0.98)) -> ReaderStudy:
    """Synthesize a case set whose reader disagreement concentrates near
    the score boundary.

    Each case draws a confidence category (vote count 0..n_readers);
    majority vote defines the truth. Clear categories get scores from the
    matching outer range; split categories get scores from the boundary
    range, where their coin-flip original labels produce exactly the
    low-confidence errors a band removal should absorb.
    """
    if n_cases < 4:
        raise ConfigError("need at least 4 cases")
    if n_readers < 2:
        raise ConfigError("need at least two readers")
    weights = np.asarray(category_weights, dtype=np.float64)
    if len(weights) != n_readers + 1 or np.any(weights < 0) or weights.sum() <= 0:
        raise ConfigError(f"category_weights must be {n_readers + 1} "
                          "non-negative numbers")
    weights = weights / weights.sum()
    rng = np.random.default_rng([seed, 4])
    categories = rng.choice(n_readers + 1, size=n_cases, p=weights)
    votes = np.zeros((n_cases, 1, n_readers), dtype=np.uint8)
    scores = np.zeros(n_cases)
    majority = (n_readers + 1) // 2
    for i, c in enumerate(categories):
        order = rng.permutation(n_readers)
        votes[i, 0, order[:c]] = 1
        if c == 0:
            scores[i] = rng.uniform(*clear_negative)
        elif c == n_readers:
            scores[i] = rng.uniform(*clear_positive)
        else:
            scores[i] = rng.uniform(*boundary)
    truth = (categories >= majority).astype(np.float64)
    matrix = ReaderMatrix(votes, ("study",),
                          tuple(f"reader_{k + 1}" for k in range(n_readers)),
                          original=0,
                          case_ids=tuple(f"case_{i:05d}" for i in range(n_cases)))
    return ReaderStudy(matrix=matrix, scores=scores, truth=truth)
