"""Dataset model, on-disk format, and procedural multi-domain generators.

A benchmark is a set of styled image domains over a shared label space:
several labeled source domains, one unlabeled target domain, and
(optionally) a held-out labeled bundle rendered in the target's style for
evaluation. Domains share geometry (glyphs or figure layouts) and differ
by a deterministic per-domain style transform, so the domain gap is real
but learnable at desk scale.

Pixels are stored as float32 in [-1, 1]; the on-disk format is 8-bit PNG
with the exact affine map ``u -> 2u/255 - 1``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image as PILImage

from .errors import ConfigurationError, DataError

KIND_CLASSIFICATION = "classification"
KIND_SEGMENTATION = "segmentation"
KINDS = (KIND_CLASSIFICATION, KIND_SEGMENTATION)

ROLE_SOURCE = "source"
ROLE_TARGET = "target"
ROLE_EVAL = "eval"

IGNORE_LABEL = 255

MANIFEST_NAME = "manifest.json"


# ---------------------------------------------------------------------------
# Core types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a synthetic multi-domain benchmark."""

    num_sources: int = 3
    num_classes: int = 10
    images_per_domain: int = 100
    image_size: int = 32
    seed: int = 0

    def validate(self) -> None:
        if self.num_sources < 2:
            raise ConfigurationError("num_sources must be >= 2, got %r" % (self.num_sources,))
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2, got %r" % (self.num_classes,))
        if self.images_per_domain < 1:
            raise ConfigurationError(
                "images_per_domain must be >= 1, got %r" % (self.images_per_domain,))
        if self.image_size < 16:
            raise ConfigurationError("image_size must be >= 16, got %r" % (self.image_size,))


@dataclass(frozen=True)
class DomainBundle:
    """One domain's images plus labels (sources) or no labels (target).

    images: float32 array (N, H, W, C) with values in [-1, 1].
    labels: int64 array (N,) for classification, (N, H, W) for segmentation,
            or None for the unlabeled target domain.
    """

    name: str
    kind: str
    images: np.ndarray
    labels: np.ndarray | None
    num_classes: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError("unknown bundle kind %r" % (self.kind,))
        img = self.images
        if img.ndim != 4 or img.shape[3] not in (1, 3):
            raise DataError("images must be (N, H, W, C) with C in {1, 3}, got %r" % (img.shape,))
        if img.shape[1] < 8 or img.shape[2] < 8:
            raise DataError("image sides must be >= 8, got %r" % (img.shape,))
        if not np.all(np.isfinite(img)):
            raise DataError("bundle %r contains non-finite pixels" % (self.name,))
        if img.min() < -1.0 or img.max() > 1.0:
            raise DataError("bundle %r has pixels outside [-1, 1]" % (self.name,))
        if self.labels is not None:
            lab = self.labels
            if len(lab) != len(img):
                raise DataError(
                    "bundle %r: %d labels for %d images" % (self.name, len(lab), len(img)))
            if self.kind == KIND_SEGMENTATION:
                if lab.shape != img.shape[:3]:
                    raise DataError("label maps must match image layout, got %r vs %r"
                                    % (lab.shape, img.shape))
            valid = lab[lab != IGNORE_LABEL]
            if valid.size and (valid.min() < 0 or valid.max() >= self.num_classes):
                raise DataError("bundle %r has labels outside [0, %d)"
                                % (self.name, self.num_classes))
        # Bundles are shared read-only across threads.
        self.images.flags.writeable = False
        if self.labels is not None:
            self.labels.flags.writeable = False

    @property
    def count(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None


@dataclass(frozen=True)
class DomainRecord:
    name: str
    role: str
    kind: str
    num_classes: int
    image_dir: str
    label_path: str | None


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    image_size: tuple[int, int, int]
    domains: tuple[DomainRecord, ...] = field(default_factory=tuple)

    def __post_init__(self):
        roles = [d.role for d in self.domains]
        if roles.count(ROLE_TARGET) != 1:
            raise DataError("manifest must declare exactly one target domain, got %d"
                            % roles.count(ROLE_TARGET))
        if roles.count(ROLE_SOURCE) < 2:
            raise DataError("manifest must declare at least two source domains, got %d"
                            % roles.count(ROLE_SOURCE))
        kinds = {d.kind for d in self.domains}
        if len(kinds) != 1:
            raise DataError("all domains must share one task kind, got %r" % (sorted(kinds),))
        counts = {d.num_classes for d in self.domains}
        if len(counts) != 1:
            raise DataError("all domains must share the class count, got %r" % (sorted(counts),))
        for d in self.domains:
            if d.role not in (ROLE_SOURCE, ROLE_TARGET, ROLE_EVAL):
                raise DataError("unknown role %r for domain %r" % (d.role, d.name))
            if d.role == ROLE_TARGET and d.label_path is not None:
                raise DataError("target domain %r must not declare labels" % (d.name,))
            if d.role in (ROLE_SOURCE, ROLE_EVAL) and d.label_path is None:
                raise DataError("labeled domain %r is missing its label path" % (d.name,))

    @property
    def kind(self) -> str:
        return self.domains[0].kind

    @property
    def num_classes(self) -> int:
        return self.domains[0].num_classes

    @property
    def source_names(self) -> list[str]:
        return [d.name for d in self.domains if d.role == ROLE_SOURCE]

    @property
    def target_name(self) -> str:
        return next(d.name for d in self.domains if d.role == ROLE_TARGET)

    @property
    def eval_names(self) -> list[str]:
        return [d.name for d in self.domains if d.role == ROLE_EVAL]

    def record(self, name: str) -> DomainRecord:
        for d in self.domains:
            if d.name == name:
                return d
        raise DataError("manifest has no domain named %r" % (name,))


# ---------------------------------------------------------------------------
# Pixel scaling
# ---------------------------------------------------------------------------

def pixels_from_uint8(raster: np.ndarray) -> np.ndarray:
    """Exact affine decode: u -> 2u/255 - 1 (0 -> -1.0, 255 -> +1.0)."""
    return (raster.astype(np.float32) * (2.0 / 255.0) - 1.0).astype(np.float32)


def uint8_from_pixels(pixels: np.ndarray) -> np.ndarray:
    """Inverse map with rounding; round-trips within 1/255 per channel."""
    u = np.rint((pixels.astype(np.float64) + 1.0) * (255.0 / 2.0))
    return np.clip(u, 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Glyph geometry (classification)
# ---------------------------------------------------------------------------

def _primitive_masks(x: np.ndarray, y: np.ndarray) -> dict[str, np.ndarray]:
    rho = np.hypot(x, y)
    ring = (rho >= 0.52) & (rho <= 0.82)
    return {
        "ring": ring,
        "ring_upper": ring & (y <= 0.05),
        "ring_lower": ring & (y >= -0.05),
        "hbar_top": (np.abs(y + 0.62) <= 0.14) & (np.abs(x) <= 0.62),
        "hbar_mid": (np.abs(y) <= 0.14) & (np.abs(x) <= 0.62),
        "hbar_bot": (np.abs(y - 0.62) <= 0.14) & (np.abs(x) <= 0.62),
        "vbar_left": (np.abs(x + 0.55) <= 0.14) & (np.abs(y) <= 0.72),
        "vbar_right": (np.abs(x - 0.55) <= 0.14) & (np.abs(y) <= 0.72),
        "vbar_center": (np.abs(x) <= 0.14) & (np.abs(y) <= 0.72),
        "vbar_left_upper": (np.abs(x + 0.55) <= 0.14) & (y >= -0.72) & (y <= 0.1),
        "vbar_right_lower": (np.abs(x - 0.55) <= 0.14) & (y >= -0.1) & (y <= 0.72),
        "diag": (np.abs(y - x) <= 0.2) & (np.abs(x) <= 0.62) & (np.abs(y) <= 0.62),
        "adiag": (np.abs(y + x) <= 0.2) & (np.abs(x) <= 0.62) & (np.abs(y) <= 0.62),
        "dot": rho <= 0.28,
    }


_GLYPH_TABLE = [
    ("ring",),
    ("vbar_center",),
    ("hbar_top", "adiag", "hbar_bot"),
    ("hbar_top", "hbar_mid", "hbar_bot", "vbar_right"),
    ("vbar_left_upper", "hbar_mid", "vbar_right"),
    ("hbar_top", "vbar_left_upper", "hbar_mid", "vbar_right_lower", "hbar_bot"),
    ("ring_lower", "vbar_left"),
    ("hbar_top", "adiag"),
    ("ring", "hbar_mid"),
    ("ring_upper", "vbar_right"),
]
_EXTRA_PRIMS = ("ring", "hbar_top", "hbar_bot", "vbar_left", "vbar_right", "dot")


def _glyph_primitives(class_index: int) -> tuple[str, ...]:
    if class_index < len(_GLYPH_TABLE):
        return _GLYPH_TABLE[class_index]
    bits = class_index - len(_GLYPH_TABLE) + 1
    if bits >= 2 ** len(_EXTRA_PRIMS):
        raise ConfigurationError("num_classes too large for the glyph library")
    return tuple(p for i, p in enumerate(_EXTRA_PRIMS) if bits & (1 << i))


def _render_glyph(class_index: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean glyph mask with a small random affine jitter."""
    theta = rng.uniform(-0.16, 0.16)
    scale = rng.uniform(0.85, 1.1)
    dx, dy = rng.uniform(-0.12, 0.12, size=2)
    lin = np.linspace(-1.0, 1.0, size)
    gx, gy = np.meshgrid(lin, lin)
    # inverse affine: undo shift, rotation, scale
    ux, uy = gx - dx, gy - dy
    c, s = math.cos(-theta), math.sin(-theta)
    rx = (c * ux - s * uy) / scale
    ry = (s * ux + c * uy) / scale
    prims = _primitive_masks(rx, ry)
    mask = np.zeros((size, size), dtype=bool)
    for name in _glyph_primitives(class_index):
        mask |= prims[name]
    return mask


# ---------------------------------------------------------------------------
# Styles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Style:
    fg: tuple[float, float, float]
    bg: tuple[float, float, float]
    bg_kind: str = "solid"        # solid | checker | gradient
    bg_alt: tuple[float, float, float] | None = None
    noise: float = 0.0
    channel_roll: int = 0


_BASE_STYLES = [
    _Style(fg=(1.0, 1.0, 1.0), bg=(0.02, 0.02, 0.02)),
    _Style(fg=(0.05, 0.05, 0.05), bg=(0.97, 0.97, 0.97)),
    _Style(fg=(0.95, 0.3, 0.2), bg=(0.25, 0.35, 0.75), bg_kind="checker",
           bg_alt=(0.12, 0.18, 0.42)),
    _Style(fg=(0.95, 0.9, 0.35), bg=(0.55, 0.55, 0.55), noise=0.06),
    _Style(fg=(0.3, 0.95, 0.45), bg=(0.05, 0.28, 0.1), bg_kind="gradient",
           bg_alt=(0.12, 0.5, 0.2), channel_roll=1),
]


def _style_for(domain_index: int) -> _Style:
    base = _BASE_STYLES[domain_index % len(_BASE_STYLES)]
    shift = 0.08 * (domain_index // len(_BASE_STYLES))
    if shift == 0.0:
        return base
    lift = lambda c: tuple(min(1.0, v + shift) for v in c)  # noqa: E731
    return _Style(fg=lift(base.fg), bg=lift(base.bg), bg_kind=base.bg_kind,
                  bg_alt=lift(base.bg_alt) if base.bg_alt else None,
                  noise=base.noise, channel_roll=base.channel_roll)


def _background(style: _Style, size: int) -> np.ndarray:
    bg = np.empty((size, size, 3), dtype=np.float64)
    bg[:] = style.bg
    if style.bg_kind == "checker" and style.bg_alt is not None:
        cell = max(2, size // 8)
        yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        alt = ((yy // cell + xx // cell) % 2).astype(bool)
        bg[alt] = style.bg_alt
    elif style.bg_kind == "gradient" and style.bg_alt is not None:
        t = np.linspace(0.0, 1.0, size)[:, None, None]
        bg = (1.0 - t) * np.asarray(style.bg) + t * np.asarray(style.bg_alt)
        bg = np.broadcast_to(bg, (size, size, 3)).copy()
    return bg


def _apply_style(base01: np.ndarray, style: _Style, rng: np.random.Generator) -> np.ndarray:
    img = base01
    if style.channel_roll:
        img = np.roll(img, style.channel_roll, axis=2)
    if style.noise > 0.0:
        img = img + rng.normal(0.0, style.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Classification synthesis
# ---------------------------------------------------------------------------

def _domain_rng(spec: SynthSpec, domain_index: int, tag: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([spec.seed, domain_index, tag])))


def _classification_domain(spec: SynthSpec, domain_index: int, tag: int,
                           ) -> tuple[np.ndarray, np.ndarray]:
    rng = _domain_rng(spec, domain_index, tag)
    style = _style_for(domain_index)
    size = spec.image_size
    n = spec.images_per_domain
    images = np.empty((n, size, size, 3), dtype=np.float32)
    labels = rng.integers(0, spec.num_classes, size=n, dtype=np.int64)
    for j in range(n):
        mask = _render_glyph(int(labels[j]), size, rng)
        base = _background(style, size)
        base[mask] = style.fg
        images[j] = pixels_from_uint8(uint8_from_pixels(
            (_apply_style(base, style, rng) * 2.0 - 1.0).astype(np.float32)))
    return images, labels


def synthesize_classification_domains(spec: SynthSpec) -> list[DomainBundle]:
    """Generate ``num_sources`` labeled glyph domains plus one unlabeled
    target domain, each with a distinct deterministic style."""
    spec.validate()
    bundles = []
    for i in range(spec.num_sources):
        images, labels = _classification_domain(spec, i, tag=0)
        bundles.append(DomainBundle(name="src%d" % i, kind=KIND_CLASSIFICATION,
                                    images=images, labels=labels,
                                    num_classes=spec.num_classes))
    images, _ = _classification_domain(spec, spec.num_sources, tag=0)
    bundles.append(DomainBundle(name="target", kind=KIND_CLASSIFICATION,
                                images=images, labels=None,
                                num_classes=spec.num_classes))
    return bundles


# ---------------------------------------------------------------------------
# Segmentation synthesis
# ---------------------------------------------------------------------------

def _figure_mask(shape_type: int, cx: float, cy: float, r: float, theta: float,
                 gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    ux, uy = gx - cx, gy - cy
    c, s = math.cos(-theta), math.sin(-theta)
    rx, ry = c * ux - s * uy, s * ux + c * uy
    if shape_type == 0:
        return rx * rx + ry * ry <= r * r
    if shape_type == 1:
        return np.maximum(np.abs(rx), np.abs(ry)) <= r
    ax, ay = 0.0, -r
    bx, by = -0.9 * r, 0.62 * r
    cx2, cy2 = 0.9 * r, 0.62 * r
    d0 = (bx - ax) * (ry - ay) - (by - ay) * (rx - ax)
    d1 = (cx2 - bx) * (ry - by) - (cy2 - by) * (rx - bx)
    d2 = (ax - cx2) * (ry - cy2) - (ay - cy2) * (rx - cx2)
    return ((d0 >= 0) & (d1 >= 0) & (d2 >= 0)) | ((d0 <= 0) & (d1 <= 0) & (d2 <= 0))


def _class_palette(num_classes: int) -> np.ndarray:
    colors = np.empty((num_classes, 3), dtype=np.float64)
    colors[0] = (0.16, 0.16, 0.18)
    for c in range(1, num_classes):
        h = (c - 1) / max(1, num_classes - 1)
        colors[c] = (0.35 + 0.6 * abs(math.cos(math.pi * h)),
                     0.3 + 0.6 * h,
                     0.85 - 0.6 * h)
    return np.clip(colors, 0.0, 1.0)


def _segmentation_domain(spec: SynthSpec, domain_index: int, tag: int,
                         ) -> tuple[np.ndarray, np.ndarray]:
    rng = _domain_rng(spec, domain_index, tag)
    style = _style_for(domain_index)
    size = spec.image_size
    n = spec.images_per_domain
    num_fig = spec.num_classes - 1
    lin = np.linspace(-1.0, 1.0, size)
    gx, gy = np.meshgrid(lin, lin)
    palette = _class_palette(spec.num_classes)
    images = np.empty((n, size, size, 3), dtype=np.float32)
    labels = np.empty((n, size, size), dtype=np.int64)
    # one anchor region per figure class keeps every class visible
    anchors = [(-0.5 + (k % 2), -0.5 + (k // 2) * (1.0 if num_fig > 2 else 0.0))
               for k in range(num_fig)]
    for j in range(n):
        base = _background(style, size)
        label = np.zeros((size, size), dtype=np.int64)
        for c in range(1, spec.num_classes):
            ax, ay = anchors[(c - 1) % len(anchors)]
            cx = ax + rng.uniform(-0.3, 0.3)
            cy = ay + rng.uniform(-0.3, 0.3)
            r = rng.uniform(0.22, 0.38)
            theta = rng.uniform(-0.4, 0.4)
            mask = _figure_mask((c - 1) % 3, cx, cy, r, theta, gx, gy)
            base[mask] = palette[c]
            label[mask] = c
        img = _apply_style(base, style, rng) * 2.0 - 1.0
        images[j] = pixels_from_uint8(uint8_from_pixels(img.astype(np.float32)))
        labels[j] = label
    return images, labels


def synthesize_segmentation_domains(spec: SynthSpec) -> list[DomainBundle]:
    """Generate labeled figure-rendering domains plus an unlabeled target.

    Label maps use class 0 for background and 1..L-1 for figure classes;
    the ignore value is never emitted by the generator."""
    spec.validate()
    bundles = []
    for i in range(spec.num_sources):
        images, labels = _segmentation_domain(spec, i, tag=0)
        bundles.append(DomainBundle(name="src%d" % i, kind=KIND_SEGMENTATION,
                                    images=images, labels=labels,
                                    num_classes=spec.num_classes))
    images, _ = _segmentation_domain(spec, spec.num_sources, tag=0)
    bundles.append(DomainBundle(name="target", kind=KIND_SEGMENTATION,
                                images=images, labels=None,
                                num_classes=spec.num_classes))
    return bundles


def synthesize_target_eval_bundle(spec: SynthSpec, kind: str) -> DomainBundle:
    """A held-out labeled bundle in the target's style, for evaluation only.

    Uses an independent random stream, so it never overlaps the unlabeled
    target bundle sample-for-sample."""
    spec.validate()
    if kind == KIND_CLASSIFICATION:
        images, labels = _classification_domain(spec, spec.num_sources, tag=1)
    elif kind == KIND_SEGMENTATION:
        images, labels = _segmentation_domain(spec, spec.num_sources, tag=1)
    else:
        raise ConfigurationError("unknown kind %r" % (kind,))
    return DomainBundle(name="target_eval", kind=kind, images=images,
                        labels=labels, num_classes=spec.num_classes)


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------

def save_bundle(bundle: DomainBundle, domain_dir: Path) -> None:
    domain_dir = Path(domain_dir)
    image_dir = domain_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    names = ["%05d.png" % i for i in range(bundle.count)]
    for name, img in zip(names, bundle.images):
        raster = uint8_from_pixels(img)
        if raster.shape[2] == 1:
            raster = raster[:, :, 0]
        PILImage.fromarray(raster).save(image_dir / name)
    if bundle.labels is None:
        return
    if bundle.kind == KIND_CLASSIFICATION:
        with open(domain_dir / "labels.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["filename", "class"])
            for name, lab in zip(names, bundle.labels):
                writer.writerow([name, int(lab)])
    else:
        label_dir = domain_dir / "labels"
        label_dir.mkdir(parents=True, exist_ok=True)
        for name, lab in zip(names, bundle.labels):
            PILImage.fromarray(lab.astype(np.uint8)).save(label_dir / name)


def save_dataset(bundles: Sequence[DomainBundle], root: Path,
                 eval_bundle: DomainBundle | None = None) -> Path:
    """Write bundles plus a manifest; the single unlabeled bundle becomes
    the target, labeled ones become sources."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    records = []

    def add(bundle: DomainBundle, role: str) -> None:
        save_bundle(bundle, root / bundle.name)
        label_path = None
        if bundle.labels is not None:
            label_path = ("%s/labels.csv" % bundle.name
                          if bundle.kind == KIND_CLASSIFICATION else "%s/labels" % bundle.name)
        records.append(DomainRecord(
            name=bundle.name, role=role, kind=bundle.kind,
            num_classes=bundle.num_classes,
            image_dir="%s/images" % bundle.name, label_path=label_path))

    for bundle in bundles:
        add(bundle, ROLE_TARGET if bundle.labels is None else ROLE_SOURCE)
    if eval_bundle is not None:
        add(eval_bundle, ROLE_EVAL)

    shape = bundles[0].image_shape
    manifest = DatasetManifest(root=root, image_size=shape, domains=tuple(records))
    doc = {
        "version": 1,
        "image_size": list(shape),
        "domains": [
            {"name": d.name, "role": d.role, "kind": d.kind,
             "num_classes": d.num_classes, "images": d.image_dir, "labels": d.label_path}
            for d in manifest.domains
        ],
    }
    path = root / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=2))
    return path


def load_manifest(path: Path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise DataError("manifest not found: %s" % (path,))
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError("manifest %s is not valid JSON: %s" % (path, exc)) from exc
    try:
        records = tuple(DomainRecord(
            name=d["name"], role=d["role"], kind=d["kind"],
            num_classes=int(d["num_classes"]), image_dir=d["images"],
            label_path=d.get("labels")) for d in doc["domains"])
        size = tuple(int(v) for v in doc["image_size"])
    except (KeyError, TypeError) as exc:
        raise DataError("manifest %s is missing field %s" % (path, exc)) from exc
    if len(size) != 3:
        raise DataError("manifest image_size must be [H, W, C], got %r" % (size,))
    return DatasetManifest(root=path.parent, image_size=size, domains=records)


def _load_raster(path: Path) -> np.ndarray:
    if not path.is_file():
        raise DataError("missing raster file: %s" % (path,))
    arr = np.asarray(PILImage.open(path))
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def load_bundle(manifest: DatasetManifest, name: str) -> DomainBundle:
    record = manifest.record(name)
    image_dir = manifest.root / record.image_dir
    if not image_dir.is_dir():
        raise DataError("image directory missing: %s" % (image_dir,))
    files = sorted(image_dir.glob("*.png"))
    if not files:
        raise DataError("no images in %s" % (image_dir,))
    h, w, c = manifest.image_size
    images = np.empty((len(files), h, w, c), dtype=np.float32)
    for i, f in enumerate(files):
        raster = _load_raster(f)
        if raster.shape != (h, w, c):
            raise DataError("image %s has shape %r, expected %r"
                            % (f, raster.shape, (h, w, c)))
        images[i] = pixels_from_uint8(raster)

    labels = None
    if record.label_path is not None:
        label_path = manifest.root / record.label_path
        if record.kind == KIND_CLASSIFICATION:
            if not label_path.is_file():
                raise DataError("label CSV missing: %s" % (label_path,))
            table = {}
            with open(label_path, newline="") as f:
                for row in csv.DictReader(f):
                    table[row["filename"]] = int(row["class"])
            labels = np.empty(len(files), dtype=np.int64)
            for i, f in enumerate(files):
                if f.name not in table:
                    raise DataError("label CSV %s has no entry for %s" % (label_path, f.name))
                value = table[f.name]
                if not 0 <= value < record.num_classes:
                    raise DataError("label %d for %s is outside [0, %d)"
                                    % (value, f.name, record.num_classes))
                labels[i] = value
        else:
            labels = np.empty((len(files), h, w), dtype=np.int64)
            for i, f in enumerate(files):
                lab_file = label_path / f.name
                raster = _load_raster(lab_file)
                if raster.shape != (h, w, 1):
                    raise DataError("label map %s has shape %r, expected single channel %r"
                                    % (lab_file, raster.shape, (h, w)))
                lab = raster[:, :, 0].astype(np.int64)
                bad = lab[(lab != IGNORE_LABEL) & (lab >= record.num_classes)]
                if bad.size:
                    raise DataError("label map %s contains value %d >= %d"
                                    % (lab_file, int(bad[0]), record.num_classes))
                labels[i] = lab
    return DomainBundle(name=name, kind=record.kind, images=images,
                        labels=labels, num_classes=record.num_classes)
