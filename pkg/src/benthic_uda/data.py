"""Point-annotation manifests, resolution-matched patch extraction and synthetic surveys.

Manifest files are UTF-8 text::

    manifest-v1
    # comment
    role source
    class 0 Fine Sand
    survey NG06 Nimbus 0.65 2.0
    crop-override AE2000F 32
    ann images/0001.png 512 384 0 NG06

Class indices and annotation class indices are 0-based. ``survey`` lines may
give ``-`` for the resolution together with a trailing ``focal_px=<f>``
token, in which case the resolution is derived from altitude and focal
length. Image paths are relative to the manifest's directory.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigError, ManifestError

log = logging.getLogger(__name__)

SCHEMA_LINE = "manifest-v1"
BASE_CROP = 224
MIN_CROP = 8
FIELD_GRID = 256


@dataclass(frozen=True)
class SurveyMetadata:
    survey_id: str
    auv_name: str
    resolution_mm_per_pixel: float
    altitude_m: float

    def __post_init__(self):
        res = self.resolution_mm_per_pixel
        if not (math.isfinite(res) and res > 0):
            raise ManifestError(f"survey {self.survey_id}: resolution must be positive, got {res}")
        if not (math.isfinite(self.altitude_m) and self.altitude_m > 0):
            raise ManifestError(f"survey {self.survey_id}: altitude must be positive, got {self.altitude_m}")


@dataclass(frozen=True)
class AnnotationRecord:
    image_path: str
    x: int
    y: int
    class_index: int
    survey_id: str

    @property
    def sort_key(self):
        return (self.survey_id, self.image_path, self.x, self.y)


@dataclass
class DatasetManifest:
    classes: list[str]
    surveys: list[SurveyMetadata]
    annotations: list[AnnotationRecord]
    role: str = "source"
    crop_overrides: dict[str, int] = field(default_factory=dict)
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        self.annotations = sorted(self.annotations, key=lambda a: a.sort_key)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def survey(self, survey_id: str) -> SurveyMetadata:
        for s in self.surveys:
            if s.survey_id == survey_id:
                return s
        raise KeyError(survey_id)

    def labels(self) -> np.ndarray:
        return np.array([a.class_index for a in self.annotations], dtype=np.int64)

    def class_counts(self) -> dict[str, int]:
        counts = Counter(a.class_index for a in self.annotations)
        return {name: counts.get(i, 0) for i, name in enumerate(self.classes)}

    def counts_by_survey(self) -> dict[str, dict[str, int]]:
        table = {}
        for s in self.surveys:
            c = Counter(a.class_index for a in self.annotations if a.survey_id == s.survey_id)
            table[s.survey_id] = {name: c.get(i, 0) for i, name in enumerate(self.classes)}
        return table

    def validate(self) -> "DatasetManifest":
        if len(self.classes) < 2:
            raise ManifestError(f"manifest needs at least 2 classes, got {len(self.classes)}")
        if self.role not in ("source", "target"):
            raise ManifestError(f"role must be 'source' or 'target', got {self.role!r}")
        if not self.annotations:
            raise ManifestError("manifest has no annotations")
        ids = {s.survey_id for s in self.surveys}
        for sid in self.crop_overrides:
            if sid not in ids:
                raise ManifestError(f"crop-override references unknown survey {sid!r}")
        for a in self.annotations:
            if a.survey_id not in ids:
                raise ManifestError(f"annotation {a.image_path} ({a.x},{a.y}) references unknown survey {a.survey_id!r}")
            if not 0 <= a.class_index < len(self.classes):
                raise ManifestError(f"annotation {a.image_path} ({a.x},{a.y}) has unknown class index {a.class_index}")
            if a.x < 0 or a.y < 0:
                raise ManifestError(f"annotation {a.image_path} has negative coordinates ({a.x},{a.y})")
        return self


def ground_resolution(altitude_m: float, focal_length_px: float) -> float:
    """Seabed footprint of one pixel in mm for a nadir camera.

    ``altitude * pixel_pitch / focal_length`` with the focal length expressed
    in pixels of that pitch, which reduces to ``altitude / focal_length_px``.
    """
    if altitude_m <= 0 or focal_length_px <= 0:
        raise ValueError("altitude and focal length must be positive")
    return altitude_m * 1000.0 / focal_length_px


# ---------------------------------------------------------------------------
# manifest I/O


def _row_error(path, lineno, msg):
    return ManifestError(f"{path}:{lineno}: {msg}")


def parse_manifest(text: str, source: str = "<string>") -> DatasetManifest:
    lines = text.splitlines()
    if not lines or lines[0].strip() != SCHEMA_LINE:
        raise ManifestError(f"{source}: first line must be {SCHEMA_LINE!r}")
    classes: dict[int, str] = {}
    surveys: list[SurveyMetadata] = []
    annotations: list[AnnotationRecord] = []
    overrides: dict[str, int] = {}
    role = "source"
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        kind = tok[0]
        try:
            if kind == "class":
                idx = int(tok[1])
                if idx in classes:
                    raise _row_error(source, lineno, f"duplicate class index {idx}")
                classes[idx] = " ".join(tok[2:])
                if not classes[idx]:
                    raise _row_error(source, lineno, "class name missing")
            elif kind == "survey":
                extra = dict(t.split("=", 1) for t in tok[5:])
                altitude = float(tok[4])
                if tok[3] == "-":
                    if "focal_px" not in extra:
                        raise _row_error(source, lineno, "resolution '-' requires focal_px=<f>")
                    res = ground_resolution(altitude, float(extra["focal_px"]))
                else:
                    res = float(tok[3])
                surveys.append(SurveyMetadata(tok[1], tok[2], res, altitude))
            elif kind == "ann":
                if len(tok) < 6:
                    raise _row_error(source, lineno, "annotation needs <path> <x> <y> <class> <survey>")
                path = " ".join(tok[1:-4])
                x, y, c = int(tok[-4]), int(tok[-3]), int(tok[-2])
                annotations.append(AnnotationRecord(path, x, y, c, tok[-1]))
            elif kind == "role":
                role = tok[1]
            elif kind == "crop-override":
                overrides[tok[1]] = int(tok[2])
            else:
                raise _row_error(source, lineno, f"unknown line type {kind!r}")
        except ManifestError as e:
            if str(e).startswith(f"{source}:"):
                raise
            raise _row_error(source, lineno, str(e)) from e
        except (IndexError, ValueError) as e:
            raise _row_error(source, lineno, f"malformed row {line!r} ({e})") from e

    if sorted(classes) != list(range(len(classes))):
        raise ManifestError(f"{source}: class indices must be 0..K-1, got {sorted(classes)}")
    dupes = [k for k, n in Counter(annotations).items() if n > 1]
    if dupes:
        warnings.warn(f"{source}: {len(dupes)} duplicated annotation rows retained")
    manifest = DatasetManifest(
        classes=[classes[i] for i in range(len(classes))],
        surveys=surveys,
        annotations=annotations,
        role=role,
        crop_overrides=overrides,
    )
    return manifest.validate()


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    manifest = parse_manifest(path.read_text(encoding="utf-8"), source=str(path))
    manifest.root = path.parent
    log.info("%s: %d annotations, per-class counts %s", path, len(manifest.annotations),
             manifest.class_counts())
    return manifest


def format_manifest(m: DatasetManifest) -> str:
    out = [SCHEMA_LINE, f"role {m.role}"]
    out += [f"class {i} {name}" for i, name in enumerate(m.classes)]
    out += [f"survey {s.survey_id} {s.auv_name} {s.resolution_mm_per_pixel!r} {s.altitude_m!r}"
            for s in m.surveys]
    out += [f"crop-override {sid} {px}" for sid, px in sorted(m.crop_overrides.items())]
    out += [f"ann {a.image_path} {a.x} {a.y} {a.class_index} {a.survey_id}" for a in m.annotations]
    return "\n".join(out) + "\n"


def save_manifest(m: DatasetManifest, path) -> None:
    Path(path).write_text(format_manifest(m), encoding="utf-8")


def check_same_classes(source: DatasetManifest, target: DatasetManifest) -> None:
    if source.classes != target.classes:
        only_s = [c for c in source.classes if c not in target.classes]
        only_t = [c for c in target.classes if c not in source.classes]
        raise ConfigError(
            "class sets differ between source and target: "
            f"source-only {only_s}, target-only {only_t}, "
            f"source order {source.classes}, target order {target.classes}"
        )


# ---------------------------------------------------------------------------
# scaling and patches


def compute_scaled_crop_size(coarse_res: float, fine_res: float, base_crop: int = BASE_CROP) -> int:
    """Crop size in the coarser survey covering the same seabed area as ``base_crop`` fine pixels."""
    if not (fine_res > 0 and coarse_res > 0):
        raise ConfigError("resolutions must be positive")
    if coarse_res < fine_res:
        raise ConfigError(
            f"coarse resolution {coarse_res} mm/px is finer than fine resolution {fine_res} mm/px; "
            "arguments reversed?"
        )
    return max(MIN_CROP, int(round(base_crop * fine_res / coarse_res)))


def crop_sizes_for_pair(source: DatasetManifest, target: DatasetManifest, use_scaling: bool,
                        base_crop: int = BASE_CROP) -> dict[str, int]:
    """Crop size per survey id across both domains.

    Without scaling every survey uses ``base_crop``. With scaling, surveys
    coarser than the finest survey of the pair are cropped smaller; the
    finest keeps ``base_crop``. Manifest crop overrides take precedence and
    are rescaled when ``base_crop`` differs from 224.
    """
    surveys = list(source.surveys) + list(target.surveys)
    if not use_scaling:
        return {s.survey_id: base_crop for s in surveys}
    fine = min(s.resolution_mm_per_pixel for s in surveys)
    overrides = {**source.crop_overrides, **target.crop_overrides}
    sizes = {}
    for s in surveys:
        if s.survey_id in overrides:
            sizes[s.survey_id] = max(MIN_CROP, int(round(overrides[s.survey_id] * base_crop / BASE_CROP)))
        else:
            sizes[s.survey_id] = compute_scaled_crop_size(s.resolution_mm_per_pixel, fine, base_crop)
    return sizes


def pair_has_equal_resolution(source: DatasetManifest, target: DatasetManifest) -> bool:
    res = {s.resolution_mm_per_pixel for s in list(source.surveys) + list(target.surveys)}
    return len(res) == 1


def crop_window(x: int, y: int, crop: int, width: int, height: int) -> tuple[int, int]:
    """Top-left corner of a ``crop`` window centred on (x, y), shifted to stay inside the image."""
    x0 = min(max(x - crop // 2, 0), width - crop)
    y0 = min(max(y - crop // 2, 0), height - crop)
    return x0, y0


def extract_patch(image: np.ndarray, record: AnnotationRecord, crop_size: int) -> Optional[np.ndarray]:
    """Square ``crop_size`` patch around the annotation, or None if the image is too small."""
    if crop_size < MIN_CROP:
        raise ConfigError(f"crop size must be >= {MIN_CROP}, got {crop_size}")
    height, width = image.shape[:2]
    if height < crop_size or width < crop_size:
        warnings.warn(f"skipping {record.image_path}: {width}x{height} image smaller than crop {crop_size}")
        return None
    if not (0 <= record.x < width and 0 <= record.y < height):
        raise ManifestError(f"annotation ({record.x},{record.y}) outside {width}x{height} image {record.image_path}")
    x0, y0 = crop_window(record.x, record.y, crop_size, width, height)
    if (x0, y0) != (record.x - crop_size // 2, record.y - crop_size // 2):
        log.debug("clamped crop for %s at (%d,%d) to origin (%d,%d)", record.image_path,
                  record.x, record.y, x0, y0)
    return image[y0:y0 + crop_size, x0:x0 + crop_size]


def resize_patch(patch: np.ndarray, target: int = BASE_CROP) -> np.ndarray:
    """Corner-aligned bilinear resize of a square ``(H, W[, C])`` patch; keeps the dtype."""
    if patch.shape[0] != patch.shape[1]:
        raise ValueError(f"patch must be square, got {patch.shape[:2]}")
    if patch.shape[0] == target:
        return patch
    t = torch.from_numpy(np.ascontiguousarray(patch, dtype=np.float64))
    t = t.unsqueeze(-1) if t.ndim == 2 else t
    t = t.permute(2, 0, 1).unsqueeze(0)
    out = F.interpolate(t, size=(target, target), mode="bilinear", align_corners=True)
    out = out[0].permute(1, 2, 0).numpy()
    if patch.ndim == 2:
        out = out[..., 0]
    if np.issubdtype(patch.dtype, np.integer):
        info = np.iinfo(patch.dtype)
        out = np.clip(np.rint(out), info.min, info.max)
    return out.astype(patch.dtype)


def hflip(patch: np.ndarray) -> np.ndarray:
    return patch[:, ::-1]


def augment(patch: np.ndarray, rng: np.random.Generator, p: float = 0.5) -> np.ndarray:
    """Horizontal flip with probability ``p``; nothing else."""
    return hflip(patch) if rng.random() < p else patch


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def load_patches(manifest: DatasetManifest, crop_sizes: dict[str, int],
                 output_size: int = BASE_CROP) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Extract and resize every annotation's patch, in manifest order.

    Returns ``(patches uint8 (n, S, S, 3), labels, kept_indices)``; records
    whose image is too small are skipped.
    """
    patches, labels, kept = [], [], []
    cache_path, cache_img = None, None
    for i, rec in enumerate(manifest.annotations):
        path = manifest.root / rec.image_path
        if path != cache_path:
            cache_path, cache_img = path, read_image(path)
        patch = extract_patch(cache_img, rec, crop_sizes[rec.survey_id])
        if patch is None:
            continue
        patches.append(resize_patch(patch, output_size))
        labels.append(rec.class_index)
        kept.append(i)
    if not patches:
        raise ManifestError("no usable patches in manifest")
    return np.stack(patches), np.array(labels, dtype=np.int64), kept


# ---------------------------------------------------------------------------
# synthetic surveys


@dataclass(frozen=True)
class SyntheticShiftSpec:
    """Two synthetic surveys of the same texture classes at different resolutions.

    Class ``k`` is band-limited noise centred on a class-specific spatial
    frequency (cycles per mm). The target survey is rendered from the same
    process at ``resolution_ratio`` times coarser mm/pixel, then blurred and
    colour shifted.
    """

    num_classes: int = 4
    samples_per_class: int = 200
    resolution_ratio: float = 2.5
    blur_sigma: float = 1.0
    color_shift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 7
    patch_size: int = 64
    fine_resolution_mm: float = 0.4
    altitude_m: float = 2.0
    orientation_concentration: float = 1.0

    def validate(self) -> "SyntheticShiftSpec":
        if self.num_classes < 2:
            raise ConfigError(f"synthetic data needs at least 2 classes, got {self.num_classes}")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be positive")
        if self.resolution_ratio < 1:
            raise ConfigError("resolution_ratio must be >= 1 (target is the coarser survey)")
        if self.blur_sigma < 0:
            raise ConfigError("blur_sigma must be nonnegative")
        if len(self.color_shift) != 3 or any(abs(c) > 0.2 for c in self.color_shift):
            raise ConfigError("color_shift must be three values in [-0.2, 0.2]")
        if self.patch_size < MIN_CROP:
            raise ConfigError(f"patch_size must be >= {MIN_CROP}")
        return self

    def class_frequencies(self) -> np.ndarray:
        """Centre frequency per class in cycles per fine-resolution pixel."""
        return np.geomspace(0.03, 0.14, self.num_classes)

    def class_orientations(self) -> np.ndarray:
        """Preferred texture orientation per class in radians."""
        return np.pi * np.arange(self.num_classes) / self.num_classes


def _band_noise(rng: np.random.Generator, size: int, freq: float, angle: float,
                concentration: float) -> np.ndarray:
    """Unit-variance noise in a ring around ``freq`` cycles/px, favouring orientation ``angle``.

    The angular weight is ``exp(concentration * (cos(2 (phi - angle)) - 1))``;
    zero concentration gives isotropic noise.
    """
    # render on a grid fine enough in frequency for the lowest band, then crop
    grid = max(size, FIELD_GRID)
    noise = rng.standard_normal((grid, grid))
    fy = np.fft.fftfreq(grid)[:, None]
    fx = np.fft.fftfreq(grid)[None, :]
    radius = np.hypot(fx, fy)
    phi = np.arctan2(fy, fx)
    band = np.exp(-0.5 * ((radius - freq) / (0.2 * freq)) ** 2
                  + concentration * (np.cos(2.0 * (phi - angle)) - 1.0))
    field = np.fft.ifft2(np.fft.fft2(noise) * band).real[:size, :size]
    return (field - field.mean()) / (field.std() + 1e-12)


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img
    pad = int(math.ceil(4 * sigma))
    img = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
    h, w = img.shape[:2]
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    transfer = np.exp(-2.0 * np.pi ** 2 * sigma ** 2 * (fx ** 2 + fy ** 2))
    out = np.stack([np.fft.ifft2(np.fft.fft2(img[..., c]) * transfer).real
                    for c in range(img.shape[2])], axis=-1)
    return out[pad:h - pad, pad:w - pad]


def _area_downsample(img: np.ndarray, size: int) -> np.ndarray:
    if img.shape[0] == size:
        return img
    t = torch.from_numpy(img).permute(2, 0, 1).unsqueeze(0)
    return F.interpolate(t, size=(size, size), mode="area")[0].permute(1, 2, 0).numpy()


def _render_survey(spec: SyntheticShiftSpec, rng: np.random.Generator, ratio: float,
                   blur: float, shift: Sequence[float], out_dir: Path, survey: SurveyMetadata,
                   role: str, classes: list[str]) -> DatasetManifest:
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    size = int(round(spec.patch_size * 1.25))
    fine_size = int(math.ceil(size * ratio))
    freqs = spec.class_frequencies()
    angles = spec.class_orientations()
    base_color = np.array([0.35, 0.45, 0.5])
    annotations = []
    n = 0
    for k in range(spec.num_classes):
        for _ in range(spec.samples_per_class):
            jitter = np.exp(rng.uniform(-0.08, 0.08))
            angle = angles[k] + rng.normal(0.0, 0.1)
            field = _band_noise(rng, fine_size, freqs[k] * jitter, angle, spec.orientation_concentration)
            tint = base_color + rng.uniform(-0.05, 0.05, size=3)
            contrast = rng.uniform(0.14, 0.2)
            img = tint[None, None, :] + contrast * field[..., None]
            img = _area_downsample(img, size)
            img = _gaussian_blur(img, blur)
            img = img + np.asarray(shift)[None, None, :]
            img8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
            name = f"images/{n:06d}.png"
            Image.fromarray(img8, mode="RGB").save(out_dir / name, format="PNG")
            x, y = (int(v) for v in rng.integers(0, size, size=2))
            annotations.append(AnnotationRecord(name, x, y, k, survey.survey_id))
            n += 1
    manifest = DatasetManifest(classes=classes, surveys=[survey], annotations=annotations, role=role)
    manifest.root = out_dir
    save_manifest(manifest, out_dir / "manifest.txt")
    return manifest.validate()


def generate_synthetic_domain_pair(spec: SyntheticShiftSpec, out_dir) -> tuple[DatasetManifest, DatasetManifest]:
    """Write ``<out>/source`` and ``<out>/target`` image trees with their manifests.

    Output is byte-identical for a fixed spec.
    """
    spec.validate()
    out_dir = Path(out_dir)
    classes = [f"texture-{k}" for k in range(spec.num_classes)]
    src_survey = SurveyMetadata("SYN-FINE", "synthetic-fine", spec.fine_resolution_mm, spec.altitude_m)
    tgt_survey = SurveyMetadata("SYN-COARSE", "synthetic-coarse",
                                spec.fine_resolution_mm * spec.resolution_ratio,
                                spec.altitude_m * spec.resolution_ratio)
    if spec.resolution_ratio == 1:
        tgt_survey = dataclasses.replace(tgt_survey, survey_id="SYN-FINE-2", auv_name="synthetic-fine")
    src_rng = np.random.default_rng([spec.seed, 0])
    tgt_rng = np.random.default_rng([spec.seed, 1])
    source = _render_survey(spec, src_rng, 1.0, 0.0, (0.0, 0.0, 0.0), out_dir / "source",
                            src_survey, "source", classes)
    target = _render_survey(spec, tgt_rng, spec.resolution_ratio, spec.blur_sigma, spec.color_shift,
                            out_dir / "target", tgt_survey, "target", classes)
    return source, target
