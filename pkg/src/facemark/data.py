"""Dataset loading, preprocessing, augmentation and angle annotation.

Manifest format (External Interface), one whitespace-separated record per
line:

    image_path scheme bx by bw bh  x0 y0 ... x(N-1) y(N-1)  v0 ... v(N-1)
        [a0 ... a5]  [yaw pitch roll]

where N comes from the named scheme, v* are 0/1 visibility bits, a* are 0/1
attribute bits over (profile, frontal, head-up, head-down, expression,
occlusion) and the optional trailing triple is ground-truth Euler angles in
radians. Records without attribute bits load as all-false and are flagged
for the annotator. Image paths are relative to the manifest's directory.

Landmark and bbox units are pixels before cropping; crop_resize maps both
into the unit square of the crop (bbox becomes (0, 0, 1, 1)).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np

from .errors import DataError, ManifestError, OccludedAnchorsError
from .geometry import (
    EulerAngles,
    ReferenceFace,
    estimate_rotation,
    euler_from_rotation,
    wrap_angle,
)
from .landmarks import LandmarkSet
from .loss import ATTRIBUTE_CLASSES, AttributeVector, ClassWeights, NUM_CLASSES
from .schemes import get_scheme

CROP_SIZE = 112


@dataclass(frozen=True)
class FaceSample:
    image: np.ndarray              # H x W x 3 float32 in [0, 1]
    bbox: tuple                    # (x, y, w, h)
    landmarks: LandmarkSet
    scheme: str
    attributes: AttributeVector = field(default_factory=AttributeVector.none)
    gt_angles: EulerAngles | None = None
    attributes_annotated: bool = True
    angles_unavailable: bool = False
    cropped: bool = False
    image_path: str | None = None

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float32)
        if img.ndim != 3 or img.shape[2] != 3:
            raise DataError(f"image must be HxWx3, got {img.shape}")
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "bbox", tuple(float(v) for v in self.bbox))

    @property
    def visibility(self) -> np.ndarray:
        return self.landmarks.visibility

    @property
    def n_landmarks(self) -> int:
        return len(self.landmarks)


# ---------------------------------------------------------------------------
# image I/O (lossless raster via PNG)
# ---------------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if raw is None:
        raise DataError(f"cannot read image {path}")
    return cv2.cvtColor(raw, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0


def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float32), 0.0, 1.0)
    raw = cv2.cvtColor((arr * 255.0).round().astype(np.uint8), cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), raw):
        raise DataError(f"cannot write image {path}")


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def _format_floats(values) -> list[str]:
    return [repr(float(v)) for v in np.asarray(values).ravel()]

def format_manifest_line(sample: FaceSample, image_path: str) -> str:
    toks = [image_path, sample.scheme]
    toks += _format_floats(sample.bbox)
    toks += _format_floats(sample.landmarks.points)
    toks += [str(int(v)) for v in sample.landmarks.visibility]
    toks += [str(int(v)) for v in sample.attributes.membership]
    if sample.gt_angles is not None:
        toks += _format_floats(sample.gt_angles.as_array())
    return " ".join(toks)


def write_manifest(samples: list[FaceSample], path) -> None:
    lines = []
    for s in samples:
        if s.image_path is None:
            raise DataError("sample has no image_path; use save_dataset instead")
        lines.append(format_manifest_line(s, s.image_path))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def save_dataset(samples: list[FaceSample], out_dir, prefix: str = "img") -> Path:
    """Write PNG images plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    relocated = []
    for i, s in enumerate(samples):
        rel = f"images/{prefix}_{i:05d}.png"
        save_image(out_dir / rel, s.image)
        relocated.append(replace(s, image_path=rel))
    write_manifest(relocated, out_dir / "manifest.txt")
    return out_dir / "manifest.txt"


def parse_manifest_line(line: str, base_dir: Path, lineno: int, path,
                        load_images: bool = True) -> FaceSample:
    toks = line.split()
    if len(toks) < 2:
        raise ManifestError("record too short", path, lineno)
    scheme = get_scheme(toks[1])
    n = scheme.n_landmarks
    base = 6 + 3 * n
    if len(toks) not in (base, base + NUM_CLASSES, base + NUM_CLASSES + 3):
        raise ManifestError(
            f"expected {base}, {base + NUM_CLASSES} or {base + NUM_CLASSES + 3} "
            f"fields for scheme {scheme.name}, got {len(toks)}",
            path,
            lineno,
        )
    try:
        bbox = tuple(float(t) for t in toks[2:6])
        coords = np.array([float(t) for t in toks[6:6 + 2 * n]]).reshape(n, 2)
        vis = np.array([int(t) for t in toks[6 + 2 * n:6 + 3 * n]], dtype=bool)
        attrs_known = len(toks) > base
        if attrs_known:
            attrs = AttributeVector(
                np.array([int(t) for t in toks[base:base + NUM_CLASSES]], dtype=bool)
            )
        else:
            attrs = AttributeVector.none()
        angles = None
        if len(toks) == base + NUM_CLASSES + 3:
            yaw, pitch, roll = (float(t) for t in toks[base + NUM_CLASSES:])
            angles = EulerAngles(yaw, pitch, roll)
    except (ValueError, IndexError) as exc:
        raise ManifestError(f"cannot parse record: {exc}", path, lineno) from None
    if bbox[2] <= 0 or bbox[3] <= 0:
        raise ManifestError("bbox must have positive size", path, lineno)
    image_rel = toks[0]
    if load_images:
        image = load_image(base_dir / image_rel)
        h, w = image.shape[:2]
        x0 = min(max(bbox[0], 0.0), w - 1.0)
        y0 = min(max(bbox[1], 0.0), h - 1.0)
        bbox = (x0, y0, min(bbox[2], w - x0), min(bbox[3], h - y0))
    else:
        image = np.zeros((1, 1, 3), dtype=np.float32)
    return FaceSample(
        image=image,
        bbox=bbox,
        landmarks=LandmarkSet(coords, vis),
        scheme=scheme.name,
        attributes=attrs,
        gt_angles=angles,
        attributes_annotated=attrs_known,
        image_path=image_rel,
    )


def load_manifest(path, load_images: bool = True) -> list[FaceSample]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    samples = []
    base_dir = path.parent
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        samples.append(
            parse_manifest_line(line, base_dir, lineno, str(path), load_images)
        )
    return samples


# ---------------------------------------------------------------------------
# cropping
# ---------------------------------------------------------------------------

def crop_resize(sample: FaceSample, out_size: int = CROP_SIZE, margin: float = 0.0) -> FaceSample:
    """Resample the (margin-expanded) bbox to out_size^2; landmarks go to
    unit crop coordinates."""
    bx, by, bw, bh = sample.bbox
    if bw <= 1.0 or bh <= 1.0:
        raise DataError(f"degenerate bbox {sample.bbox}")
    bx -= bw * margin
    by -= bh * margin
    bw *= 1.0 + 2.0 * margin
    bh *= 1.0 + 2.0 * margin
    sx, sy = out_size / bw, out_size / bh
    # pixel-center coordinates: dst = (src + 0.5 - b0) * scale - 0.5
    m = np.array(
        [[sx, 0.0, (0.5 - bx) * sx - 0.5], [0.0, sy, (0.5 - by) * sy - 0.5]],
        dtype=np.float64,
    )
    image = cv2.warpAffine(
        sample.image,
        m,
        (out_size, out_size),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_REPLICATE,
    )
    pts = (sample.landmarks.points - [bx, by]) / [bw, bh]
    return replace(
        sample,
        image=image,
        bbox=(0.0, 0.0, 1.0, 1.0),
        landmarks=LandmarkSet(pts, sample.landmarks.visibility),
        cropped=True,
    )


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentationConfig:
    enable_flip: bool = True
    rotation_degrees: tuple = tuple(range(-30, 31, 5))
    occlusion_fraction: float = 0.2
    rng_seed: int = 0
    mean_color: tuple | None = None  # None: use the sample's own mean

    def __post_init__(self):
        if not (0 <= self.occlusion_fraction < 1):
            raise ValueError("occlusion_fraction must lie in [0, 1)")
        for r in self.rotation_degrees:
            if not math.isfinite(r):
                raise ValueError("rotation angles must be finite")


@dataclass
class AugmentSkipReport:
    skipped_rotations: int = 0
    details: list = field(default_factory=list)

    def record(self, sample_path, angle):
        self.skipped_rotations += 1
        self.details.append((sample_path, angle))


def flip_sample(sample: FaceSample) -> FaceSample:
    scheme = get_scheme(sample.scheme)
    image = np.ascontiguousarray(sample.image[:, ::-1, :])
    pts = sample.landmarks.points.copy()
    pts[:, 0] = 1.0 - pts[:, 0]
    lm = LandmarkSet(pts, sample.landmarks.visibility).permuted(scheme.flip_perm)
    angles = sample.gt_angles
    if angles is not None:
        angles = EulerAngles(-angles.yaw, angles.pitch, -angles.roll)
    return replace(sample, image=image, landmarks=lm, gt_angles=angles)


def rotate_sample(sample: FaceSample, degrees: float) -> FaceSample:
    phi = math.radians(degrees)
    c, s = math.cos(phi), math.sin(phi)
    q = np.array([[c, -s], [s, c]])
    size = sample.image.shape[0]
    center_px = size / 2.0 - 0.5
    m = np.array(
        [
            [c, -s, center_px - c * center_px + s * center_px],
            [s, c, center_px - s * center_px - c * center_px],
        ]
    )
    image = cv2.warpAffine(
        sample.image,
        m,
        (size, size),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_REPLICATE,
    )
    pts = (sample.landmarks.points - 0.5) @ q.T + 0.5
    angles = sample.gt_angles
    if angles is not None:
        angles = EulerAngles(angles.yaw, angles.pitch, wrap_angle(angles.roll + phi))
    return replace(
        sample,
        image=image,
        landmarks=LandmarkSet(pts, sample.landmarks.visibility),
        gt_angles=angles,
    )


def occlude_sample(sample: FaceSample, fraction: float, rng: np.random.Generator,
                   mean_color=None) -> FaceSample:
    """Paint a random rectangle of `fraction` of the crop area; labels,
    coordinates and visibility are untouched (pixels only). The occlusion
    attribute flag is set because the flag describes the image as seen."""
    size = sample.image.shape[0]
    aspect = rng.uniform(0.5, 2.0)
    w = math.sqrt(fraction * aspect)
    h = fraction / w
    x0 = rng.uniform(0.0, 1.0 - w)
    y0 = rng.uniform(0.0, 1.0 - h)
    color = (
        sample.image.reshape(-1, 3).mean(axis=0)
        if mean_color is None
        else np.asarray(mean_color, dtype=np.float32)
    )
    image = sample.image.copy()
    ix0, iy0 = int(round(x0 * size)), int(round(y0 * size))
    ix1, iy1 = int(round((x0 + w) * size)), int(round((y0 + h) * size))
    image[iy0:iy1, ix0:ix1] = color
    membership = sample.attributes.membership.copy()
    membership[ATTRIBUTE_CLASSES.index("occlusion")] = True
    return replace(sample, image=image, attributes=AttributeVector(membership))


def augment(sample: FaceSample, config: AugmentationConfig,
            skip_report: AugmentSkipReport | None = None) -> list[FaceSample]:
    """Original + flip + every listed rotation + one occluded copy.

    Rotations that push more than half of the visible landmarks out of the
    crop are skipped and recorded.
    """
    if not sample.cropped:
        raise DataError("augment expects a cropped sample")
    rng = np.random.default_rng(config.rng_seed)
    out = [sample]
    if config.enable_flip:
        out.append(flip_sample(sample))
    for deg in config.rotation_degrees:
        rotated = rotate_sample(sample, deg)
        pts = rotated.landmarks.points[rotated.landmarks.visibility]
        n_out = int(np.any((pts < 0.0) | (pts > 1.0), axis=1).sum())
        if len(pts) and n_out * 2 > len(pts):
            if skip_report is not None:
                skip_report.record(sample.image_path, deg)
            continue
        out.append(rotated)
    if config.occlusion_fraction > 0:
        out.append(
            occlude_sample(sample, config.occlusion_fraction, rng, config.mean_color)
        )
    return out


def augment_dataset(samples: list[FaceSample], config: AugmentationConfig):
    """Per-sample RNG streams derive from (seed, index), so worker order
    cannot change results."""
    report = AugmentSkipReport()
    out = []
    for i, sample in enumerate(samples):
        seed = np.random.SeedSequence([config.rng_seed, i]).generate_state(1)[0]
        out.extend(augment(sample, replace(config, rng_seed=int(seed)), report))
    return out, report


# ---------------------------------------------------------------------------
# attribute statistics and pose-derived attributes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AttributeStats:
    counts: np.ndarray
    total: int

    @property
    def fractions(self) -> np.ndarray:
        return self.counts / self.total

    def to_class_weights(self) -> ClassWeights:
        """Reciprocal fractions; classes absent from the split get weight 1."""
        frac = self.fractions
        omega = np.where(frac > 0, 1.0 / np.maximum(frac, 1e-300), 1.0)
        return ClassWeights(omega)


def compute_attribute_stats(samples: list[FaceSample]) -> AttributeStats:
    if not samples:
        raise ValueError("cannot compute attribute stats of an empty list")
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    for s in samples:
        counts += s.attributes.membership
    return AttributeStats(counts, len(samples))


@dataclass(frozen=True)
class PoseAttributeThresholds:
    profile_deg: float = 30.0
    pitch_deg: float = 20.0


def attributes_from_pose(angles: EulerAngles,
                         thresholds: PoseAttributeThresholds = PoseAttributeThresholds(),
                         expression: bool = False,
                         occlusion: bool = False) -> AttributeVector:
    yaw_deg = abs(math.degrees(angles.yaw))
    pitch_deg = math.degrees(angles.pitch)
    m = np.zeros(NUM_CLASSES, dtype=bool)
    m[ATTRIBUTE_CLASSES.index("profile_face")] = yaw_deg > thresholds.profile_deg
    m[ATTRIBUTE_CLASSES.index("frontal_face")] = yaw_deg <= thresholds.profile_deg
    m[ATTRIBUTE_CLASSES.index("head_up")] = pitch_deg > thresholds.pitch_deg
    m[ATTRIBUTE_CLASSES.index("head_down")] = pitch_deg < -thresholds.pitch_deg
    m[ATTRIBUTE_CLASSES.index("expression")] = expression
    m[ATTRIBUTE_CLASSES.index("occlusion")] = occlusion
    return AttributeVector(m)


# ---------------------------------------------------------------------------
# angle annotation (reference fit)
# ---------------------------------------------------------------------------

def annotate_angles(samples: list[FaceSample], reference: ReferenceFace):
    """Set gt_angles from the weak-perspective fit against the reference.

    Samples whose anchors are occluded get angles_unavailable=True and are
    excluded from angle-supervised loss terms downstream.
    """
    out = []
    unavailable = 0
    for s in samples:
        if s.scheme != reference.scheme:
            raise DataError(
                f"sample scheme {s.scheme!r} does not match reference "
                f"{reference.scheme!r}"
            )
        try:
            pose = estimate_rotation(s.landmarks, reference)
        except OccludedAnchorsError:
            out.append(replace(s, gt_angles=None, angles_unavailable=True))
            unavailable += 1
            continue
        out.append(
            replace(
                s,
                gt_angles=euler_from_rotation(pose.rotation),
                angles_unavailable=False,
            )
        )
    return out, unavailable
