"""Synthetic schematic-face dataset generator.

Renders filled ellipses/polygons (skin hull, brows, eyes, nose, mouth) on a
textured background, posed by projecting the bundled 3D reference face under
sampled rotations, scales and lighting gains. Landmark ground truth is the
exact weak-perspective projection, so pose annotation round-trips exactly;
attributes derive from the sampled pose, a sampled mouth-open amount and the
occluder coin flip. Bounding boxes are square so that cropping stays a
uniform scale.

Determinism: sample i draws from a stream seeded by (seed, i); reruns with
one seed produce byte-identical images and manifests.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np

from . import _templates
from .data import FaceSample, attributes_from_pose
from .geometry import EulerAngles, Point2, PoseEstimate, rotation_from_euler
from .landmarks import LandmarkSet
from .geometry import bundled_reference
from .schemes import get_scheme

_SHIFT = 4
_FX = 1 << _SHIFT


@dataclass(frozen=True)
class PoseDistribution:
    frontal_yaw_deg: tuple = (-25.0, 25.0)
    profile_yaw_deg: tuple = (32.0, 60.0)  # magnitude; sign drawn separately
    pitch_deg: tuple = (-28.0, 28.0)
    roll_deg: tuple = (-18.0, 18.0)
    scale: tuple = (0.26, 0.36)
    center_jitter: float = 0.04


@dataclass(frozen=True)
class ImbalanceProfile:
    """Skews the pose sampler to exercise the class-weighting machinery."""

    profile_fraction: float = 0.5
    expression_prob: float = 0.3
    occlusion_prob: float = 0.2


def _fx(points_px: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(points_px) * _FX).astype(np.int32)


def _fill(img, points_px, color):
    cv2.fillPoly(img, [_fx(points_px)], color, lineType=cv2.LINE_8, shift=_SHIFT)


def _polyline(img, points_px, color, thickness):
    cv2.polylines(
        img, [_fx(points_px)], False, color, thickness, lineType=cv2.LINE_8,
        shift=_SHIFT,
    )


def _circle(img, center_px, radius_px, color):
    cv2.circle(
        img, tuple(_fx(center_px)), max(1, int(round(radius_px * _FX))), color, -1,
        lineType=cv2.LINE_8, shift=_SHIFT,
    )


def _hull(points_px: np.ndarray, expand: float) -> np.ndarray:
    hull = cv2.convexHull(points_px.astype(np.float32)).reshape(-1, 2)
    center = hull.mean(axis=0)
    return center + (hull - center) * (1.0 + expand)


def _shade(color, gain):
    return tuple(float(c) * gain for c in color)


def _draw_face_68(img, pts, gain, mouth_open):
    g = get_scheme("68pt").feature_groups
    size = img.shape[0]
    _fill(img, _hull(pts, 0.22), _shade((0.78, 0.62, 0.52), gain))
    _polyline(img, pts[list(g["jaw"])], _shade((0.60, 0.45, 0.38), gain),
              max(1, round(0.012 * size)))
    for key in ("brow_left", "brow_right"):
        _polyline(img, pts[list(g[key])], _shade((0.25, 0.16, 0.10), gain),
                  max(1, round(0.03 * size)))
    for key in ("eye_left", "eye_right"):
        eye = pts[list(g[key])]
        _fill(img, eye, _shade((0.95, 0.95, 0.93), gain))
        width = np.linalg.norm(eye[3] - eye[0])
        _circle(img, eye.mean(axis=0), 0.22 * width, _shade((0.10, 0.08, 0.07), gain))
    _polyline(img, pts[list(g["nose_bridge"])], _shade((0.62, 0.47, 0.40), gain),
              max(1, round(0.02 * size)))
    _fill(img, pts[list(g["nose_base"])], _shade((0.58, 0.44, 0.37), gain))
    _fill(img, pts[list(g["mouth_outer"])], _shade((0.62, 0.25, 0.22), gain))
    if mouth_open > 0:
        _fill(img, pts[list(g["mouth_inner"])], _shade((0.18, 0.07, 0.07), gain))


def _draw_face_21(img, pts, gain, mouth_open):
    g = get_scheme("21pt").feature_groups
    size = img.shape[0]
    _fill(img, _hull(pts, 0.30), _shade((0.78, 0.62, 0.52), gain))
    for key in ("brow_left", "brow_right"):
        _polyline(img, pts[list(g[key])], _shade((0.25, 0.16, 0.10), gain),
                  max(1, round(0.03 * size)))
    for key in ("eye_left", "eye_right"):
        eye = pts[list(g[key])]
        width = np.linalg.norm(eye[2] - eye[0])
        _fill(img, _hull(eye, 0.4), _shade((0.95, 0.95, 0.93), gain))
        _circle(img, eye[1], 0.2 * width, _shade((0.10, 0.08, 0.07), gain))
    _fill(img, pts[list(g["nose"])], _shade((0.58, 0.44, 0.37), gain))
    mouth = pts[list(g["mouth"])]
    _fill(img, _hull(mouth, 0.45 + 0.5 * mouth_open), _shade((0.62, 0.25, 0.22), gain))
    for ear in g["ears"]:
        _circle(img, pts[ear], 0.035 * size, _shade((0.70, 0.54, 0.45), gain))


_DRAWERS = {"68pt": _draw_face_68, "21pt": _draw_face_21}
_DEFORMERS = {
    "68pt": _templates.deform_expression_68,
    "21pt": _templates.deform_expression_21,
}


def render_sample(
    scheme_name: str,
    angles: EulerAngles,
    scale: float,
    center,
    rng: np.random.Generator,
    image_size: int = 112,
    mouth_open: float = 0.0,
    occlude: bool = False,
    lighting_gain: float = 1.0,
) -> FaceSample:
    """Render one posed schematic face with exact landmark projections."""
    reference = bundled_reference(scheme_name)
    shape3d = _DEFORMERS[scheme_name](reference.points, mouth_open)
    pose = PoseEstimate(rotation_from_euler(angles), scale, Point2(*center))
    unit = scale * (shape3d @ pose.rotation.r.T)[:, :2] + np.asarray(center)

    base = rng.uniform(0.15, 0.85, 3).astype(np.float32)
    noise = rng.normal(0.0, 0.07, (image_size, image_size, 3)).astype(np.float32)
    img = np.clip(base + noise, 0.0, 1.0)

    pts_draw = unit * image_size - 0.5  # pixel-center coordinates for cv2
    _DRAWERS[scheme_name](img, pts_draw, lighting_gain, mouth_open)
    if occlude:
        aspect = rng.uniform(0.5, 2.0)
        frac = 0.2
        w = math.sqrt(frac * aspect)
        h = frac / w
        x0 = rng.uniform(0.0, 1.0 - w)
        y0 = rng.uniform(0.0, 1.0 - h)
        color = img.reshape(-1, 3).mean(axis=0)
        s = image_size
        img[int(round(y0 * s)):int(round((y0 + h) * s)),
            int(round(x0 * s)):int(round((x0 + w) * s))] = color
    img = np.clip(img, 0.0, 1.0)

    pts_px = unit * image_size  # pixel-corner convention for manifests/crops
    lo = pts_px.min(axis=0)
    hi = pts_px.max(axis=0)
    span = hi - lo
    pad = 0.12 * span.max()
    side = span.max() + 2 * pad
    center_box = (lo + hi) / 2.0
    bx = center_box[0] - side / 2.0
    by = center_box[1] - side / 2.0
    # keep the square box inside the canvas
    bx = min(max(bx, 0.0), image_size - side)
    by = min(max(by, 0.0), image_size - side)
    side = min(side, image_size)

    attrs = attributes_from_pose(
        angles, expression=mouth_open > 0, occlusion=occlude
    )
    return FaceSample(
        image=img,
        bbox=(bx, by, side, side),
        landmarks=LandmarkSet(pts_px),
        scheme=scheme_name,
        attributes=attrs,
        gt_angles=angles,
    )


def synth_generate(
    count: int,
    pose_distribution: PoseDistribution = PoseDistribution(),
    imbalance_profile: ImbalanceProfile = ImbalanceProfile(),
    seed: int = 0,
    scheme: str = "68pt",
    image_size: int = 112,
) -> list[FaceSample]:
    if count < 1:
        raise ValueError("count must be at least 1")
    if scheme not in _DRAWERS:
        raise ValueError(f"synthesis supports schemes {sorted(_DRAWERS)}")
    pd, ip = pose_distribution, imbalance_profile
    samples = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        if rng.random() < ip.profile_fraction:
            mag = rng.uniform(*pd.profile_yaw_deg)
            yaw = math.radians(mag if rng.random() < 0.5 else -mag)
        else:
            yaw = math.radians(rng.uniform(*pd.frontal_yaw_deg))
        pitch = math.radians(rng.uniform(*pd.pitch_deg))
        roll = math.radians(rng.uniform(*pd.roll_deg))
        scale = rng.uniform(*pd.scale)
        jitter = pd.center_jitter
        center = 0.5 + rng.uniform(-jitter, jitter, 2)
        mouth_open = (
            rng.uniform(0.55, 1.0) if rng.random() < ip.expression_prob else 0.0
        )
        occlude = rng.random() < ip.occlusion_prob
        gain = rng.uniform(0.65, 1.1)
        samples.append(
            render_sample(
                scheme,
                EulerAngles(yaw, pitch, roll),
                scale,
                center,
                rng,
                image_size=image_size,
                mouth_open=mouth_open,
                occlude=occlude,
                lighting_gain=gain,
            )
        )
    return samples
