"""Reference faces, weak-perspective pose fitting, Euler-angle conversions.

Conventions (fixed across the package):
  * axes: x right, y down (image style), z into the screen; features nearer
    the camera have negative z in the canonical face frame.
  * rotations: intrinsic R = Rz(roll) @ Ry(yaw) @ Rx(pitch), angles in
    radians, each wrapped into (-pi, pi].
  * weak perspective: image = scale * (R @ p)[:2] + translation.

All operations are pure; returned objects are immutable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import (
    DataError,
    DegenerateAnchorsError,
    OccludedAnchorsError,
    ShapeMismatchError,
)
from .landmarks import LandmarkSet
from .schemes import Scheme, data_file_text, get_scheme

CONDITION_LIMIT = 1e8
ROTATION_TOL = 1e-9
GIMBAL_TOL = 1e-7


def wrap_angle(a: float) -> float:
    """Wrap into (-pi, pi]."""
    return math.pi - (math.pi - a) % (2.0 * math.pi)


@dataclass(frozen=True)
class Point2:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("Point2 coordinates must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Point3:
    u: float
    v: float
    z: float

    def __post_init__(self):
        if not all(math.isfinite(c) for c in (self.u, self.v, self.z)):
            raise ValueError("Point3 coordinates must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.v, self.z])


@dataclass(frozen=True)
class EulerAngles:
    """Yaw/pitch/roll in radians, each wrapped into (-pi, pi]."""

    yaw: float
    pitch: float
    roll: float

    def __post_init__(self):
        for name in ("yaw", "pitch", "roll"):
            val = float(getattr(self, name))
            if not math.isfinite(val):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, wrap_angle(val))

    def as_array(self) -> np.ndarray:
        return np.array([self.yaw, self.pitch, self.roll])

    def degrees(self) -> tuple[float, float, float]:
        return (
            math.degrees(self.yaw),
            math.degrees(self.pitch),
            math.degrees(self.roll),
        )


@dataclass(frozen=True)
class RotationMatrix:
    r: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r, dtype=np.float64)
        if r.shape != (3, 3):
            raise ShapeMismatchError(f"rotation must be 3x3, got {r.shape}")
        if np.max(np.abs(r.T @ r - np.eye(3))) > ROTATION_TOL:
            raise ValueError("matrix is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > ROTATION_TOL:
            raise ValueError("matrix determinant is not +1 within 1e-9")
        r.setflags(write=False)
        object.__setattr__(self, "r", r)


@dataclass(frozen=True)
class ProjectionMatrix:
    """The 2x4 map taking homogeneous canonical points to image points."""

    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if p.shape != (2, 4):
            raise ShapeMismatchError(f"projection must be 2x4, got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError("projection entries must be finite")
        p.setflags(write=False)
        object.__setattr__(self, "p", p)


@dataclass(frozen=True)
class PoseEstimate:
    rotation: RotationMatrix
    scale: float
    translation: Point2
    residual: float = 0.0

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError("scale must be a positive finite number")
        if not (self.residual >= 0 and math.isfinite(self.residual)):
            raise ValueError("residual must be nonnegative and finite")

    def projection(self) -> ProjectionMatrix:
        top = self.scale * self.rotation.r[:2, :]
        t = self.translation.as_array().reshape(2, 1)
        return ProjectionMatrix(np.hstack([top, t]))


IDENTITY_POSE = None  # set after PoseEstimate is defined; see bottom of module


@dataclass(frozen=True)
class ReferenceFace:
    """Canonical 3D face landmarks plus the anchor subset used for pose fits."""

    points: np.ndarray
    anchor_indices: tuple[int, ...]
    scheme: str

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ShapeMismatchError(f"reference points must be (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("reference points must be finite")
        anchors = tuple(int(i) for i in self.anchor_indices)
        if len(set(anchors)) != len(anchors):
            raise ValueError("anchor indices must be distinct")
        if any(i < 0 or i >= len(pts) for i in anchors):
            raise ValueError("anchor index out of range")
        centroid = pts.mean(axis=0)
        if np.max(np.abs(centroid)) > 1e-9:
            raise ValueError("reference centroid must be at the origin")
        uv = pts[list(anchors), :2]
        sv = np.linalg.svd(uv - uv.mean(axis=0), compute_uv=False)
        if sv[0] <= 0 or sv[0] / max(sv[1], np.finfo(float).tiny) > CONDITION_LIMIT:
            raise DegenerateAnchorsError("anchors are collinear in the u-v plane")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "anchor_indices", anchors)

    @property
    def n_landmarks(self) -> int:
        return len(self.points)

    def anchor_points(self) -> np.ndarray:
        return self.points[list(self.anchor_indices)]

    def point(self, i: int) -> Point3:
        return Point3(*self.points[i])


def make_reference_face(points3d, anchor_indices, scheme: str) -> ReferenceFace:
    """Center at the 3D centroid and scale so the max anchor u-v radius is 1."""
    pts = np.asarray(points3d, dtype=np.float64).copy()
    pts -= pts.mean(axis=0)
    radii = np.linalg.norm(pts[list(anchor_indices), :2], axis=1)
    rmax = radii.max()
    if rmax <= 0:
        raise DegenerateAnchorsError("anchors have zero radius")
    pts /= rmax
    return ReferenceFace(pts, tuple(anchor_indices), scheme)


def build_reference_face(frontal_samples: list[LandmarkSet], scheme: Scheme) -> ReferenceFace:
    """Average frontal 2D faces and attach the scheme's bundled depth profile."""
    if len(frontal_samples) == 0:
        raise ValueError("need at least one frontal sample")
    n = scheme.n_landmarks
    for s in frontal_samples:
        if len(s) != n:
            raise ValueError(
                f"sample has {len(s)} landmarks, scheme {scheme.name} expects {n}"
            )
        if not np.all(s.visibility):
            raise OccludedAnchorsError("all landmarks must be visible in frontal samples")
    mean2d = np.mean([s.points for s in frontal_samples], axis=0)
    mean2d -= mean2d.mean(axis=0)
    radii = np.linalg.norm(mean2d[list(scheme.anchor_indices)], axis=1)
    if radii.max() <= 0:
        raise DegenerateAnchorsError("mean face has zero anchor radius")
    mean2d /= radii.max()
    depth = bundled_reference(scheme.name).points[:, 2]
    pts = np.column_stack([mean2d, depth])
    return make_reference_face(pts, scheme.anchor_indices, scheme.name)


# ---------------------------------------------------------------------------
# reference-face file format (External Interface)
#
#   refface v1 <scheme> <N> <A>
#   <index> <u> <v> <z>          (N lines)
#   <a0> <a1> ... <a(A-1)>       (one line)
# ---------------------------------------------------------------------------

def format_reference_face(ref: ReferenceFace) -> str:
    lines = [f"refface v1 {ref.scheme} {ref.n_landmarks} {len(ref.anchor_indices)}"]
    for i, (u, v, z) in enumerate(ref.points):
        lines.append(f"{i} {float(u)!r} {float(v)!r} {float(z)!r}")
    lines.append(" ".join(str(i) for i in ref.anchor_indices))
    return "\n".join(lines) + "\n"


def save_reference_face(ref: ReferenceFace, path) -> None:
    with open(path, "w") as fh:
        fh.write(format_reference_face(ref))


def parse_reference_face(text: str, source: str = "<string>") -> ReferenceFace:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"empty reference-face document ({source})")
    head = lines[0].split()
    if len(head) != 5 or head[0] != "refface":
        raise DataError(f"bad reference-face header ({source})")
    if head[1] != "v1":
        raise DataError(f"unsupported reference-face version {head[1]!r} ({source})")
    scheme_name = head[2]
    try:
        n, a = int(head[3]), int(head[4])
    except ValueError:
        raise DataError(f"bad counts in reference-face header ({source})") from None
    if len(lines) != n + 2:
        raise DataError(
            f"reference-face document must have {n + 2} lines, got {len(lines)} ({source})"
        )
    pts = np.zeros((n, 3))
    for i in range(n):
        toks = lines[1 + i].split()
        if len(toks) != 4 or int(toks[0]) != i:
            raise DataError(f"bad reference-face point line {i} ({source})")
        pts[i] = [float(t) for t in toks[1:]]
    anchors = tuple(int(t) for t in lines[n + 1].split())
    if len(anchors) != a:
        raise DataError(f"expected {a} anchor indices ({source})")
    return ReferenceFace(pts, anchors, scheme_name)


def load_reference_face(path) -> ReferenceFace:
    with open(path) as fh:
        return parse_reference_face(fh.read(), source=str(path))


@lru_cache(maxsize=None)
def bundled_reference(scheme_name: str) -> ReferenceFace:
    scheme = get_scheme(scheme_name)
    if scheme.reference_resource is None:
        raise DataError(f"scheme {scheme_name!r} has no bundled reference face")
    ref = parse_reference_face(
        data_file_text(scheme.reference_resource), source=scheme.reference_resource
    )
    if ref.n_landmarks != scheme.n_landmarks:
        raise DataError(f"bundled reference for {scheme_name!r} has wrong landmark count")
    return ref


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------

def rotation_from_euler(angles: EulerAngles) -> RotationMatrix:
    cy, sy = math.cos(angles.yaw), math.sin(angles.yaw)
    cp, sp = math.cos(angles.pitch), math.sin(angles.pitch)
    cr, sr = math.cos(angles.roll), math.sin(angles.roll)
    rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    return RotationMatrix(rz @ ry @ rx)


def euler_from_rotation(rotation: RotationMatrix) -> EulerAngles:
    r = rotation.r
    cy = math.hypot(r[0, 0], r[1, 0])
    yaw = math.atan2(-r[2, 0], cy)
    if cy < GIMBAL_TOL:
        # |yaw| = pi/2: roll and pitch are coupled; fix roll = 0
        if r[2, 0] < 0:  # yaw = +pi/2
            pitch = math.atan2(r[0, 1], r[0, 2])
        else:            # yaw = -pi/2
            pitch = math.atan2(-r[0, 1], -r[0, 2])
        return EulerAngles(yaw, pitch, 0.0)
    roll = math.atan2(r[1, 0], r[0, 0])
    pitch = math.atan2(r[2, 1], r[2, 2])
    return EulerAngles(yaw, pitch, roll)


def angle_deviation(gt: EulerAngles, pred: EulerAngles) -> np.ndarray:
    """Per-axis absolute angular deviation, wrapped into [0, pi]."""
    diff = gt.as_array() - pred.as_array()
    return np.abs([wrap_angle(d) for d in diff])


# ---------------------------------------------------------------------------
# weak-perspective projection and pose fitting
# ---------------------------------------------------------------------------

def project_weak_perspective(reference: ReferenceFace, pose: PoseEstimate) -> LandmarkSet:
    rotated = reference.points @ pose.rotation.r.T
    xy = pose.scale * rotated[:, :2] + pose.translation.as_array()
    return LandmarkSet(xy)


def estimate_rotation(landmarks: LandmarkSet, reference: ReferenceFace) -> PoseEstimate:
    """Least-squares weak-perspective fit over the anchor correspondences.

    Solves the centered linear system for the 2x3 map, projects it onto the
    nearest scaled pair of orthonormal rows via SVD, completes the rotation
    with a cross product (det +1 by construction), and re-fits translation.
    """
    anchors = list(reference.anchor_indices)
    if len(landmarks) != reference.n_landmarks:
        raise ShapeMismatchError(
            f"landmark count {len(landmarks)} does not match reference "
            f"{reference.n_landmarks}"
        )
    if not np.all(landmarks.visibility[anchors]):
        raise OccludedAnchorsError("anchor landmarks must all be visible")

    x = landmarks.points[anchors]         # (A, 2)
    p = reference.points[anchors]         # (A, 3)
    xc = x - x.mean(axis=0)
    pc = p - p.mean(axis=0)

    tiny = np.finfo(float).tiny
    sx = np.linalg.svd(xc, compute_uv=False)
    if sx[0] <= 0 or sx[0] / max(sx[-1], tiny) > CONDITION_LIMIT:
        raise DegenerateAnchorsError("degenerate anchors: input landmarks are collinear")
    normal = pc.T @ pc
    sn = np.linalg.svd(normal, compute_uv=False)
    if sn[0] <= 0 or sn[0] / max(sn[-1], tiny) > CONDITION_LIMIT:
        raise DegenerateAnchorsError(
            "degenerate anchors: reference normal equations are singular"
        )

    a = (xc.T @ pc) @ np.linalg.inv(normal)     # (2, 3) linear map
    u, sv, vt = np.linalg.svd(a, full_matrices=False)
    if sv[0] <= 0 or sv[0] / max(sv[-1], tiny) > CONDITION_LIMIT:
        raise DegenerateAnchorsError("degenerate anchors: fitted map is rank deficient")
    scale = float(sv.mean())
    rows = u @ vt                               # nearest orthonormal row pair
    r3 = np.cross(rows[0], rows[1])
    rot = RotationMatrix(np.vstack([rows, r3]))

    translation = x.mean(axis=0) - scale * rows @ p.mean(axis=0)
    fitted = scale * p @ rows.T + translation
    residual = float(np.sqrt(np.mean(np.sum((fitted - x) ** 2, axis=1))))
    return PoseEstimate(rot, scale, Point2(*translation), residual)


IDENTITY_POSE = PoseEstimate(
    RotationMatrix(np.eye(3)), 1.0, Point2(0.0, 0.0), 0.0
)
