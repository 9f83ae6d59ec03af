"""Weighted landmark-regression losses and their analytic gradients.

Five variants: plain `l2` and `l1` baselines, the pose-and-imbalance
weighted `pfld` loss, and its two ablations `pfld_no_omega` (class sum
replaced by 1) and `pfld_no_theta` (angle factor replaced by 1).

Per sample, the weighted variants scale the summed landmark error by

    gamma = (sum of class weights over active attribute classes)
            * (angle_floor + sum_k (1 - cos(angle deviation k)))

Deviations d are housed as gt - pred throughout; gradients are with respect
to the predictions. Invisible landmarks are skipped in sums and gradients,
and the landmark sum is deliberately not renormalized by the visible count
(the evaluation NME is; the two differ by design).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .landmarks import LandmarkSet
from .geometry import EulerAngles

ATTRIBUTE_CLASSES = (
    "profile_face",
    "frontal_face",
    "head_up",
    "head_down",
    "expression",
    "occlusion",
)
NUM_CLASSES = len(ATTRIBUTE_CLASSES)

VARIANTS = ("l2", "l1", "pfld", "pfld_no_omega", "pfld_no_theta")


@dataclass(frozen=True)
class AttributeVector:
    """Multi-label membership over the six attribute classes."""

    membership: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.membership, dtype=bool)
        if m.shape != (NUM_CLASSES,):
            raise ValueError(f"membership must have {NUM_CLASSES} flags, got {m.shape}")
        m.setflags(write=False)
        object.__setattr__(self, "membership", m)

    @classmethod
    def from_names(cls, *names: str) -> "AttributeVector":
        m = np.zeros(NUM_CLASSES, dtype=bool)
        for name in names:
            m[ATTRIBUTE_CLASSES.index(name)] = True
        return cls(m)

    @classmethod
    def none(cls) -> "AttributeVector":
        return cls(np.zeros(NUM_CLASSES, dtype=bool))

    def active_names(self) -> tuple[str, ...]:
        return tuple(n for n, f in zip(ATTRIBUTE_CLASSES, self.membership) if f)

    def __getitem__(self, name: str) -> bool:
        return bool(self.membership[ATTRIBUTE_CLASSES.index(name)])


@dataclass(frozen=True)
class ClassWeights:
    omega: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.omega, dtype=np.float64)
        if w.shape != (NUM_CLASSES,):
            raise ValueError(f"omega must have {NUM_CLASSES} entries, got {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("every class weight must be positive and finite")
        w.setflags(write=False)
        object.__setattr__(self, "omega", w)

    @classmethod
    def ones(cls) -> "ClassWeights":
        return cls(np.ones(NUM_CLASSES))


def class_weights_from_fractions(fractions) -> ClassWeights:
    """Reciprocal-fraction weighting; every fraction must lie in (0, 1]."""
    f = np.asarray(fractions, dtype=np.float64)
    if f.shape != (NUM_CLASSES,):
        raise ValueError(f"need {NUM_CLASSES} fractions, got {f.shape}")
    if np.any(f <= 0) or np.any(f > 1) or not np.all(np.isfinite(f)):
        raise ValueError("class fractions must lie in (0, 1]")
    return ClassWeights(1.0 / f)


@dataclass(frozen=True)
class LossConfig:
    variant: str = "pfld"
    angle_floor: float = 0.0
    class_weights: ClassWeights = field(default_factory=ClassWeights.ones)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not (self.angle_floor >= 0 and np.isfinite(self.angle_floor)):
            raise ValueError("angle_floor must be nonnegative and finite")


@dataclass
class LossBatch:
    """Batch arrays: M samples, N landmarks each.

    pred/gt landmarks are (M, N, 2); angles are (M, 3) yaw/pitch/roll in
    radians; visibility is (M, N) bool; attributes is (M, C) bool;
    angle_valid marks samples whose ground-truth angles are usable (samples
    without them get a neutral angle factor of 1 and no angle gradient).
    """

    pred_landmarks: np.ndarray
    gt_landmarks: np.ndarray
    pred_angles: np.ndarray
    gt_angles: np.ndarray
    attributes: np.ndarray
    visibility: np.ndarray = None  # type: ignore[assignment]
    angle_valid: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        self.pred_landmarks = np.asarray(self.pred_landmarks, dtype=np.float64)
        self.gt_landmarks = np.asarray(self.gt_landmarks, dtype=np.float64)
        self.pred_angles = np.asarray(self.pred_angles, dtype=np.float64)
        self.gt_angles = np.asarray(self.gt_angles, dtype=np.float64)
        self.attributes = np.asarray(self.attributes, dtype=bool)
        m = len(self.pred_landmarks)
        if m == 0:
            raise ValueError("batch size 0")
        if self.pred_landmarks.ndim != 3 or self.pred_landmarks.shape[2] != 2:
            raise ValueError("pred_landmarks must be (M, N, 2)")
        if self.gt_landmarks.shape != self.pred_landmarks.shape:
            raise ValueError(
                "landmark count mismatch: "
                f"{self.gt_landmarks.shape} vs {self.pred_landmarks.shape}"
            )
        if self.pred_angles.shape != (m, 3) or self.gt_angles.shape != (m, 3):
            raise ValueError("angles must be (M, 3)")
        if self.attributes.shape != (m, NUM_CLASSES):
            raise ValueError(f"attributes must be (M, {NUM_CLASSES})")
        if self.visibility is None:
            self.visibility = np.ones(self.pred_landmarks.shape[:2], dtype=bool)
        else:
            self.visibility = np.asarray(self.visibility, dtype=bool)
            if self.visibility.shape != self.pred_landmarks.shape[:2]:
                raise ValueError("visibility must be (M, N)")
        if self.angle_valid is None:
            self.angle_valid = np.ones(m, dtype=bool)
        else:
            self.angle_valid = np.asarray(self.angle_valid, dtype=bool)
            if self.angle_valid.shape != (m,):
                raise ValueError("angle_valid must be (M,)")

    @classmethod
    def from_sets(
        cls,
        pred_landmarks: list[LandmarkSet],
        gt_landmarks: list[LandmarkSet],
        pred_angles: list[EulerAngles],
        gt_angles: list[EulerAngles | None],
        attributes: list[AttributeVector],
    ) -> "LossBatch":
        if not (
            len(pred_landmarks)
            == len(gt_landmarks)
            == len(pred_angles)
            == len(gt_angles)
            == len(attributes)
        ):
            raise ValueError("all batch lists must have the same length")
        angle_valid = np.array([a is not None for a in gt_angles])
        gt_arr = np.array(
            [a.as_array() if a is not None else np.zeros(3) for a in gt_angles]
        )
        return cls(
            pred_landmarks=np.stack([s.points for s in pred_landmarks]),
            gt_landmarks=np.stack([s.points for s in gt_landmarks]),
            pred_angles=np.stack([a.as_array() for a in pred_angles]),
            gt_angles=gt_arr,
            attributes=np.stack([a.membership for a in attributes]),
            visibility=np.stack([s.visibility for s in gt_landmarks]),
            angle_valid=angle_valid,
        )

    @property
    def size(self) -> int:
        return len(self.pred_landmarks)


def sample_multiplier(
    attrs: AttributeVector,
    weights: ClassWeights,
    theta_dev,
    config: LossConfig,
) -> float:
    """Per-sample weight gamma of the general loss form."""
    if config.variant in ("l2", "l1"):
        return 1.0
    if config.variant == "pfld_no_omega":
        omega_sum = 1.0
    else:
        active = attrs.membership
        omega_sum = float(weights.omega[active].sum()) if active.any() else 1.0
    if config.variant == "pfld_no_theta":
        angle_factor = 1.0
    else:
        theta = np.asarray(theta_dev, dtype=np.float64)
        angle_factor = config.angle_floor + float(np.sum(1.0 - np.cos(theta)))
    return omega_sum * angle_factor


def _per_sample_terms(batch: LossBatch, config: LossConfig):
    """Returns (d, per-sample landmark error sum S, gamma, omega_sum, angle delta)."""
    d = batch.gt_landmarks - batch.pred_landmarks          # (M, N, 2)
    vis = batch.visibility
    if config.variant == "l1":
        per_lm = np.abs(d).sum(axis=2)
    else:
        per_lm = (d ** 2).sum(axis=2)
    s = (per_lm * vis).sum(axis=1)                         # (M,)

    m = batch.size
    if config.variant in ("l2", "l1"):
        return d, s, np.ones(m), np.ones(m), None

    if config.variant == "pfld_no_omega":
        omega_sum = np.ones(m)
    else:
        omega_sum = batch.attributes @ config.class_weights.omega
        omega_sum[~batch.attributes.any(axis=1)] = 1.0

    if config.variant == "pfld_no_theta":
        angle_factor = np.ones(m)
        delta = None
    else:
        delta = batch.gt_angles - batch.pred_angles        # cos is wrap-invariant
        angle_factor = config.angle_floor + (1.0 - np.cos(delta)).sum(axis=1)
        angle_factor = np.where(batch.angle_valid, angle_factor, 1.0)

    gamma = omega_sum * angle_factor
    return d, s, gamma, omega_sum, delta


def loss_value(batch: LossBatch, config: LossConfig) -> float:
    _, s, gamma, _, _ = _per_sample_terms(batch, config)
    return float(np.mean(gamma * s))


def loss_gradients(batch: LossBatch, config: LossConfig):
    """Exact gradients of loss_value w.r.t. (pred_landmarks, pred_angles)."""
    d, s, gamma, omega_sum, delta = _per_sample_terms(batch, config)
    m = batch.size
    vis = batch.visibility[:, :, None]

    if config.variant == "l1":
        d_pred = -np.sign(d) * vis * gamma[:, None, None] / m
    else:
        d_pred = -2.0 * d * vis * gamma[:, None, None] / m

    d_angles = np.zeros((m, 3))
    if config.variant in ("pfld", "pfld_no_omega"):
        # gamma = omega_sum * (floor + sum_k (1 - cos(gt_k - pred_k)))
        # dL/dpred_k = omega_sum * S * (-sin(gt_k - pred_k)) / M
        coef = (omega_sum * s * batch.angle_valid) / m
        d_angles = -np.sin(delta) * coef[:, None]
    return d_pred, d_angles


def loss_and_gradients(batch: LossBatch, config: LossConfig):
    """Value and gradients in one pass (training fast path)."""
    d, s, gamma, omega_sum, delta = _per_sample_terms(batch, config)
    m = batch.size
    value = float(np.mean(gamma * s))
    vis = batch.visibility[:, :, None]
    if config.variant == "l1":
        d_pred = -np.sign(d) * vis * gamma[:, None, None] / m
    else:
        d_pred = -2.0 * d * vis * gamma[:, None, None] / m
    d_angles = np.zeros((m, 3))
    if config.variant in ("pfld", "pfld_no_omega"):
        coef = (omega_sum * s * batch.angle_valid) / m
        d_angles = -np.sin(delta) * coef[:, None]
    return value, d_pred, d_angles
