"""Parametric average-face templates for the bundled landmark schemes.

Axes: u to the viewer's right, v downward (image convention), z into the
screen, so features nearer the camera carry negative z. Units are arbitrary
"face units"; geometry.make_reference_face normalizes them (3D centroid at
the origin, max anchor u-v radius 1) before they are shipped as reference
files.

These templates exist so the package is self-contained: they stand in for
the mean of a set of annotated frontal faces.
"""
from __future__ import annotations

import numpy as np


def _mirror_u(points: np.ndarray) -> np.ndarray:
    out = points.copy()
    out[:, 0] = -out[:, 0]
    return out


def symmetrize(points: np.ndarray, flip_perm: np.ndarray) -> np.ndarray:
    """Make a template exactly bilaterally symmetric under its flip table."""
    return 0.5 * (points + _mirror_u(points[flip_perm]))


def flip_perm_68() -> np.ndarray:
    perm = np.arange(68)
    pairs = []
    pairs += [(i, 16 - i) for i in range(8)]                # jaw
    pairs += [(17 + i, 26 - i) for i in range(5)]           # brows
    pairs += [(31, 35), (32, 34)]                           # nostrils
    pairs += [(36, 45), (37, 44), (38, 43), (39, 42), (40, 47), (41, 46)]
    pairs += [(48, 54), (49, 53), (50, 52), (55, 59), (56, 58)]
    pairs += [(60, 64), (61, 63), (65, 67)]
    for a, b in pairs:
        perm[a], perm[b] = b, a
    return perm


def flip_perm_21() -> np.ndarray:
    return np.array(
        [5, 4, 3, 2, 1, 0, 11, 10, 9, 8, 7, 6, 16, 15, 14, 13, 12, 19, 18, 17, 20],
        dtype=np.intp,
    )


def template_68() -> np.ndarray:
    pts = np.zeros((68, 3))

    # jaw arc, ears high and deep, chin low and slightly forward
    psi = np.pi * (1.0 - np.arange(17) / 16.0)
    pts[0:17, 0] = 0.72 * np.cos(psi)
    pts[0:17, 1] = -0.10 + 1.05 * np.sin(psi)
    pts[0:17, 2] = 0.50 * np.abs(np.cos(psi)) ** 1.2 - 0.05 * np.sin(psi)

    # left brow (viewer-left, indices 17-21), arched, receding toward the temple
    bu = np.linspace(-0.58, -0.13, 5)
    bt = np.linspace(0.0, 1.0, 5)
    pts[17:22, 0] = bu
    pts[17:22, 1] = -0.42 - 0.10 * np.sin(np.pi * bt)
    pts[17:22, 2] = np.linspace(-0.06, -0.30, 5)
    # right brow is the mirror (22-26)
    pts[22:27] = _mirror_u(pts[17:22][::-1])

    # nose bridge (27-30) and base (31-35); tip is the most forward point
    pts[27] = (0.0, -0.32, -0.40)
    pts[28] = (0.0, -0.21, -0.43)
    pts[29] = (0.0, -0.10, -0.46)
    pts[30] = (0.0, 0.02, -0.50)
    pts[31] = (-0.14, 0.12, -0.30)
    pts[32] = (-0.07, 0.135, -0.35)
    pts[33] = (0.0, 0.15, -0.38)
    pts[34] = (0.07, 0.135, -0.35)
    pts[35] = (0.14, 0.12, -0.30)

    # viewer-left eye (36-41): outer corner, two upper-lid, inner corner, two lower-lid
    pts[36] = (-0.45, -0.30, -0.06)
    pts[37] = (-0.375, -0.335, -0.13)
    pts[38] = (-0.29, -0.335, -0.14)
    pts[39] = (-0.22, -0.30, -0.24)
    pts[40] = (-0.29, -0.265, -0.13)
    pts[41] = (-0.375, -0.265, -0.12)
    # viewer-right eye (42-47): inner corner first per the 68-point ordering
    pts[42] = _mirror_u(pts[39:40])[0]
    pts[43] = _mirror_u(pts[38:39])[0]
    pts[44] = _mirror_u(pts[37:38])[0]
    pts[45] = _mirror_u(pts[36:37])[0]
    pts[46] = _mirror_u(pts[41:42])[0]
    pts[47] = _mirror_u(pts[40:41])[0]

    # outer lips (48-59), corners first
    pts[48] = (-0.26, 0.40, -0.32)
    pts[49] = (-0.17, 0.355, -0.34)
    pts[50] = (-0.07, 0.33, -0.355)
    pts[51] = (0.0, 0.335, -0.36)
    pts[52] = (0.07, 0.33, -0.355)
    pts[53] = (0.17, 0.355, -0.34)
    pts[54] = (0.26, 0.40, -0.32)
    pts[55] = (0.17, 0.45, -0.34)
    pts[56] = (0.07, 0.475, -0.345)
    pts[57] = (0.0, 0.48, -0.35)
    pts[58] = (-0.07, 0.475, -0.345)
    pts[59] = (-0.17, 0.45, -0.34)
    # inner lips (60-67)
    pts[60] = (-0.19, 0.40, -0.32)
    pts[61] = (-0.065, 0.378, -0.33)
    pts[62] = (0.0, 0.382, -0.335)
    pts[63] = (0.065, 0.378, -0.33)
    pts[64] = (0.19, 0.40, -0.32)
    pts[65] = (0.065, 0.418, -0.33)
    pts[66] = (0.0, 0.422, -0.335)
    pts[67] = (-0.065, 0.418, -0.33)

    return symmetrize(pts, flip_perm_68())


def template_21() -> np.ndarray:
    pts = np.array(
        [
            (-0.58, -0.47, -0.06),  # 0  left brow outer
            (-0.36, -0.53, -0.20),  # 1  left brow center
            (-0.13, -0.47, -0.30),  # 2  left brow inner
            (0.13, -0.47, -0.30),   # 3  right brow inner
            (0.36, -0.53, -0.20),   # 4  right brow center
            (0.58, -0.47, -0.06),   # 5  right brow outer
            (-0.45, -0.30, -0.06),  # 6  left eye outer
            (-0.335, -0.30, -0.13), # 7  left eye center
            (-0.22, -0.30, -0.24),  # 8  left eye inner
            (0.22, -0.30, -0.24),   # 9  right eye inner
            (0.335, -0.30, -0.13),  # 10 right eye center
            (0.45, -0.30, -0.08),   # 11 right eye outer
            (-0.75, 0.0, 0.50),     # 12 left ear
            (-0.14, 0.12, -0.30),   # 13 nose left
            (0.0, 0.02, -0.50),     # 14 nose center
            (0.14, 0.12, -0.30),    # 15 nose right
            (0.75, 0.0, 0.50),      # 16 right ear
            (-0.26, 0.40, -0.32),   # 17 mouth left
            (0.0, 0.40, -0.36),     # 18 mouth center
            (0.26, 0.40, -0.24),    # 19 mouth right
            (0.0, 0.95, -0.05),     # 20 chin
        ]
    )
    return symmetrize(pts, flip_perm_21())


# Anchor choice per scheme: brow ends, eye corners, nose-bridge top (68) or
# nose center (21), and mouth corners. Rigid, near-expression-invariant points.
ANCHORS_68 = (17, 21, 22, 26, 27, 36, 39, 42, 45, 48, 54)
ANCHORS_21 = (0, 2, 3, 5, 6, 8, 9, 11, 14, 17, 19)


def deform_expression_68(points: np.ndarray, amount: float) -> np.ndarray:
    """Open the mouth by `amount` in [0, 1]; anchors stay put."""
    out = points.copy()
    drop = 0.13 * amount
    out[55:60, 1] += drop               # outer lower lip
    out[65:68, 1] += drop * 0.9         # inner lower lip
    out[61:64, 1] -= 0.02 * amount      # inner upper lip lifts slightly
    out[6:11, 1] += drop * 0.5          # chin follows
    return out


def deform_expression_21(points: np.ndarray, amount: float) -> np.ndarray:
    out = points.copy()
    out[18, 1] += 0.10 * amount
    out[20, 1] += 0.07 * amount
    return out
