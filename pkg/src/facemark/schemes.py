"""Landmark scheme registry: point counts, flip tables, semantic groups.

Two schemes ship with the package: "68pt" (iBUG-style 68-point layout) and
"21pt" (AFLW-style 21-point layout). Flip permutation tables live in data
files; unknown schemes must be registered by the user with their own table.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class Scheme:
    name: str
    n_landmarks: int
    flip_perm: np.ndarray
    anchor_indices: tuple[int, ...]
    left_eye: tuple[int, ...]
    right_eye: tuple[int, ...]
    left_outer_corner: int
    right_outer_corner: int
    feature_groups: dict[str, tuple[int, ...]] = field(default_factory=dict)
    reference_resource: str | None = None

    def __post_init__(self):
        perm = np.asarray(self.flip_perm, dtype=np.intp)
        if perm.shape != (self.n_landmarks,):
            raise DataError(
                f"flip table for {self.name} must have {self.n_landmarks} entries"
            )
        if not np.array_equal(np.sort(perm), np.arange(self.n_landmarks)):
            raise DataError(f"flip table for {self.name} is not a permutation")
        if not np.array_equal(perm[perm], np.arange(self.n_landmarks)):
            raise DataError(f"flip table for {self.name} is not an involution")
        perm.setflags(write=False)
        object.__setattr__(self, "flip_perm", perm)
        if len(set(self.anchor_indices)) != len(self.anchor_indices):
            raise DataError(f"anchor indices for {self.name} must be distinct")
        if any(i < 0 or i >= self.n_landmarks for i in self.anchor_indices):
            raise DataError(f"anchor index out of range for {self.name}")


_REGISTRY: dict[str, Scheme] = {}


def register_scheme(scheme: Scheme) -> None:
    _REGISTRY[scheme.name] = scheme


def get_scheme(name: str) -> Scheme:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise DataError(
            f"unknown landmark scheme {name!r}; registered: {sorted(_REGISTRY)}"
        ) from None


def registered_schemes() -> list[str]:
    return sorted(_REGISTRY)


def data_file_text(name: str) -> str:
    return (resources.files("facemark") / "data" / name).read_text()


def _load_flip_table(resource: str, n: int) -> np.ndarray:
    toks = data_file_text(resource).split()
    if len(toks) != n:
        raise DataError(f"flip table {resource} must have {n} entries, got {len(toks)}")
    return np.array([int(t) for t in toks], dtype=np.intp)


def _builtin_schemes() -> list[Scheme]:
    s68 = Scheme(
        name="68pt",
        n_landmarks=68,
        flip_perm=_load_flip_table("flip_68pt.txt", 68),
        anchor_indices=(17, 21, 22, 26, 27, 36, 39, 42, 45, 48, 54),
        left_eye=tuple(range(36, 42)),
        right_eye=tuple(range(42, 48)),
        left_outer_corner=36,
        right_outer_corner=45,
        feature_groups={
            "jaw": tuple(range(0, 17)),
            "brow_left": tuple(range(17, 22)),
            "brow_right": tuple(range(22, 27)),
            "nose_bridge": tuple(range(27, 31)),
            "nose_base": tuple(range(31, 36)),
            "eye_left": tuple(range(36, 42)),
            "eye_right": tuple(range(42, 48)),
            "mouth_outer": tuple(range(48, 60)),
            "mouth_inner": tuple(range(60, 68)),
        },
        reference_resource="reference_68pt.txt",
    )
    s21 = Scheme(
        name="21pt",
        n_landmarks=21,
        flip_perm=_load_flip_table("flip_21pt.txt", 21),
        anchor_indices=(0, 2, 3, 5, 6, 8, 9, 11, 14, 17, 19),
        left_eye=(6, 7, 8),
        right_eye=(9, 10, 11),
        left_outer_corner=6,
        right_outer_corner=11,
        feature_groups={
            "brow_left": (0, 1, 2),
            "brow_right": (3, 4, 5),
            "eye_left": (6, 7, 8),
            "eye_right": (9, 10, 11),
            "ears": (12, 16),
            "nose": (13, 14, 15),
            "mouth": (17, 18, 19),
            "chin": (20,),
        },
        reference_resource="reference_21pt.txt",
    )
    return [s68, s21]


for _s in _builtin_schemes():
    register_scheme(_s)
del _s
