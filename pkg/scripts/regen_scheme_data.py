#!/usr/bin/env python3
"""Regenerate the bundled scheme data files (flip tables, reference faces).

Writes into src/facemark/data/. Flip tables are written first because the
scheme registry reads them at import time.
"""
import pathlib
import sys

import numpy as np

ROOT = pathlib.Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

from facemark import _templates  # noqa: E402

DATA = ROOT / "src" / "facemark" / "data"
DATA.mkdir(parents=True, exist_ok=True)


def write_flip(name: str, perm: np.ndarray) -> None:
    (DATA / name).write_text(" ".join(str(int(i)) for i in perm) + "\n")


write_flip("flip_68pt.txt", _templates.flip_perm_68())
write_flip("flip_21pt.txt", _templates.flip_perm_21())

from facemark import geometry  # noqa: E402  (needs the flip tables above)

ref68 = geometry.make_reference_face(
    _templates.template_68(), _templates.ANCHORS_68, "68pt"
)
geometry.save_reference_face(ref68, DATA / "reference_68pt.txt")

ref21 = geometry.make_reference_face(
    _templates.template_21(), _templates.ANCHORS_21, "21pt"
)
geometry.save_reference_face(ref21, DATA / "reference_21pt.txt")

print("wrote", sorted(p.name for p in DATA.iterdir()))
