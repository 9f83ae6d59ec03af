"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: usage problems exit 1,
DataError exits 2, everything else that escapes exits 3.
"""


class FacemarkError(Exception):
    pass


class DataError(FacemarkError):
    """Bad input files: missing images, unparseable manifests, scheme mismatches."""


class ManifestError(DataError):
    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}"
            if line is not None:
                loc += f":{line}"
            loc = f" ({loc})"
        super().__init__(f"{message}{loc}")
        self.path = path
        self.line = line


class DegenerateAnchorsError(FacemarkError):
    """Anchor correspondences too ill-conditioned for a pose fit."""


class OccludedAnchorsError(FacemarkError):
    """One or more anchor landmarks is not visible."""


class ShapeMismatchError(FacemarkError):
    """A tensor or landmark set does not have the contracted shape."""


class NonFiniteError(FacemarkError):
    """A non-finite value appeared where the contract forbids it."""
