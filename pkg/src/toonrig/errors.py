"""Exception hierarchy.

Validation errors map to CLI exit code 2, everything else to 3.
"""


class ToonrigError(Exception):
    exit_code = 3


class ValidationError(ToonrigError, ValueError):
    """Input data breaks a documented invariant."""

    exit_code = 2


class RigError(ValidationError):
    pass


class ParamError(ValidationError):
    pass


class LandmarkError(ValidationError):
    pass


class RasterError(ToonrigError):
    pass


class DatasetError(ToonrigError):
    pass


class AssociationError(DatasetError):
    """Blob count differs from landmark count."""

    def __init__(self, n_blobs, n_landmarks):
        super().__init__(f"found {n_blobs} blobs for {n_landmarks} landmarks")
        self.n_blobs = n_blobs
        self.n_landmarks = n_landmarks


class SchemaError(ValidationError):
    pass


class TrainingError(ToonrigError):
    pass


class AlignmentError(ToonrigError):
    pass


class InpaintError(ToonrigError):
    pass


class PackageError(ToonrigError):
    pass


class HashMismatchError(PackageError):
    def __init__(self, filename, expected, actual):
        super().__init__(f"hash mismatch for {filename}: expected {expected[:12]}, got {actual[:12]}")
        self.filename = filename


class MappingError(ValidationError):
    pass
