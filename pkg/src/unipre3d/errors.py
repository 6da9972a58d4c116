"""Exception vocabulary shared across the package.

Kept deliberately flat: everything is a ValueError or RuntimeError subclass so
callers can catch broadly, while the CLI maps classes to exit codes
(ConfigError -> 2, NumericError -> 3, DatasetIOError -> 4).
"""


class InputError(ValueError):
    """Rejected input: non-finite values, out-of-range pixels, bad widths."""


class DimensionError(ValueError):
    """Shape mismatch; message must contain both offending shapes."""


class CameraError(ValueError):
    """Invalid intrinsics or degenerate extrinsics."""


class RotationError(ValueError):
    """Unusable rotation parameterization (e.g. zero quaternion)."""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class SelectionError(RuntimeError):
    """View-selection constraints cannot be satisfied."""


class NumericError(RuntimeError):
    """Non-finite loss/gradient or a failed numeric check."""


class DatasetIOError(RuntimeError):
    """Filesystem-level dataset failure, with the path in the message."""


def dim_error(what: str, got, want) -> DimensionError:
    return DimensionError(f"{what}: got shape {tuple(got)}, expected {tuple(want)}")
