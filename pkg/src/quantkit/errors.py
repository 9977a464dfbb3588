"""Exception hierarchy shared by all quantkit modules.

The CLI maps these onto process exit codes: usage errors exit 2 (argparse),
ValidationError 3, NumericError 4, OSError 5.
"""


class QuantKitError(Exception):
    """Base class for all quantkit errors."""


class ValidationError(QuantKitError):
    """A contract violation: bad shapes, malformed graphs, invalid options."""


class BlobFormatError(ValidationError):
    """Corrupt or malformed on-disk data (bad magic, truncated payload...)."""


class NumericError(QuantKitError):
    """Numeric failure: non-finite loss, impossible variance, overflow."""


class DegenerateSiteError(NumericError):
    """A calibration site produced no usable activation statistics."""

    def __init__(self, site_id, message=None):
        self.site_id = site_id
        super().__init__(message or f"degenerate activation site: {site_id!r}")
