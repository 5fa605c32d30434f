"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Rejected input: bad shapes, out-of-range parameters, inconsistent data."""


class FormatError(Exception):
    """A file on disk is malformed (bad magic, truncated payload, bad header)."""
