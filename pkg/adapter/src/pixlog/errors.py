"""Single error type: every anticipated failure exits the CLI with code 2."""


class PixlogError(Exception):
    """Malformed input, missing file, or unusable data."""
