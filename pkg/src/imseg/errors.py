"""Exception taxonomy mapped onto CLI exit codes.

Exit-code contract: 0 success, 1 usage error (argparse), 2 data error,
3 backend error. Anything else escaping to the CLI is a bug and keeps
its traceback.
"""


class DataError(Exception):
    """Malformed or inconsistent input data, files, or configuration (exit 2)."""


class BackendError(Exception):
    """A training/prediction/scoring backend failed or produced invalid output (exit 3)."""


class TensorFormatError(DataError):
    """Invalid IMT1 tensor file."""


class BadMagicError(TensorFormatError):
    """File does not start with the IMT1 magic."""


class TruncatedPayloadError(TensorFormatError):
    """File ends before the declared payload is complete."""


class DtypeCodeError(TensorFormatError):
    """Unknown dtype code, or the tensor's dtype differs from the one required."""
