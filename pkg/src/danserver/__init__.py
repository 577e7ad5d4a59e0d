"""Middle-tier caching server for immutable, run-keyed calibration objects."""

from .errors import (
    BackendUnavailable,
    CorruptObject,
    DanError,
    FetchTimeout,
    LimitExceeded,
    Malformed,
    NotFound,
    Overloaded,
)
from .model import CalibKey, ColumnSpec, CType, RowSet, cache_key_string, decode_object, encode_object

__version__ = "0.1.0"
