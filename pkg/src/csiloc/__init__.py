"""Desk-scale lab for CSI-based WiFi indoor localization.

Synthetic multipath channel simulator, portable CSIR1 session recordings,
tensor construction, a deep CNN position regressor, and the transfer /
training-data sweeps built on top of it.
"""

__version__ = "0.1.0"

from .records import (
    AlignedCsi,
    ApPackets,
    CsiSession,
    CsirBadMagic,
    CsirBadVersion,
    CsirError,
    CsirFieldError,
    CsirTruncated,
    align_streams,
    load_session,
    parse_session,
    save_session,
    write_session,
)

__all__ = [
    "AlignedCsi",
    "ApPackets",
    "CsiSession",
    "CsirBadMagic",
    "CsirBadVersion",
    "CsirError",
    "CsirFieldError",
    "CsirTruncated",
    "align_streams",
    "load_session",
    "parse_session",
    "save_session",
    "write_session",
    "__version__",
]
