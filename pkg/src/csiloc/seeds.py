"""Deterministic derivation of independent sub-seeds."""

import hashlib


def derive_seed(*parts) -> int:
    """64-bit seed hashed from printable parts, stable across runs and hosts.

    Callers pass floats pre-formatted (e.g. f"{p:.6g}") so the text form is
    canonical.
    """
    text = "\x1f".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")
