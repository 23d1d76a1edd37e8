"""Bitmask and file helpers used across the package."""

import logging
import os
import tempfile
from collections.abc import Iterator
from pathlib import Path

import numpy as np


logger = logging.getLogger("community_storage")


def grand_mask(n_players: int) -> int:
    """Return the bitmask with the lowest ``n_players`` bits set."""
    return (1 << n_players) - 1


def mask_members(mask: int) -> tuple[int, ...]:
    """Return the indices of the set bits of ``mask`` in ascending order."""
    members = []
    index = 0
    while mask:
        if mask & 1:
            members.append(index)
        mask >>= 1
        index += 1
    return tuple(members)


def iter_proper_masks(n_players: int) -> Iterator[int]:
    """Yield every nonempty proper sub-coalition mask of an ``n_players`` community in ascending order."""
    yield from range(1, grand_mask(n_players))


def popcounts(n_players: int) -> np.ndarray:
    """Return the member count of every mask ``0 .. 2**n_players - 1``."""
    masks = np.arange(1 << n_players)
    counts = np.zeros(1 << n_players, dtype=np.int64)
    for bit in range(n_players):
        counts += (masks >> bit) & 1
    return counts


def membership_matrix(n_players: int, masks=None) -> np.ndarray:
    """Return a 0/1 matrix with one row per mask and one column per player."""
    masks = np.arange(1 << n_players) if masks is None else np.asarray(masks, dtype=np.int64)
    return ((masks[:, None] >> np.arange(n_players)[None, :]) & 1).astype(float)


def atomic_write_text(path, text: str) -> Path:
    """Write ``text`` to ``path`` through a temporary file in the same directory, then rename it into place.

    Readers never observe a partially written file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle, temporary = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(handle, "w", encoding="utf-8", newline="") as stream:
            stream.write(text)
        os.replace(temporary, path)
    except OSError:
        logger.exception("Failed to write file: %s", {"path": str(path)})
        if os.path.exists(temporary):
            os.unlink(temporary)
        raise
    logger.debug("Wrote file: %s", {"path": str(path), "bytes": len(text)})
    return path
