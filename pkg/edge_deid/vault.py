"""Edge-side store of original patient images.

Originals are deposited here and never handed to client training state or wire
messages. The vault keeps a hash index of every 64-byte window of each original
buffer, which survives purging, so the wire audit can detect a message that
smuggles raw original bytes. ``close`` (or leaving a ``with`` block) drops
the index too, so it lives only as long as the run that owns the vault.
"""

import hashlib
import logging
import threading
import uuid
from datetime import datetime
from typing import Any, Dict, Optional, Set

import numpy as np

from .colorlab import RgbImage

logger = logging.getLogger(__name__)

LEAK_WINDOW_BYTES = 64


def _window_digest(window: bytes) -> bytes:
    return hashlib.blake2b(window, digest_size=16).digest()


def _windows(buffer: bytes, size: int = LEAK_WINDOW_BYTES):
    for start in range(len(buffer) - size + 1):
        yield buffer[start:start + size]


class OriginalVault:
    """Thread-safe registry of original images keyed by case id.

    Deposits and purges may come from concurrent client workers.
    """

    def __init__(self, window_bytes: int = LEAK_WINDOW_BYTES):
        self._originals: Dict[str, Dict[str, Any]] = {}
        self._index: Set[bytes] = set()
        self._lock = threading.Lock()
        self._window = window_bytes

    @property
    def window_bytes(self) -> int:
        return self._window

    def deposit(self, image: RgbImage, case_id: Optional[str] = None) -> str:
        """Store an original and index its byte windows; returns the case id."""
        if case_id is None:
            case_id = str(uuid.uuid4())
        buffer = np.ascontiguousarray(image.data).tobytes()
        digests = {_window_digest(w) for w in _windows(buffer, self._window)}

        with self._lock:
            self._originals[case_id] = {"image": image, "deposited_at": datetime.now()}
            self._index.update(digests)
        return case_id

    def get(self, case_id: str) -> Optional[RgbImage]:
        with self._lock:
            entry = self._originals.get(case_id)
            return entry["image"] if entry else None

    def purge(self, case_id: str) -> bool:
        """Drop the image itself; its leakage fingerprints stay indexed."""
        with self._lock:
            if case_id in self._originals:
                del self._originals[case_id]
                return True
            return False

    def purge_all(self) -> int:
        with self._lock:
            count = len(self._originals)
            self._originals.clear()
        if count:
            logger.debug("vault purged %d originals", count)
        return count

    def __len__(self) -> int:
        with self._lock:
            return len(self._originals)

    def __contains__(self, case_id: str) -> bool:
        with self._lock:
            return case_id in self._originals

    def find_leak(self, payload: bytes) -> Optional[int]:
        """Offset of the first payload window matching an indexed original, else None."""
        with self._lock:
            index = self._index
            for offset, window in enumerate(_windows(payload, self._window)):
                if _window_digest(window) in index:
                    return offset
        return None

    @property
    def index_size(self) -> int:
        with self._lock:
            return len(self._index)

    def close(self) -> None:
        """Drop every original and the leak index with it."""
        with self._lock:
            self._originals.clear()
            self._index.clear()

    def __enter__(self) -> "OriginalVault":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
