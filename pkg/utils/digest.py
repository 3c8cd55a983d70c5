import hashlib
import zlib


def stable_hash(text: str) -> int:
    """Process-independent hash for placement decisions"""
    return zlib.crc32(text.encode("utf-8"))


def payload_digest(payload: str, size: int = 8) -> str:
    return hashlib.blake2b(payload.encode("utf-8"), digest_size=size).hexdigest()


class RunningDigest:
    """Accumulates a blake2b digest over trace lines"""

    def __init__(self):
        self._h = hashlib.blake2b(digest_size=16)
        self.lines = 0

    def update(self, line: str) -> None:
        self._h.update(line.encode("utf-8"))
        self.lines += 1

    def hexdigest(self) -> str:
        return self._h.hexdigest()
