from typing import Optional


class GeoTxnError(Exception):
    """Caller-facing failure carrying a status code and a detail message"""

    status_code: int = 500

    def __init__(self, detail: str, status_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if status_code is not None:
            self.status_code = status_code

    def __str__(self) -> str:
        return f"[{self.status_code}] {self.detail}"


class ReplicaUnavailable(GeoTxnError):
    status_code = 503


class QuorumUnavailable(GeoTxnError):
    status_code = 503


class RecordNotFound(GeoTxnError):
    status_code = 404


class InvalidWorkload(GeoTxnError):
    status_code = 400


class InvariantViolation(GeoTxnError):
    status_code = 500
