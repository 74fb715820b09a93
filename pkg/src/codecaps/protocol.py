"""Response values and error codes shared by the service, directory and wire layers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

OK = 200
BAD_REQUEST = 400
UNAUTHORIZED = 401
FORBIDDEN = 403
NOT_FOUND = 404
CONFLICT = 409

REASONS = {
    OK: "OK",
    BAD_REQUEST: "Bad Request",
    UNAUTHORIZED: "Unauthorized",
    FORBIDDEN: "Forbidden",
    NOT_FOUND: "Not Found",
    CONFLICT: "Conflict",
}

# error strings surfaced to clients
UNKNOWN_OBJECT = "unknown object"
UNSUPPORTED = "unsupported request"
REPLAY = "replay"
STALE = "stale timestamp"
NO_SUCH_NAME = "no such name"
NO_SUCH_GROUP = "no such group"
DEPTH_EXHAUSTED = "depth exhausted"
FOREIGN_CAP = "cannot extend foreign cap"
MALFORMED = "malformed request"


@dataclass
class Response:
    status: int
    payload: bytes = b""
    error: str = ""
    stage: str = ""
    headers: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == OK

    @property
    def realm(self) -> Optional[str]:
        return self.headers.get("Realm")

    @property
    def challenge(self) -> Optional[str]:
        return self.headers.get("WWW-Authenticate")

    def text(self) -> str:
        return self.payload.decode("utf-8")


def error_response(status: int, error: str, stage: str = "") -> Response:
    return Response(status=status, error=error, stage=stage)


class TransportError(ConnectionError):
    """The peer could not be reached or failed transport authentication."""


class ServiceError(Exception):
    """A service answered with a non-200 status."""

    def __init__(self, response: Response):
        self.response = response
        self.status = response.status
        self.error = response.error or REASONS.get(response.status, "")
        self.stage = response.stage
        msg = f"{response.status} {self.error}"
        if response.stage:
            msg += f" (stage {response.stage})"
        super().__init__(msg)


def raise_for_status(resp: Response) -> Response:
    if not resp.ok:
        raise ServiceError(resp)
    return resp
