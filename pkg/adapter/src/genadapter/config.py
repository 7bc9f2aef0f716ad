"""Service configuration."""

from __future__ import annotations

import enum
from dataclasses import dataclass


class AdapterConfigError(ValueError):
    pass


class Mode(enum.Enum):
    STUB = "stub"
    MODEL = "model"


@dataclass(frozen=True)
class AdapterConfig:
    """Settings for one service instance.

    Stub mode must work with no model assets, so the model identifiers are
    only consulted (and required) in model mode.
    """

    mode: Mode = Mode.STUB
    generator_model: str | None = None
    captioner_model: str | None = None
    host: str = "127.0.0.1"
    port: int = 8080
    max_concurrent: int = 2

    def __post_init__(self):
        if self.max_concurrent < 1:
            raise AdapterConfigError("max_concurrent must be >= 1")
        if not 0 < self.port < 65536:
            raise AdapterConfigError(f"port {self.port} out of range")
        if self.mode is Mode.MODEL:
            if not self.generator_model or not self.captioner_model:
                raise AdapterConfigError(
                    "model mode requires generator_model and captioner_model"
                )


def parse_listen(listen: str) -> tuple[str, int]:
    """Split a host:port string; the port part is required."""
    host, sep, port_s = listen.rpartition(":")
    if not sep or not host:
        raise AdapterConfigError(f"listen address {listen!r} is not host:port")
    try:
        port = int(port_s)
    except ValueError:
        raise AdapterConfigError(f"listen port {port_s!r} is not an integer") from None
    return host, port
