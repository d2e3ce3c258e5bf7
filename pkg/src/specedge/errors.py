class ProtocolError(Exception):
    """A message violated the draft/verify protocol (stale context, duplicate request, ...)."""


class DecodeError(ValueError):
    """A byte payload could not be decoded. ``field`` names the offending field."""

    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field


class ConfigError(ValueError):
    pass
