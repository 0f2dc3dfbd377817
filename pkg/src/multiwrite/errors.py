"""Exception types shared across the package.

Plain ``ValueError`` is used for ordinary invalid arguments; the classes here
name failure modes that callers may want to catch individually.
"""


class RoutingError(Exception):
    """No usable forwarding entry toward a destination, or a forwarding loop."""


class UnknownRankError(Exception):
    """A rank is not present in the rank map or topology."""


class CapacityError(ValueError):
    """A value does not fit the configured capacity (e.g. rank beyond bitmap width)."""


class BufferOverflowError(Exception):
    """A write would land past the end of its destination slot."""


class DuplicateDeliveryError(Exception):
    """A payload arrived twice at a destination with no deduplication enabled."""


class ConfigError(Exception):
    """A scenario document is malformed. ``path`` points at the offending key."""

    def __init__(self, path: str, message: str):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}")
