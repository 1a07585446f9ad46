class AIFError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(AIFError, ValueError):
    """Operand dimensions do not agree."""


class OrderingError(AIFError):
    """An update event arrived with a stale or repeated sequence number."""


class ConsistencyError(AIFError):
    """Precomputed artifacts come from different model or feature snapshots."""


class ContractError(AIFError, ValueError):
    """An input violates an operation's documented domain."""


class TransportError(AIFError, ValueError):
    """Malformed transport payload.

    ``offset`` is the position of the failure: a character index while the
    text is being base-64 decoded, a byte index once it is being parsed.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class N2OMissError(AIFError, KeyError):
    """Requested items are absent from the nearline index table."""

    def __init__(self, missing):
        super().__init__(f"{len(missing)} item(s) missing from index table")
        self.missing = list(missing)
