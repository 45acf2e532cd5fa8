"""Exception types raised across the package."""


class ContractError(ValueError):
    """An argument violates an operation's precondition (shape, size, range)."""


class UnsupportedFormatError(ValueError):
    """An image file is readable but uses an encoding we do not handle."""


class ManifestError(ValueError):
    """A manifest entry is invalid. ``entry_id`` names the offending row."""

    def __init__(self, entry_id, message):
        super().__init__(f"{entry_id}: {message}")
        self.entry_id = entry_id


class CheckpointFormatError(ValueError):
    """A checkpoint file is corrupt, truncated or of the wrong version."""

    def __init__(self, message, offset=None, block=None):
        where = []
        if block is not None:
            where.append(f"block {block!r}")
        if offset is not None:
            where.append(f"offset {offset}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)
        self.offset = offset
        self.block = block
