"""Exception hierarchy shared across the package."""


class GridcastError(Exception):
    pass


class DimensionError(GridcastError, ValueError):
    """Tensor shapes are not congruent for the requested operation."""


class NonFiniteError(GridcastError, ValueError):
    """A NaN or infinity reached a tensor."""


class ContractError(GridcastError, RuntimeError):
    pass


class ConfigurationError(GridcastError, ValueError):
    pass


class FormatError(GridcastError, ValueError):
    """A binary file could not be decoded.

    ``offset`` is the byte position where decoding failed.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class WindowError(GridcastError, IndexError):
    """A requested frame window or table index lies outside the data."""


class TrainingError(GridcastError, RuntimeError):
    pass


class SearchError(GridcastError, RuntimeError):
    pass
