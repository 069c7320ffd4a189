"""Exception hierarchy shared across the package."""


class MetaMFError(Exception):
    """Base class for all errors raised by metamf."""


class ShapeError(MetaMFError, ValueError):
    pass


class DatasetError(MetaMFError, ValueError):
    pass


class ParseError(DatasetError):
    def __init__(self, lineno, line, reason):
        self.lineno = lineno
        self.line = line
        super().__init__(f"line {lineno}: {reason}: {line!r}")


class DuplicateRatingError(DatasetError):
    def __init__(self, user, item, lineno=None):
        self.user = user
        self.item = item
        where = f" (line {lineno})" if lineno is not None else ""
        super().__init__(f"duplicate rating for pair (user={user!r}, item={item!r}){where}")


class EmptyDatasetError(DatasetError):
    pass


class CapacityError(MetaMFError):
    """Generated per-user artifacts would exceed the configured memory budget."""


class TapeMismatchError(MetaMFError, ValueError):
    pass


class ProtocolError(MetaMFError):
    pass


class RoundFailedError(MetaMFError):
    """A device failed mid-round; the server parameters were left untouched."""
