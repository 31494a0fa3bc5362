class PotgameError(Exception):
    """Base class for errors raised by potgame."""


class DivergenceError(PotgameError):
    """A rollout or solve produced non-finite values."""

    def __init__(self, message, step=None, trace=None):
        super().__init__(message)
        self.step = step
        self.trace = trace or []


class StructureError(PotgameError):
    """The game does not have the separable structure needed for the reduction."""

    def __init__(self, message, offending=None):
        super().__init__(message)
        self.offending = offending or []


class MissingMultipliersError(PotgameError):
    """KKT residuals were requested for a result without multiplier estimates."""


class ScenarioError(PotgameError):
    """A scenario or config file failed to parse or validate."""

    def __init__(self, message, line=None, column=None, location=None):
        super().__init__(message)
        self.line = line
        self.column = column
        self.location = location

    def __str__(self):
        msg = super().__str__()
        if self.line is not None:
            msg = f"{msg} (line {self.line}, column {self.column})"
        if self.location:
            msg = f"{self.location}: {msg}"
        return msg


class GridTooLargeError(PotgameError):
    """Brute-force enumeration refused because the grid is too large."""

    def __init__(self, message, size):
        super().__init__(message)
        self.size = size
