"""Exception hierarchy shared by every carss module."""


class CarssError(Exception):
    """Base class for all library errors."""


class InvalidInputError(CarssError, ValueError):
    """Non-finite coordinates, bad sizes, malformed arguments."""


class InvalidTourError(InvalidInputError):
    pass


class InvalidConfigError(InvalidInputError):
    pass


class TooLargeError(InvalidInputError):
    """An exact method was asked to solve a problem beyond its size cap."""


class InfeasibleError(CarssError):
    pass


class InvalidActionError(CarssError, ValueError):
    pass


class NotTerminalError(CarssError):
    pass


class ShapeError(CarssError, ValueError):
    pass


class FormatError(CarssError, ValueError):
    """Parse failure in an instance, tour, trace or checkpoint file."""

    def __init__(self, message, lineno=None, path=None):
        self.lineno = lineno
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if lineno is not None:
            where += f":{lineno}" if where else f"line {lineno}"
        super().__init__(f"{where}: {message}" if where else message)


class UnsupportedFeatureError(FormatError):
    pass


class TrainingDivergedError(CarssError):
    pass
