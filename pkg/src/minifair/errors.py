"""Exception types raised across the package."""


class MinifairError(Exception):
    pass


class DuplicateEntry(MinifairError, KeyError):
    pass


class NotFound(MinifairError, KeyError):
    pass


class UnknownUser(MinifairError, KeyError):
    pass


class ParseError(MinifairError, ValueError):
    def __init__(self, line: int, message: str = "malformed record"):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DegenerateUser(MinifairError, ValueError):
    pass


class EmptyTrainingSet(MinifairError, ValueError):
    pass


class EmptyTestSet(MinifairError, ValueError):
    pass


class EmptyValidationSet(MinifairError, ValueError):
    pass


class EmptyGroup(MinifairError, ValueError):
    pass


class MissingModel(MinifairError, ValueError):
    pass


class InsufficientSamples(MinifairError, ValueError):
    pass


class Exhausted(MinifairError, RuntimeError):
    pass
