"""Exception hierarchy. Each class carries the CLI exit code for its category."""


class LabError(Exception):
    exit_code = 1


class ConfigError(LabError):
    exit_code = 2


class InputDomainError(ConfigError, ValueError):
    """A numeric argument fell outside its documented domain."""


class DataError(LabError):
    exit_code = 3


class TrainingError(LabError):
    exit_code = 4


class TransportError(LabError):
    exit_code = 5


class ProtocolError(TransportError):
    """The judge endpoint answered, but not with the agreed JSON shape."""

    def __init__(self, message, body=None):
        super().__init__(message)
        self.body = body
