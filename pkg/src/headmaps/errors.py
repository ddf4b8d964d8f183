"""Exception hierarchy. The CLI maps these onto exit codes."""


class HeadmapsError(Exception):
    """Base class for all package errors."""


class DataError(HeadmapsError, ValueError):
    """Input data is malformed, inconsistent or unusable."""


class ModelLoadError(DataError):
    pass


class AdapterError(ModelLoadError):
    pass


class VocabError(DataError):
    pass


class PlantError(DataError):
    """A planted toy head does not satisfy the plant property."""


class DescribeError(HeadmapsError):
    pass


class ResponseParseError(DescribeError, DataError):
    def __init__(self, message, raw):
        super().__init__(message)
        self.raw = raw


class RetriesExhausted(DescribeError):
    def __init__(self, message, attempts, last_error=None):
        super().__init__(message)
        self.attempts = attempts
        self.last_error = last_error


class EndpointError(DescribeError):
    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status
