class HmmprogError(Exception):
    """Base class for library errors."""


class InvalidInputError(HmmprogError, ValueError):
    pass


class StarvedComponentError(HmmprogError):
    """A component received no responsibility during an M-step."""


class ZeroLikelihoodError(HmmprogError):
    """The observations are impossible under the model.

    ``step`` is the first offending time index when known, ``sequence`` the
    index of the offending sequence within a dataset.
    """

    def __init__(self, message, step=None, sequence=None):
        super().__init__(message)
        self.step = step
        self.sequence = sequence


class ConfigError(HmmprogError, ValueError):
    pass
