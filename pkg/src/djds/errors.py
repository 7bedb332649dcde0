"""Exception types shared by the pipeline stages."""


class DjdsError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(DjdsError):
    pass


class ModelFileError(DjdsError):
    pass


class DimensionMismatch(DjdsError):
    pass


class EtaExceedsSpan(DjdsError):
    pass


class EmptyInputSet(DjdsError):
    pass


class TauMismatch(DjdsError):
    pass


class RegionMissing(DjdsError):
    pass


class Infeasible(DjdsError):
    """No certificate, precision or horizon satisfies the required inequality."""

    exit_code = 2


class EmptyContractedZone(Infeasible):
    pass


class EmptyController(DjdsError):
    exit_code = 3


class NoMatch(DjdsError):
    exit_code = 4
