"""Exception hierarchy shared by all pipeline stages."""


class MosaicError(Exception):
    """Base class for every error raised by octmosaic."""


class LoadError(MosaicError):
    pass


class ParameterError(MosaicError, ValueError):
    pass


class GeometryError(MosaicError):
    pass


class ScaleError(MosaicError):
    """A pyramid level would be smaller than the minimum usable size."""


class FitError(MosaicError):
    pass


class RegistrationError(MosaicError):
    pass


class EstimationError(MosaicError):
    pass


class MetricError(MosaicError):
    pass


class ValidationError(MosaicError):
    pass


class GenerationError(MosaicError):
    pass


class ConfigError(MosaicError):
    pass
