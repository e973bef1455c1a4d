"""Exception hierarchy shared across the package."""


class FlexMoEError(Exception):
    """Base class for all package errors."""


class NumericError(FlexMoEError, ValueError):
    """A NaN or infinity appeared where finite values are required."""


class ShapeError(FlexMoEError, ValueError):
    pass


class EmptyComboError(FlexMoEError, ValueError):
    """A sample observes no modality at all."""


class InvalidLookupError(FlexMoEError, KeyError):
    pass


class SchemaError(FlexMoEError, ValueError):
    pass


class ParseError(FlexMoEError, ValueError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class ConfigError(FlexMoEError, ValueError):
    def __init__(self, message, fields=()):
        super().__init__(message)
        self.fields = list(fields)


class CapacityError(ConfigError):
    """Fewer experts than non-empty modality combinations."""


class SplitError(FlexMoEError, ValueError):
    pass


class UndefinedClassError(FlexMoEError, ValueError):
    def __init__(self, message, label=None):
        super().__init__(message)
        self.label = label


class EmptyReportError(FlexMoEError, ValueError):
    pass


class CheckpointError(FlexMoEError):
    pass
