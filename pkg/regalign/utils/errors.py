class RegAlignError(Exception):
    pass


class ValidationError(RegAlignError, ValueError):
    pass


class StorageError(RegAlignError, IOError):
    pass


class ZeroVector(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class BadShape(ShapeMismatch):
    pass


class NonPositiveTemperature(ValidationError):
    pass


class NotADistribution(ValidationError):
    pass


class BadTemplate(ValidationError):
    pass


class EmptyPool(ValidationError):
    pass


class BadConfig(ValidationError):
    def __init__(self, key, reason=''):
        self.key = key
        message = f'invalid config value at "{key}"'
        if reason:
            message += f': {reason}'
        super().__init__(message)


class LayoutFailure(ValidationError):
    pass


class DegenerateBox(ValidationError):
    pass


class EmptyBatch(ValidationError):
    pass


class NoBaseAnnotations(ValidationError):
    pass


class NoGroundTruth(ValidationError):
    pass


class UnknownCategory(ValidationError):
    pass


class UsageError(ValidationError):
    pass


class CorruptFile(StorageError):
    def __init__(self, path, reason=''):
        self.path = str(path)
        message = f'corrupt or missing file "{self.path}"'
        if reason:
            message += f': {reason}'
        super().__init__(message)


class CorruptCheckpoint(StorageError):
    pass
