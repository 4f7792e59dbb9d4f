class DimensionException(Exception):
    pass


class ConfigurationException(Exception):
    pass


class ValidationException(Exception):
    pass


class MaskingStrategyException(Exception):
    pass


class NumericalException(Exception):
    pass


class IncompatibleCheckpointException(Exception):
    pass


class DatasetValidationException(Exception):
    pass


class DatasetIOException(OSError):
    def __init__(self, message: str, path):
        super().__init__(f"{message}: {path}")
        self.path = path
