"""Exception types raised across the package."""


class InvalidInputError(ValueError):
    pass


class SchemaError(InvalidInputError):
    """A file is missing a required field or property."""


class DataError(InvalidInputError):
    """A file parsed but holds unusable values (NaN, out of range)."""


class CalibrationError(InvalidInputError):
    pass


class DimensionError(InvalidInputError):
    pass


class EmptyCloudError(InvalidInputError):
    pass


class ConfigError(InvalidInputError):
    pass


class CacheStaleError(RuntimeError):
    """A blend cache no longer matches the scene it is used with."""


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, view_id: str, message: str = "loss is not finite"):
        super().__init__(f"{message} at iteration {iteration} (view {view_id})")
        self.iteration = iteration
        self.view_id = view_id
