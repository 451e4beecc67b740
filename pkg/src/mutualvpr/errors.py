"""Exception types raised across the package."""


class ParameterError(ValueError):
    """A numeric parameter is outside its valid range."""


class ContractError(ValueError):
    """Inputs violate a shape or normalization contract."""


class ManifestParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class GenerationError(RuntimeError):
    """Synthetic world generation could not satisfy its constraints."""


class NumericError(FloatingPointError):
    """Non-finite values appeared in activations or losses."""


class DatasetError(ValueError):
    pass


class LabelingError(ValueError):
    pass
