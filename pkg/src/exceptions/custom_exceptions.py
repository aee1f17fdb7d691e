#custom_exceptions.py


class LagDRException(Exception):
    def __init__(self, detail: str = "Estimation error"):
        super().__init__(detail)
        self.detail = detail


class InvalidInputException(LagDRException):
    def __init__(self, detail: str = "Invalid input"):
        super().__init__(detail)


class InvalidConfigException(LagDRException):
    def __init__(self, detail: str = "Invalid configuration", keys: list[str] | None = None):
        super().__init__(detail)
        self.keys = keys or []


class ParseException(LagDRException):
    def __init__(self, detail: str = "Parse error", row: int | None = None, column: str | None = None):
        location = []
        if row is not None:
            location.append(f"row {row}")
        if column is not None:
            location.append(f"column '{column}'")
        if location:
            detail = f"{detail} ({', '.join(location)})"
        super().__init__(detail)
        self.row = row
        self.column = column


class UnsupportedPolicyException(LagDRException):
    def __init__(self, detail: str = "Operation not supported for this policy"):
        super().__init__(detail)


class InvalidPropensityException(LagDRException):
    def __init__(self, detail: str = "Invalid propensity", index: int | None = None):
        if index is not None:
            detail = f"{detail} at sample {index}"
        super().__init__(detail)
        self.index = index


class ConvergenceException(LagDRException):
    def __init__(self, detail: str = "Solver did not converge", grad_norm: float | None = None):
        if grad_norm is not None:
            detail = f"{detail} (final gradient norm {grad_norm:.3e})"
        super().__init__(detail)
        self.grad_norm = grad_norm


class NumericException(LagDRException):
    def __init__(self, detail: str = "Numeric error"):
        super().__init__(detail)
