"""Exception hierarchy; each class maps to one CLI exit code."""


class ThreatFormerError(Exception):
    exit_code = 1


class ConfigError(ThreatFormerError, ValueError):
    exit_code = 2


class DataError(ThreatFormerError, ValueError):
    exit_code = 3


class SchemaError(DataError):
    pass


class RowError(DataError):
    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


class NumericalError(ThreatFormerError, ArithmeticError):
    exit_code = 4
