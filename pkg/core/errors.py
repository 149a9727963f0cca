"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class SaceError(Exception):
    exit_code: int = 1


class ConfigError(SaceError, ValueError):
    exit_code = 2


class DataError(SaceError, ValueError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, row: int, message: str):
        self.row = row
        super().__init__(f"ligne {row}: {message}")


class ConsistencyError(DataError):
    pass


class MissingnessError(DataError):
    pass


class DegenerateColumnError(DataError):
    def __init__(self, column: str):
        self.column = column
        super().__init__(f"colonne degeneree (variance nulle): {column}")


class NumericalError(SaceError, ArithmeticError):
    exit_code = 4


class InitializationError(NumericalError):
    pass


class StructuralError(NumericalError):
    pass
