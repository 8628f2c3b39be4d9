class ValidationError(ValueError):
    """Bad input to a pure operation (exit code 1 at the CLI)."""


class PlanningError(RuntimeError):
    pass


class OracleUnavailable(RuntimeError):
    pass


class ParseError(ValueError):
    pass


class LengthError(ValueError):
    pass
