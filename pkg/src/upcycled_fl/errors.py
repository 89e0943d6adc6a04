class UpcycledError(Exception):
    pass


class ConfigError(UpcycledError, ValueError):
    """Invalid configuration. ``violations`` lists every problem found."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class ContractError(UpcycledError, ValueError):
    pass


class ParseError(UpcycledError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(ParseError):
    pass


class SplitError(UpcycledError, ValueError):
    pass


class DivergenceError(UpcycledError, FloatingPointError):
    pass


class DomainError(UpcycledError, ValueError):
    pass


class DiagnosticError(UpcycledError, ValueError):
    pass


class EvaluationError(UpcycledError, ValueError):
    pass
