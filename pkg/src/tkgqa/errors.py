"""Exception hierarchy shared across the package.

Every error carries a short ``category`` tag; the CLI prints it in front of
the message and maps it to a nonzero exit code.
"""


class TkgqaError(Exception):
    category = "error"


class DimensionError(TkgqaError, ValueError):
    category = "dimension"


class NumericError(TkgqaError, ArithmeticError):
    category = "numeric"


class ContractError(TkgqaError, ValueError):
    category = "contract"


class ParseError(TkgqaError, ValueError):
    category = "parse"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(TkgqaError, ValueError):
    category = "validation"


class UnknownIdError(TkgqaError, KeyError):
    category = "lookup"

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown id"


class VocabularyError(UnknownIdError):
    category = "vocabulary"


class ConfigError(TkgqaError, ValueError):
    category = "config"


class TrainingError(TkgqaError, RuntimeError):
    category = "training"

    def __init__(self, message, step=None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step


class CheckpointError(TkgqaError, ValueError):
    category = "checkpoint"
