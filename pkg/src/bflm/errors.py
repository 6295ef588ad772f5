"""Exception types shared across the toolkit.

The CLI maps each family onto an exit code: usage/config errors exit 1,
data errors exit 2 and numeric faults exit 3.
"""


class BFLMError(Exception):
    exit_code = 1


class ContractViolation(BFLMError, ValueError):
    """A caller broke an operation's precondition (bad shape, bad index...)."""

    exit_code = 1


class ConfigError(BFLMError):
    exit_code = 1


class DataError(BFLMError):
    """Malformed corpus, vocabulary or checkpoint input."""

    exit_code = 2


class CheckpointError(DataError):
    def __init__(self, section, message):
        super().__init__(f"checkpoint {section}: {message}")
        self.section = section


class NumericFault(BFLMError, ArithmeticError):
    exit_code = 3
