"""Exception types shared across the package.

Each carries the CLI exit code it maps to (see ``harness.cli``).
"""


class LdaError(Exception):
    exit_code = 1


class InvalidArgument(LdaError, ValueError):
    """Shapes or scalar arguments violate an operation's preconditions."""
    exit_code = 2


class InvalidConfiguration(InvalidArgument):
    exit_code = 2


class InvalidData(InvalidArgument):
    exit_code = 2


class Unsupported(LdaError):
    """The request is valid but outside what the implementation handles."""
    exit_code = 2


class NumericalFailure(LdaError, ArithmeticError):
    """A non-finite value appeared during an iteration.

    ``dump`` holds the arrays that were live when the failure was detected.
    """
    exit_code = 3

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


class TrainingFailure(NumericalFailure):
    exit_code = 3
