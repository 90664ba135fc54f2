"""Exception hierarchy shared by every chprec module."""


class ChprecError(Exception):
    """Base class; the CLI turns any of these into a one-line diagnostic."""


class IndexOutOfRange(ChprecError, IndexError):
    pass


class NonFiniteValue(ChprecError, ValueError):
    pass


class DimensionMismatch(ChprecError, ValueError):
    pass


class NegativeEntry(ChprecError, ValueError):
    pass


class NegativeEpsilon(ChprecError, ValueError):
    pass


class RatioOutOfRange(ChprecError, ValueError):
    pass


class EmptyGraph(ChprecError, ValueError):
    pass


class EmptyGrid(ChprecError, ValueError):
    pass


class ZeroColumn(ChprecError, ValueError):
    pass


class NoConvergence(ChprecError, RuntimeError):
    pass


class NotBipartite(ChprecError, ValueError):
    pass


class LayerCountMismatch(ChprecError, ValueError):
    pass


class NonFiniteGradient(ChprecError, FloatingPointError):
    pass


class UserSaturated(ChprecError, ValueError):
    pass


class NoTestUsers(ChprecError, ValueError):
    pass


class TooFewUsers(ChprecError, ValueError):
    pass


class DegenerateVariance(ChprecError, ValueError):
    pass


class ParseError(ChprecError, ValueError):
    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class EmptyFile(ChprecError, ValueError):
    pass


class EmptyAfterFilter(ChprecError, ValueError):
    pass


class FormatError(ChprecError, ValueError):
    pass


class ConfigError(ChprecError, ValueError):
    pass


class UnknownCommand(ChprecError, ValueError):
    pass
