"""Exception hierarchy shared by all modules.

The CLI maps these onto its exit codes, so every failure a user can trigger
derives from :class:`InfoGammaError`.
"""


class InfoGammaError(Exception):
    """Base class for all package errors."""


class ParseError(InfoGammaError, ValueError):
    """Raised when an expression string cannot be parsed.

    Attributes
    ----------
    offset : int
        Byte offset into the source where parsing failed.
    expected : str
        Description of what the parser was looking for.
    found : str
        The offending token text (empty at end of input).
    """

    def __init__(self, offset: int, expected: str, found: str):
        self.offset = offset
        self.expected = expected
        self.found = found
        shown = repr(found) if found else "end of input"
        super().__init__(f"at offset {offset}: expected {expected}, found {shown}")


class EvalError(InfoGammaError, ArithmeticError):
    """Raised when an expression is evaluated outside its domain.

    ``kind`` is one of ``"log-domain"``, ``"div-by-zero"``, ``"sqrt-domain"``.
    ``node`` is the printed sub-expression that failed and ``where`` the index
    of the first offending sample when evaluating on arrays.
    """

    def __init__(self, kind: str, node: str, where=None):
        self.kind = kind
        self.node = node
        self.where = where
        msg = f"{kind} in {node}"
        if where is not None:
            msg += f" at index {where}"
        super().__init__(msg)


class ConfigError(InfoGammaError, ValueError):
    pass


class DimensionMismatch(InfoGammaError, ValueError):
    pass


class NonNormalizable(InfoGammaError, ValueError):
    pass


class InternalInconsistency(InfoGammaError, RuntimeError):
    pass


class NonPositiveDensity(InfoGammaError, ValueError):
    pass


class SolverError(InfoGammaError, RuntimeError):
    pass


class CFLViolation(SolverError):
    pass


class NegativeDensity(SolverError):
    pass


class InsufficientData(InfoGammaError, ValueError):
    pass


class NonPositiveValue(InfoGammaError, ValueError):
    pass


class NonConvergence(InfoGammaError, RuntimeError):
    pass
