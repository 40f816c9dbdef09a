class RandChanError(RuntimeError):
    """
    Base class for all errors raised by randchan.
    """


class InvalidInput(RandChanError, ValueError):
    """
    Raised when arguments, matrices or files violate a precondition.
    """


class CapExceeded(RandChanError):
    """
    Raised when an enumeration would exceed the configured cap.
    """

    def __init__(self, required: int, cap: int, what: str = "sequences"):
        super().__init__(
            f"Enumeration of {required} {what} exceeds the cap of {cap} "
            "(set RANDCHAN_CAP to raise it)"
        )
        self.required = required
        self.cap = cap


class Inexact(RandChanError):
    """
    Raised when a solve leaves a residual above tolerance.
    """

    def __init__(self, residual: float, tolerance: float):
        super().__init__(f"Residual {residual:.3g} exceeds tolerance {tolerance:.3g}")
        self.residual = residual
        self.tolerance = tolerance
