"""Exception types raised across the package."""


class PeftLabError(Exception):
    pass


class ShapeError(PeftLabError, ValueError):
    pass


class LengthError(PeftLabError, ValueError):
    pass


class DivergenceError(PeftLabError, ArithmeticError):
    """A loss, gradient or parameter became non-finite."""


class ConfigError(PeftLabError, ValueError):
    pass


class LabelError(PeftLabError, ValueError):
    pass


class FeasibilityError(PeftLabError, ValueError):
    """CTC label sequence cannot be aligned to the available frames."""


class InventoryError(PeftLabError, KeyError):
    pass


class CheckpointError(PeftLabError, IOError):
    pass


class CompatibilityError(PeftLabError, ValueError):
    pass


class ReportError(PeftLabError, ValueError):
    pass
