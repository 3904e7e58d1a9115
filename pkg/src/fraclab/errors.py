"""Exception hierarchy. Every error carries the name of the module that raised it."""

import warnings


class FraclabError(Exception):
    module = "fraclab"

    def __init__(self, msg: str = "", module: str | None = None):
        super().__init__(msg)
        if module is not None:
            self.module = module

    def __str__(self):
        msg = super().__str__()
        return f"[{self.module}] {type(self).__name__}: {msg}"


# spectral_core
class SpectralError(FraclabError):
    module = "spectral_core"


class NegativeExponentNonMeanZero(SpectralError):
    pass


NonMeanZero = NegativeExponentNonMeanZero


class ExponentOutOfRange(SpectralError):
    pass


class AlphaOutOfRange(SpectralError):
    pass


class GridMismatch(SpectralError):
    pass


class BumpOutsideBox(SpectralError):
    pass


class InvalidGrid(SpectralError):
    pass


# poincare_lab
class PoincareError(FraclabError):
    module = "poincare_lab"


class InvalidExponentOrder(PoincareError):
    pass


class EpsTooLarge(PoincareError):
    pass


class ZeroField(PoincareError):
    pass


class SupportViolation(PoincareError):
    pass


# schrodinger
class SchrodingerError(FraclabError):
    module = "schrodinger"


class NearSingular(SchrodingerError):
    pass


class NoConvergence(SchrodingerError):
    pass


class EigSolveFailure(SchrodingerError):
    """Also raised by ucp_probe, with module overridden."""


class ApproximationTooCoarse(SchrodingerError):
    pass


class InvalidMask(SchrodingerError):
    pass


class IllConditioned(UserWarning):
    """Issued (not raised) when a Runge system is numerically rank deficient."""


# magnetic
class MagneticError(FraclabError):
    module = "magnetic"


class OrderMismatch(MagneticError):
    pass


class UnsupportedConfig(MagneticError):
    pass


class UnsupportedFloor(MagneticError):
    pass


class ConfigMismatch(MagneticError):
    pass


class AssumptionWarning(UserWarning):
    pass


# dplane
class DplaneError(FraclabError):
    module = "dplane"


class SupportOutsideBall(DplaneError):
    pass


class ShapeMismatch(DplaneError):
    pass


class DegeneratePhantoms(DplaneError):
    pass


class MarginTooSmall(DplaneError):
    pass


# cli
class CliError(FraclabError):
    module = "cli"


class NotFound(CliError):
    pass


class UnsupportedFormat(CliError):
    pass


class ConfigError(CliError):
    pass


def warn(category, msg: str):
    warnings.warn(msg, category, stacklevel=3)
