"""Exception hierarchy shared across the package.

Every error raised by library code derives from NasflatError so the CLI can
map data problems to a single exit code. Class names name the violated
contract, not the call site.
"""

from __future__ import annotations


class NasflatError(Exception):
    """Base class for all errors raised by this package."""


# --- architecture / search space -----------------------------------------

class ArchitectureError(NasflatError):
    """An architecture violates a search-space invariant."""


class CycleDetected(ArchitectureError):
    pass


class BadOpIndex(ArchitectureError):
    pass


class MultipleSinks(ArchitectureError):
    pass


class MultipleSources(ArchitectureError):
    pass


class UnreachableSink(ArchitectureError):
    pass


class InvalidArchitecture(ArchitectureError):
    """Aggregate of all invariant violations found by validate()."""

    def __init__(self, errors: list[ArchitectureError]):
        self.errors = list(errors)
        super().__init__("; ".join(str(e) for e in errors))


# --- encoding tables -------------------------------------------------------

class DimMismatch(NasflatError):
    pass


class ParseError(NasflatError):
    pass


class NonFiniteValue(NasflatError):
    pass


class KeyMismatch(NasflatError):
    pass


# --- autodiff ----------------------------------------------------------------

class ShapeMismatch(NasflatError):
    pass


class NonScalarLoss(NasflatError):
    pass


# --- predictor ---------------------------------------------------------------

class UnknownDevice(NasflatError):
    pass


class BadSupplementaryDim(NasflatError):
    pass


class InsufficientOverlap(NasflatError):
    pass


# --- samplers ----------------------------------------------------------------

class PoolTooSmall(NasflatError):
    pass


class MissingEncoding(NasflatError):
    pass


class DegenerateEncoding(NasflatError):
    pass


class MissingReference(NasflatError):
    pass


# --- device sets ---------------------------------------------------------------

class LengthMismatch(NasflatError):
    pass


class ConstantInput(NasflatError):
    pass


class TooFewDevices(NasflatError):
    pass


class SideTooSmall(NasflatError):
    pass


# --- pipeline ----------------------------------------------------------------

class TooFewSamples(NasflatError):
    pass


class InsufficientData(NasflatError):
    pass


class EmptyFeasibleSet(NasflatError):
    pass
