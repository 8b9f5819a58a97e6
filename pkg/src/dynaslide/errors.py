"""Exception taxonomy shared across the package.

Every module raises subclasses of :class:`DynaSlideError` so callers can
catch one base type at pipeline boundaries while tests assert on the
specific condition.
"""


class DynaSlideError(Exception):
    """Base class for all errors raised by this package."""


# --- record / value validation -------------------------------------------

class MissingField(DynaSlideError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"missing or empty field: {name}")


class NonPositive(DynaSlideError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"field must be positive: {name}")


class DateOutOfWindow(DynaSlideError):
    pass


class NonFinite(DynaSlideError):
    pass


# --- datastore -------------------------------------------------------------

class InvalidConfig(DynaSlideError):
    pass


class UnknownTable(DynaSlideError):
    pass


class UnknownField(DynaSlideError):
    pass


class EmptyProjection(DynaSlideError):
    pass


# --- template pack ----------------------------------------------------------

class UnknownVariable(DynaSlideError):
    pass


class UnboundVariable(DynaSlideError):
    pass


class UnknownFunction(DynaSlideError):
    pass


class UnknownMetric(DynaSlideError):
    pass


class UnboundPlaceholder(DynaSlideError):
    pass


class PackError(DynaSlideError):
    """A template pack failed validation on load."""


# --- stats engine ------------------------------------------------------------

class InvalidBounds(DynaSlideError):
    pass


class UnknownOp(DynaSlideError):
    pass


class MismatchedFieldOps(DynaSlideError):
    pass


class MissingKey(DynaSlideError):
    pass


class InvalidParam(DynaSlideError):
    pass


class InsufficientColumns(DynaSlideError):
    pass


# --- renderer ----------------------------------------------------------------

class UnknownSubtemplate(DynaSlideError):
    pass


class RoleMismatch(DynaSlideError):
    pass


class SlotOccupied(DynaSlideError):
    pass


class EmptySeries(DynaSlideError):
    pass


class UnknownRole(DynaSlideError):
    pass


# --- agent pipeline ----------------------------------------------------------

class DegenerateRect(DynaSlideError):
    pass


class ProviderError(DynaSlideError):
    pass


class SchemaViolation(DynaSlideError):
    pass


# --- benchmark builder --------------------------------------------------------

class NoApplicableTemplate(DynaSlideError):
    pass


class ConflictingTable(DynaSlideError):
    pass


class InsufficientSubtemplates(DynaSlideError):
    pass


class TooFewSubtemplates(DynaSlideError):
    pass


# --- evaluation -----------------------------------------------------------------

class IncompleteTrace(DynaSlideError):
    pass


class LengthMismatch(DynaSlideError):
    pass
