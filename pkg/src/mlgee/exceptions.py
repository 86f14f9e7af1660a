"""Exception and warning types raised across the package."""


class MlgeeError(Exception):
    """Base class for all package-specific errors."""


class DataError(MlgeeError):
    """Problems with the input data itself (exit code 3 in the CLI)."""


class TreatmentNotClusterConstant(DataError):
    def __init__(self, cluster_id):
        self.cluster_id = cluster_id
        super().__init__(f"treatment is not constant within cluster {cluster_id!r}")


class MissingCovariateCell(DataError):
    def __init__(self, row, column):
        self.row = row
        self.column = column
        super().__init__(f"missing covariate value at row {row}, column {column!r}")


class DuplicateUnitId(DataError):
    def __init__(self, unit_key):
        self.unit_key = unit_key
        super().__init__(f"duplicate unit id {unit_key!r}")


class BadOutcomeValue(DataError):
    def __init__(self, row, token):
        self.row = row
        self.token = token
        super().__init__(
            f"cannot parse outcome value {token!r} at row {row}; "
            "use a number, an empty cell, or NA for missing"
        )


class FormulaSyntaxError(MlgeeError):
    def __init__(self, message, position):
        self.position = position
        super().__init__(f"{message} (at position {position})")


class UnknownVariable(MlgeeError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"unknown variable {name!r}")


class LevelViolation(MlgeeError):
    """A formula references a variable that varies below the formula's level."""

    def __init__(self, name, level):
        self.name = name
        self.level = level
        super().__init__(
            f"variable {name!r} is not constant within each {level.value}; "
            f"a {level.value}-level model may not reference it"
        )


class DimensionMismatch(MlgeeError):
    pass


class NumericalError(MlgeeError):
    """Numerical failures in solvers (exit code 4 in the CLI)."""


class Separation(NumericalError):
    def __init__(self, bound):
        super().__init__(
            f"apparent separation: a coefficient exceeded {bound} during iteration"
        )


class SingularInformation(NumericalError):
    pass


class NotConverged(NumericalError):
    def __init__(self, message, trace=None):
        self.trace = trace
        super().__init__(message)


class NoInteriorSolution(NumericalError):
    """The calibration constraints admit no interior weight solution."""

    def __init__(self, message, boundary_margin=None):
        self.boundary_margin = boundary_margin
        super().__init__(message)


class ArmEmpty(NumericalError):
    def __init__(self, arm):
        self.arm = arm
        super().__init__(f"no observed outcomes in treatment arm {arm}")


class NonPositiveDefiniteCorrelation(NumericalError):
    pass


class MissingInput(MlgeeError):
    def __init__(self, method, what):
        self.method = method
        self.what = what
        super().__init__(f"method {method} requires {what}")


class AllReplicatesFailed(NumericalError):
    pass


class ConfigError(MlgeeError):
    """Invalid run configuration (exit code 2 in the CLI)."""


class TooFewPairsWarning(UserWarning):
    """Not enough observed within-group pairs to estimate a correlation."""
