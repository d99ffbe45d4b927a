"""Exception types shared across the package."""


class RsmdidError(Exception):
    """Base class; the CLI maps every subclass to a nonzero exit code."""

    exit_code = 1


class ConfigError(RsmdidError):
    exit_code = 2


class DataError(RsmdidError):
    exit_code = 3


class MissingData(DataError):
    def __init__(self, unit, time, name):
        self.unit, self.time, self.name = unit, time, name
        super().__init__(f"missing value for unit={unit!r} time={time} variable={name!r}")


class DuplicateRow(DataError):
    def __init__(self, unit, time, name):
        self.unit, self.time, self.name = unit, time, name
        super().__init__(f"duplicate row for unit={unit!r} time={time} variable={name!r}")


class BadExposure(DataError):
    def __init__(self, unit, value):
        self.unit, self.value = unit, value
        super().__init__(f"exposure time {value!r} for unit {unit!r} lies outside the panel")


class EmptyDesign(RsmdidError):
    exit_code = 4


class TruncatedHorizon(RsmdidError):
    exit_code = 4

    def __init__(self, set_id):
        self.set_id = set_id
        super().__init__(f"matched set {set_id} has no outcomes for the full horizon")


class DomainError(RsmdidError, ValueError):
    exit_code = 2


class GroupOverlap(RsmdidError):
    exit_code = 4


class DegenerateComparison(RsmdidError):
    exit_code = 4

    def __init__(self, k):
        self.k = k
        super().__init__(f"comparison {k} has zero null variance")


class SplitError(RsmdidError):
    exit_code = 4


class UnknownCovariate(RsmdidError, NameError):
    exit_code = 2
