"""Exception hierarchy shared across the package.

Grouped by surface: file/format errors, configuration errors, numeric
failures, and pipeline-state errors.  The CLI maps these groups onto
exit codes (config -> 2, data -> 3, numeric -> 4).
"""


class XcpipeError(Exception):
    """Base class for all package errors."""


# --- data / format errors (CLI exit code 3) ---

class DataError(XcpipeError):
    pass


class MalformedHeader(DataError):
    pass


class IndexOutOfRange(DataError):
    def __init__(self, line, index, kind="feature"):
        super().__init__(f"line {line}: {kind} id {index} out of range")
        self.line = line
        self.index = index
        self.kind = kind


class NonFiniteValue(DataError):
    def __init__(self, line, detail=""):
        super().__init__(f"line {line}: non-finite or non-positive value {detail}")
        self.line = line


class DuplicateFeature(DataError):
    def __init__(self, line, index):
        super().__init__(f"line {line}: duplicate feature id {index}")
        self.line = line
        self.index = index


class MissingPropensity(DataError):
    pass


class LabelSpaceMismatch(DataError):
    pass


class UncoveredLabel(DataError):
    pass


class MissingShortlist(DataError):
    def __init__(self, point):
        super().__init__(f"no shortlist for point {point}")
        self.point = point


# --- configuration errors (CLI exit code 2) ---

class ConfigError(XcpipeError):
    pass


class InvalidParam(ConfigError):
    pass


class ShapeMismatch(ConfigError):
    pass


class DimMismatch(ConfigError):
    pass


class DegenerateInput(ConfigError):
    pass


class StagePrereqMissing(ConfigError):
    pass


class IncompleteBundle(ConfigError):
    pass


# --- numeric failures (CLI exit code 4) ---

class NumericError(XcpipeError):
    pass


class NonFiniteLoss(NumericError):
    def __init__(self, stage, epoch, batch, value):
        super().__init__(
            f"{stage}: non-finite loss {value!r} at epoch {epoch}, batch {batch}")
        self.stage = stage
        self.epoch = epoch
        self.batch = batch
        self.value = value


class BoundViolated(NumericError):
    """A proved inequality failed empirically: implementation bug."""

    def __init__(self, name, margin, detail=""):
        super().__init__(f"bound '{name}' violated by {margin:.3e} {detail}")
        self.name = name
        self.margin = margin
