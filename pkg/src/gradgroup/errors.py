"""Exception types.

Every error raised on purpose by the package derives from ``GradGroupError``
(itself a ``ValueError``), so callers can catch the whole family at once.
The CLI maps the families below onto its exit codes.
"""


class GradGroupError(ValueError):
    pass


# -- similarity / traces ----------------------------------------------------

class TraceError(GradGroupError):
    """Problem with gradient traces or a similarity matrix input."""


class DimensionMismatch(TraceError):
    pass


class DegenerateVector(TraceError):
    """A gradient vector whose norm is too small to define a direction."""

    def __init__(self, message, task=None, epoch=None):
        super().__init__(message)
        self.task = task
        self.epoch = epoch


class MissingTrace(TraceError):
    pass


class AsymmetricInput(TraceError):
    pass


class NegativeDistance(TraceError):
    pass


class UnknownLabel(TraceError):
    pass


# -- trainer ----------------------------------------------------------------

class ConfigError(GradGroupError):
    pass


class InconsistentDims(ConfigError):
    pass


class EmptyDataset(ConfigError):
    pass


# -- grouping ---------------------------------------------------------------

class GroupingError(GradGroupError):
    pass


class TaskNotInGroup(GroupingError):
    pass


class UncoveredTask(GroupingError):
    pass


class TooManyTasks(GroupingError):
    pass


class Infeasible(GroupingError):
    pass


# -- analysis ---------------------------------------------------------------

class LengthMismatch(GradGroupError):
    pass


class ZeroVariance(GradGroupError):
    pass


class LabelMismatch(GradGroupError):
    pass


class EmptyCorpus(GradGroupError):
    pass
