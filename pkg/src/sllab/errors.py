"""Exception hierarchy shared by all modules."""


class SllabError(Exception):
    """Base class for lab errors."""


class InvalidDimension(SllabError, ValueError):
    pass


class DegenerateTilt(SllabError):
    """Importance weights collapsed below the ESS floor."""

    def __init__(self, ess, floor=None):
        self.ess = float(ess)
        self.floor = floor
        super().__init__(f"effective sample size {self.ess:.3g} below floor {floor}")


class Divergence(SllabError):
    def __init__(self, step):
        self.step = int(step)
        super().__init__(f"non-finite state at step {self.step}")


class DimensionTooLarge(SllabError, ValueError):
    pass


class ConstructionFailed(SllabError):
    pass


class InvalidScale(SllabError, ValueError):
    pass


class ScheduleIntegrity(SllabError):
    pass


class InvalidH(SllabError, ValueError):
    pass


class GridBackendUnsupported(SllabError):
    pass


class PreconditionViolation(SllabError):
    pass


class ResolutionError(SllabError, ValueError):
    pass


class HypothesisViolation(SllabError):
    pass


class EmptyEnsemble(SllabError, ValueError):
    pass


class ConfigError(SllabError, ValueError):
    """Bad configuration; carries the offending key and line when known."""

    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        super().__init__(message)
