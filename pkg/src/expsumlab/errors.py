"""Exception types shared across modules."""


class ExpsumlabError(Exception):
    pass


class QuadratureFailure(ExpsumlabError):
    """Certified error bound could not reach the requested tolerance."""


class StepSizeUnderflow(ExpsumlabError):
    """Adaptive integrator drove the step below the resolvable floor."""


class NotSymmetric(ExpsumlabError):
    pass


class IllConditioned(ExpsumlabError):
    pass


class DegreeZero(ExpsumlabError):
    pass


class DomainError(ExpsumlabError):
    pass


class Overflow(ExpsumlabError):
    pass


class WFloorHit(ExpsumlabError):
    """A model rate was driven to the positivity floor during a flow."""


class Diverged(ExpsumlabError):
    pass


class CapExceeded(ExpsumlabError):
    def __init__(self, message, best_error=None):
        super().__init__(message)
        self.best_error = best_error


class AnchorNotCritical(ExpsumlabError):
    pass


class NoNondegeneratePointFound(ExpsumlabError):
    pass


class DecayViolation(ExpsumlabError):
    pass
