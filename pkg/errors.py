"""Exception and warning types shared by every module.

Errors fall in two families that the command line maps to exit codes:
input problems (2) and model preconditions (3).
"""


class CredenceError(Exception):
    """Base class for all engine errors."""


class InputError(CredenceError):
    exit_code = 2


class ModelPrecondition(CredenceError):
    exit_code = 3


class InvalidParam(InputError):
    """One or more parameter constraints are violated.

    Every violated constraint is listed, not just the first one found.
    """

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(f"InvalidParam({v})" for v in self.violations))


class SchemaError(InputError):
    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class ZeroProbabilityEvent(ModelPrecondition):
    def __init__(self, recommendation):
        self.recommendation = recommendation
        super().__init__(f"recommendation '{recommendation}' has probability zero")


class ResentmentRegime(ModelPrecondition):
    """Raised where k_return > k sends the consumer to a new expert instead."""


class NotResentment(ModelPrecondition):
    pass


class EpsilonTooLarge(ModelPrecondition):
    def __init__(self, epsilon, bound):
        self.epsilon = epsilon
        self.bound = bound
        super().__init__(f"epsilon={epsilon} is not below epsilon*={bound}")


class RegimeMismatch(ModelPrecondition):
    pass


class UndefinedThreshold(ModelPrecondition):
    def __init__(self, name, reason):
        self.name = name
        super().__init__(f"UndefinedThreshold({name}): {reason}")


class RegimeCrossing(ModelPrecondition):
    """A finite-difference step moved the point into another regime.

    Both side profiles are attached so callers can report them.
    """

    def __init__(self, below, above):
        self.below = below
        self.above = above
        super().__init__(
            f"perturbation crosses a regime boundary ({below.regime.value} -> {above.regime.value})"
        )


class NoEquilibriumFound(CredenceError):
    pass


class EmptyFOPURegion(UserWarning):
    pass


class BoundaryAmbiguity(UserWarning):
    pass
