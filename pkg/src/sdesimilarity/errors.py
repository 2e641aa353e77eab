"""Exception types shared across the package."""


class SdesimError(Exception):
    """Base class for all package-specific failures."""


class DimensionMismatch(SdesimError):
    pass


class DivergedTrajectory(SdesimError):
    """A simulated state exceeded the blow-up bound or became non-finite."""

    def __init__(self, path_index, t, message=None):
        self.path_index = path_index
        self.t = t
        super().__init__(
            message or f"trajectory diverged on path {path_index} at t={t:.6g}"
        )


class GridMiss(SdesimError):
    """Requested time is not a point of the simulation grid."""


class SingularMap(SdesimError):
    pass


class DegenerateSamples(SdesimError):
    """Defect is numerically zero almost everywhere; nothing to regress on."""


class HorizonTooShort(SdesimError):
    pass


class AllRestartsNonInvertible(SdesimError):
    pass


class StepTooLarge(SdesimError):
    pass


class IllConditionedRegression(SdesimError):
    pass


class SingularDenominator(SdesimError):
    def __init__(self, x, message=None):
        self.x = x
        super().__init__(message or f"denominator vanishes near x={x:.6g}")


class SingularDiffusion(SdesimError):
    pass


class NotAFixedPoint(SdesimError):
    pass


class UnsupportedDichotomy(SdesimError):
    pass


class ContractionViolated(SdesimError):
    pass


class AllPathsExitImmediately(SdesimError):
    pass


class ConfigError(SdesimError):
    """Base class for configuration problems (exit code 1 in the CLI)."""


class ParseError(ConfigError):
    pass


class ValidationError(ConfigError):
    """Carries the full list of validation problems, not just the first."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class ExtrapolationWarning(UserWarning):
    """A tabulated map was evaluated outside its knot range."""
