"""Exception types shared across the package.

Every error raised on purpose derives from MssError so callers can catch
the package's failures without catching programming mistakes.
"""


class MssError(Exception):
    """Base class for all deliberate failures."""


class DimensionMismatch(MssError):
    """An array argument has the wrong length or shape."""


class BoundViolation(MssError):
    """A parameter value lies outside its declared support."""


class NonFiniteDensity(MssError):
    """A log-density or gradient evaluated to nan/inf where it must not."""


class NonPositiveVariance(MssError):
    """A variance or scale parameter is zero or negative."""


class NonPositiveAmplitude(MssError):
    """A power-law amplitude is zero or negative."""


class DegenerateFrequencies(MssError):
    """Fewer than two distinct frequencies; the affine constraint map
    from (amplitude, slope) to per-bin log-power is not injective."""


class DegenerateSpan(MssError):
    """Observation times span zero or negative duration."""


class JitterCollision(MssError):
    """Time jitter produced a non-increasing time grid."""


class InitOutOfSupport(MssError):
    """A chain was initialised at a point with non-finite log density."""


class AllDivergent(MssError):
    """More than half of warmup trajectories diverged; the target is
    pathological for the current kernel (classic funnel symptom)."""


class UnsupportedModel(MssError):
    """A reparameterisation was requested for a model without a rule."""


class NumericalSingular(MssError):
    """A matrix factorisation failed (not positive definite)."""


class TooFewSamples(MssError):
    """Not enough samples to fit or estimate the requested quantity."""

class NonFiniteLoss(MssError):
    """Flow training produced a non-finite objective."""


class DegenerateChain(MssError):
    """A chain is constant (zero variance), so ESS/rank statistics
    are undefined."""


class CoverageError(MssError):
    """Too many samples fall outside the comparison grid."""


class ConvergenceGateFailed(MssError):
    """Stage-1 draws failed the R-hat / ESS gates."""


class FormatError(MssError):
    """A file on disk does not match the expected schema."""


class VersionMismatch(MssError):
    """A file on disk declares an unsupported schema version."""
