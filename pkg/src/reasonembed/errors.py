"""Exception hierarchy for the whole package.

Every failure mode named in a module contract maps to one class here so
callers (and the CLI exit-code logic) can catch by meaning instead of
string-matching messages.
"""


class ReasonembedError(Exception):
    """Base class for all package errors."""


# -- numerics ---------------------------------------------------------------

class ShapeMismatch(ReasonembedError):
    pass


class ZeroNorm(ReasonembedError):
    pass


class NonFinite(ReasonembedError):
    pass


class NotScalar(ReasonembedError):
    pass


class DetachedTape(ReasonembedError):
    """backward() was asked to run on a tensor with no recorded history."""


class TapeConsumed(ReasonembedError):
    """backward() ran twice over the same recorded graph."""


class GradAlreadyPresent(ReasonembedError):
    """A leaf already holds a gradient and accumulate mode was not requested."""


# -- model ------------------------------------------------------------------

class SequenceTooLong(ReasonembedError):
    pass


class UnknownToken(ReasonembedError):
    pass


class UnknownProjection(ReasonembedError):
    pass


class EmptyTrainableSet(ReasonembedError):
    pass


class CheckpointError(ReasonembedError):
    """Corrupt, unreadable, or version-incompatible checkpoint container."""


# -- gridworld / traces -----------------------------------------------------

class InfeasibleInstance(ReasonembedError):
    """No grid satisfying the sampled template survived the retry budget."""


class MalformedTrace(ReasonembedError):
    """Trace text missing or unbalanced <think> tags / final-answer marker."""


class UnsupportedTask(ReasonembedError):
    """Task kind outside the suite's closed set."""


class OutOfVocabulary(ReasonembedError):
    """Text contains a word outside the closed vocabulary."""


# -- reasoner -----------------------------------------------------------------

class EmptyMask(ReasonembedError):
    """An example contributes no completion positions to the loss."""


class ContextOverflow(ReasonembedError):
    """Prompt leaves no room for even one generated token."""


# -- embedder / heads -------------------------------------------------------

class TooShortForSecondLast(ReasonembedError):
    pass


class NonPositiveTemperature(ReasonembedError):
    pass


class EmptyDataset(ReasonembedError):
    pass


class MissingReasoner(ReasonembedError):
    """ecr_source=student requires a reasoner checkpoint."""


class BadHeadConfig(ReasonembedError):
    pass


class MissingLayerStates(ReasonembedError):
    """Head asked for backbone hidden layers the forward pass did not produce."""


# -- eval -------------------------------------------------------------------

class NoPositive(ReasonembedError):
    """Scored pool does not contain the query's positive target."""


class TooFewPoints(ReasonembedError):
    pass


class TooManyPointsForExact(ReasonembedError):
    pass


class WriteFailure(ReasonembedError):
    """Report or plot file could not be written."""


# -- cli / config -----------------------------------------------------------

class ConfigInvalid(ReasonembedError):
    pass


class UpstreamArtifactMissing(ReasonembedError):
    pass


class OutputDirLocked(ReasonembedError):
    """Another process holds the lock file for this output directory."""
