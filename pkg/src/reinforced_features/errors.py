"""Exception hierarchy shared by every module."""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class DegenerateConfiguration(PipelineError):
    pass


class NoRealSolution(PipelineError):
    pass


class CheiralityAmbiguous(PipelineError):
    pass


class ParallelRays(PipelineError):
    pass


class DegenerateLine(PipelineError):
    pass


class NotEnoughMatches(PipelineError):
    pass


class AllHypothesesDegenerate(PipelineError):
    pass


class ShapeMismatch(PipelineError, ValueError):
    pass


class OutOfBounds(PipelineError, ValueError):
    pass


class StaleCache(PipelineError):
    pass


class InvalidDistribution(PipelineError, ValueError):
    pass


class EmptyCandidates(PipelineError):
    pass


class NonFiniteGradient(PipelineError):
    def __init__(self, iteration: int):
        super().__init__(f"non-finite gradient at iteration {iteration}")
        self.iteration = iteration


class GenerationFailed(PipelineError):
    pass


class FormatError(PipelineError):
    pass


class EmptyInput(PipelineError, ValueError):
    pass


class NoMatches(PipelineError):
    pass
