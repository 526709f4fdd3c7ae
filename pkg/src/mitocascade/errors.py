"""Exception hierarchy shared by all pipeline modules."""


class MitoCascadeError(Exception):
    """Base class for every error raised by this package."""


class InsufficientTissue(MitoCascadeError):
    """Too few pixels above the optical-density threshold to estimate stains."""


class DegenerateStains(MitoCascadeError):
    """Stain directions are (nearly) collinear or otherwise unusable."""


class DimensionMismatch(MitoCascadeError):
    """An image does not match the dimensions a grid or manifest expects."""


class TooFewImages(MitoCascadeError):
    pass


class DuplicateId(MitoCascadeError):
    pass


class BadFoldIndex(MitoCascadeError):
    pass


class ImageSmallerThanCrop(MitoCascadeError):
    pass


class ImageIdMismatch(MitoCascadeError):
    pass


class ObserveAfterStop(MitoCascadeError):
    """An early-stopping state received an observation after it fired."""


class AdapterFailure(MitoCascadeError):
    """An external stage adapter exited nonzero or produced malformed output.

    ``stderr`` holds whatever the adapter wrote to its error stream so the
    orchestrator can persist it into the run manifest.
    """

    def __init__(self, message, stderr=""):
        super().__init__(message)
        self.stderr = stderr


class CountMismatch(AdapterFailure):
    """A classifier adapter returned a different number of scores than crops."""
