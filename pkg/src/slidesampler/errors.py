"""Exception hierarchy shared across the package."""


class SlideSamplerError(Exception):
    """Base class for all package errors."""


class ParseError(SlideSamplerError):
    """A file could not be parsed into the expected structure."""


class ValidationError(SlideSamplerError):
    """One or more invariants were violated.

    ``problems`` holds one human-readable line per offending item so callers
    can report every violation at once instead of stopping at the first.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class EmptySelection(SlideSamplerError):
    pass


class NoEligibleSeeds(SlideSamplerError):
    def __init__(self, cls_name):
        self.cls_name = cls_name
        super().__init__(f"no eligible seed cells for class {cls_name!r}")


class NoTileForClass(SlideSamplerError):
    def __init__(self, cls_name):
        self.cls_name = cls_name
        super().__init__(f"no sub-image tile contains class {cls_name!r}")


class OutOfBounds(SlideSamplerError):
    pass


class MissingRaster(SlideSamplerError):
    pass


class PlacementOverflow(SlideSamplerError):
    pass


class LearnerFailure(SlideSamplerError):
    def __init__(self, message, epoch=None, batch=None):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"{message} (epoch={epoch}, batch={batch})")


class TransportError(SlideSamplerError):
    pass


class AuthError(SlideSamplerError):
    pass


class SchemaError(SlideSamplerError):
    pass


class PartialUpload(SlideSamplerError):
    def __init__(self, message, accepted):
        self.accepted = accepted
        super().__init__(f"{message}; {len(accepted)} detections accepted before failure")
