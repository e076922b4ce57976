"""Exception hierarchy shared by all carpose modules."""


class CarposeError(Exception):
    """Base class for every error raised by this package."""


class PointBehindCameraError(CarposeError):
    pass


class NonPositiveDepthError(CarposeError):
    pass


class ZeroRayError(CarposeError):
    pass


class GimbalLockError(CarposeError):
    pass


class NoLabelledKeypointsError(CarposeError):
    pass


class InsufficientCorrespondencesError(CarposeError):
    pass


class DegenerateConfigurationError(CarposeError):
    pass


class NoConsensusError(CarposeError):
    pass


class NoModelAcceptedError(CarposeError):
    pass


class EmptyMeshError(CarposeError):
    pass


class EmptySilhouetteError(CarposeError):
    pass


class UnknownShapeError(CarposeError, KeyError):
    pass


class MixedImageIdsError(CarposeError):
    pass


class ZeroAttentionError(CarposeError):
    pass


class EmptyMaskError(CarposeError):
    pass


class PlacementError(CarposeError):
    pass


class SchemaError(CarposeError):
    """A file parsed but does not match the expected schema.

    The message always names the offending field path, e.g.
    ``images[0].cars[3].keypoints``.
    """


class UnknownVersionError(SchemaError):
    pass


class ParseError(SchemaError):
    """A file could not be parsed at all (message carries line and column)."""
