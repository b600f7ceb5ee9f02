"""Exception hierarchy for fringeforge.

All library-raised errors derive from :class:`FringeForgeError` so callers can
catch scanner-simulation failures without masking unrelated bugs.
"""


class FringeForgeError(Exception):
    """Base class for all fringeforge errors."""


class InvalidConfig(FringeForgeError):
    """A configuration value violates a documented precondition."""


class NonOrthonormalRotation(FringeForgeError):
    """A rotation matrix is too far from orthonormal to repair safely."""


class BehindCamera(FringeForgeError):
    """A point projects to non-positive depth in the camera frame."""


class DegenerateGeometry(FringeForgeError):
    """A triangulation system is singular or too ill-conditioned to trust."""


class ShapeMismatch(FringeForgeError):
    """Array arguments disagree in shape where they must match."""


class DecodeFailure(FringeForgeError):
    """A gray-code word is inconsistent with the wrapped phase.

    Per-pixel failures during unwrapping are counted and masked rather than
    raised; this class is raised only when a whole decode is unusable.
    """


class OutOfView(FringeForgeError):
    """A surface point falls outside the projector (or camera) frustum."""


class FitDiverged(FringeForgeError):
    """A model fit ended with residuals above its acceptance threshold."""


class InvalidK(FringeForgeError):
    """Requested sample count is impossible for the given point cloud."""


class DegenerateCloud(FringeForgeError):
    """A point cloud has (near-)zero spatial extent and cannot be normalized."""


class TrainingDiverged(FringeForgeError):
    """A training loss became non-finite."""


class NoOverlap(FringeForgeError):
    """Two point clouds share no source pixels, so they cannot be aligned."""


class NonFiniteGradient(FringeForgeError):
    """An optimization step produced a non-finite gradient."""


class AllStepsFailed(FringeForgeError):
    """No trade-off weight in a search interval produced a successful attack."""


class ConflictingWrites(FringeForgeError):
    """Two camera pixels demanded different intensities for one projector pixel.

    Encoding resolves conflicts deterministically and reports a count; this
    class exists for callers that want to treat any conflict as fatal.
    """
