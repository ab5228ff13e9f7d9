"""Exception taxonomy shared by all modules.

``exit_code`` feeds the CLI: 1 for input/validation problems, 2 for
failures that occur after inputs were accepted.
"""


class SphereProxyError(Exception):
    exit_code = 1


class ParseError(SphereProxyError):
    """Malformed mesh/asset file."""


class FaceIndexError(SphereProxyError):
    """Face references a vertex index outside the vertex array."""


class DegenerateMesh(SphereProxyError):
    """Mesh has zero spatial extent."""


class NotWatertight(SphereProxyError):
    """Operation requires a closed, consistently wound surface."""


class MissingBlendWeights(SphereProxyError):
    """Mesh has no per-vertex blend weights."""


class DimensionMismatch(SphereProxyError):
    """Array shapes of related inputs disagree."""


class ShapeMismatch(SphereProxyError):
    """Gradient arrays passed to a combinator have different shapes."""


class EmptyCalibration(SphereProxyError):
    """Pair-mask calibration received no poses."""


class MaskMismatch(SphereProxyError):
    """Pair mask was built for a different sphere count."""


class DegenerateBone(SphereProxyError):
    """Observed bone has (near) zero length."""


class ConfigError(SphereProxyError):
    """Invalid configuration value or unknown config key."""


class AssetMismatch(SphereProxyError):
    """Benchmark assets are inconsistent with each other."""


class SignUndecided(SphereProxyError):
    """Ray-parity votes stayed tied or degenerate after all retries."""

    exit_code = 2


class RayDegenerate(SphereProxyError):
    """Ray casts kept grazing edges/vertices after all retries."""

    exit_code = 2


class NonFiniteLoss(SphereProxyError):
    """Optimization produced NaN/inf; aborted with partial report."""

    exit_code = 2
