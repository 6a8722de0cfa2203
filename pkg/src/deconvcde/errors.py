"""Exception types raised across the package.

Every exception carries a short machine-readable ``code`` used by the CLI
as the prefix of its single-line error message.
"""


class DeconvError(Exception):
    code = "ERROR"


class EmptySample(DeconvError, ValueError):
    code = "EMPTY_SAMPLE"


class UnsupportedKernel(DeconvError, ValueError):
    code = "UNSUPPORTED_KERNEL"


class DegenerateDesign(DeconvError, ValueError):
    code = "DEGENERATE_DESIGN"


class InsufficientData(DeconvError, ValueError):
    code = "INSUFFICIENT_DATA"


class DegenerateWeights(DeconvError, ValueError):
    code = "DEGENERATE_WEIGHTS"


class AllNonFinite(DeconvError, ValueError):
    code = "ALL_NON_FINITE"


class ZeroVariance(DeconvError, ValueError):
    code = "ZERO_VARIANCE"


class GridTooCoarse(DeconvError, ValueError):
    code = "GRID_TOO_COARSE"


class GridMismatch(DeconvError, ValueError):
    code = "GRID_MISMATCH"


class QuadratureFailure(DeconvError, RuntimeError):
    code = "QUADRATURE_FAILURE"


class NeedReplicates(DeconvError, ValueError):
    code = "NEED_REPLICATES"


class MalformedCsv(DeconvError, ValueError):
    code = "MALFORMED_CSV"


class MissingSigmaU(DeconvError, ValueError):
    code = "MISSING_SIGMA_U"


class BadScenario(DeconvError, ValueError):
    code = "BAD_SCENARIO"
