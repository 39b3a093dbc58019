"""Exception hierarchy shared across the package.

Every error carries a stable ``code`` string that the CLI serializes into
its machine-readable error objects.
"""

from __future__ import annotations


class RichIVError(Exception):
    """Base class for all errors raised by this package."""

    code = "error"

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.context = context


# --- data validation ---------------------------------------------------


class EmptyData(RichIVError):
    code = "empty-data"


class RaggedColumns(RichIVError):
    code = "ragged-columns"


class NonBinaryColumn(RichIVError):
    code = "non-binary-column"


class NonFinite(RichIVError):
    code = "non-finite"


class RankDeficient(RichIVError):
    code = "rank-deficient"


class LengthMismatch(RichIVError):
    code = "length-mismatch"


# --- kernels / smoothing -----------------------------------------------


class OddOrder(RichIVError):
    code = "odd-order"


class OrderOutOfRange(RichIVError):
    code = "order-out-of-range"


class DegenerateColumn(RichIVError):
    code = "degenerate-column"


class DimensionMismatch(RichIVError):
    code = "dimension-mismatch"


class DegenerateDenominator(RichIVError):
    """Some evaluation points had a kernel denominator too close to zero."""

    code = "degenerate-denominator"


class AllDenominatorsDegenerate(DegenerateDenominator):
    code = "all-denominators-degenerate"


# --- first-step fitting -------------------------------------------------


class Separation(RichIVError):
    code = "separation"


class NotConverged(RichIVError):
    code = "not-converged"


class PredictUnseenCell(RichIVError):
    code = "predict-unseen-cell"


class NonFiniteLoss(RichIVError):
    code = "non-finite-loss"


# --- estimation ----------------------------------------------------------


class SingularMoment(RichIVError):
    """The instrument/regressor cross-moment matrix is numerically singular."""

    code = "singular-moment"


class CollinearControlFunction(RichIVError):
    code = "collinear-control-function"


class FoldTooSmall(RichIVError):
    code = "fold-too-small"


# --- inference -----------------------------------------------------------


class SingularG(RichIVError):
    code = "singular-g"


class SingleCluster(RichIVError):
    code = "single-cluster"


# --- simulation / orchestration ------------------------------------------


class AllFailed(RichIVError):
    code = "all-failed"


class InvalidConfig(RichIVError):
    code = "invalid-config"
