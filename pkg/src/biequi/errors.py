"""Exception types raised across the registration pipeline."""


class BiequiError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatch(BiequiError, ValueError):
    pass


class DegenerateConfiguration(BiequiError):
    """Point sets are collinear or coincident; no unique rigid fit exists."""


class DegenerateSpectrum(BiequiError):
    """Singular values are too close for the SVD factors to be well defined."""


class NonConvergence(BiequiError):
    pass


class EmptyLevel(BiequiError):
    pass


class KTooLarge(BiequiError, ValueError):
    pass


class FormatError(BiequiError):
    pass


class UnsupportedEncoding(FormatError):
    pass


class RowSumViolation(BiequiError, ValueError):
    pass


class EmptyFeatures(BiequiError, ValueError):
    pass


class IndexOutOfRange(BiequiError, IndexError):
    pass


class NoValidCandidate(BiequiError):
    pass


class EmptyCorrespondences(BiequiError, ValueError):
    pass


class IncompleteGrid(BiequiError, ValueError):
    pass


class OverlapInfeasible(BiequiError):
    pass
