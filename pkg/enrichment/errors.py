from typing import Optional


class EnrichmentError(Exception):
    """Base class for all enrichment-trial exceptions."""
    pass

class ConfigError(EnrichmentError):
    """Raised when a run configuration document is invalid."""
    pass

class ParameterError(EnrichmentError):
    """Raised when model parameters violate their constraints (e.g. non-PSD covariance)."""
    pass

class BoundaryError(EnrichmentError):
    pass

class NumericalError(EnrichmentError):
    """Base class for numerical failures."""
    pass

class DomainError(NumericalError):
    pass

class AccuracyError(NumericalError):
    def __init__(self, message: str, estimate: float):
        self.estimate = estimate
        super().__init__(f"{message} (best estimate {estimate!r})")

class BracketError(NumericalError):
    def __init__(self, lo: float, hi: float, f_lo: float, f_hi: float):
        self.lo, self.hi = lo, hi
        self.f_lo, self.f_hi = f_lo, f_hi
        super().__init__(f"No sign change on [{lo}, {hi}]: f(lo)={f_lo!r}, f(hi)={f_hi!r}")

class DerivativeError(NumericalError):
    pass

class DesignError(NumericalError):
    """Base class for failures while computing a design."""
    pass

class CalibrationError(DesignError):
    pass

class InfeasibleSpendError(DesignError):
    def __init__(self, spend: float, available: float, what: Optional[str] = None):
        self.spend = spend
        self.available = available
        label = f"{what} " if what else ""
        super().__init__(f"{label}spend {spend!r} exceeds available mass {available!r}")

class OrderingError(DesignError):
    pass

class SearchError(DesignError):
    pass

class PredictionError(DesignError):
    pass

class EstimationError(NumericalError):
    """Base class for estimator failures; the trial engine flags the replicate invalid."""
    pass

class NonIdentifiableError(EstimationError):
    pass

class IneligibleMarkerError(EstimationError):
    pass

class LikelihoodError(EstimationError):
    pass
