"""Contrastive flow matching on low-dimensional class-conditional data."""

from deltafm.schedule import Schedule, DomainError, SingularityError

__version__ = "0.1.0"

__all__ = ["Schedule", "DomainError", "SingularityError", "__version__"]
