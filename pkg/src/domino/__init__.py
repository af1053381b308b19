"""Default contagion with domino effects: first-passage analytics and simulation."""

from .model import FirmParams, ModelKind, Portfolio, load_portfolio, validate_portfolio

__all__ = ["FirmParams", "ModelKind", "Portfolio", "load_portfolio", "validate_portfolio"]
