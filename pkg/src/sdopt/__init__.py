"""Higher-order stochastic dominance: verification and portfolio optimization."""

from sdopt.errors import (
    DimensionError,
    InvalidInputError,
    InvalidOrderError,
    UnsupportedOrderError,
)
from sdopt.scenario import (
    Order,
    PortfolioWeights,
    ScenarioMatrix,
    ScenarioVector,
    equal_weight_benchmark,
    essinf,
    esssup,
    partial_moment_norm,
    portfolio_returns,
    upper_partial_moment,
)

__all__ = [
    "DimensionError",
    "InvalidInputError",
    "InvalidOrderError",
    "UnsupportedOrderError",
    "Order",
    "PortfolioWeights",
    "ScenarioMatrix",
    "ScenarioVector",
    "equal_weight_benchmark",
    "essinf",
    "esssup",
    "partial_moment_norm",
    "portfolio_returns",
    "upper_partial_moment",
]

__version__ = "0.1.0"
