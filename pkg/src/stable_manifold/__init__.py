"""Neural-network approximation of stable manifolds of stationary HJB equations."""

__version__ = "0.1.0"
