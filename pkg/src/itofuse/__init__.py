"""iToF + RGB depth fusion toolkit: simulation, reprojection, fusion network, evaluation."""

__version__ = "0.1.0"
