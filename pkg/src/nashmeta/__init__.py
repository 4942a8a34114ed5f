"""Fair example reweighting by bargaining over group hypergradients."""

__version__ = "0.1.0"
