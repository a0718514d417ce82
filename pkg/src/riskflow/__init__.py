"""Risk-averse and distributionally robust truncated-logit traffic equilibria."""

__version__ = "0.1.0"
