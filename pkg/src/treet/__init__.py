"""Neural transfer-entropy estimation with fixed-past causal attention."""

__version__ = "0.1.0"
