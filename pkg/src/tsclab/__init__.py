"""Traffic signal control with a hierarchical graph-attention encoder and weight-tied agents."""

__version__ = "0.1.0"
