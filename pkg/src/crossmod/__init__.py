"""Generation-aligned understanding data, synthesis metrics and a desk-scale two-stage trainer."""

__version__ = "0.1.0"
