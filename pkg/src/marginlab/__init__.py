"""marginlab: margin-based softmax heads, analytic gradients, and a
synthetic benchmark for quality-adaptive embedding training."""

__version__ = "0.1.0"
