"""Empirical neural tangent kernel laboratory.

Trains small networks under standard, linearized and centered dynamics, with
or without PGD adversarial training, and measures how the empirical NTK
evolves.
"""

__version__ = "0.1.0"
