"""Gradient-flow phase-field dynamics by minimizing movements.

Grid solvers, energy-based physics-informed losses, and DeepONet explicit
time-steppers for relaxation, Allen-Cahn and Cahn-Hilliard dynamics.
"""

__version__ = "0.1.0"
