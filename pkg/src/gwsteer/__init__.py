"""Data-driven chance-constrained density steering with a Gromov-Wasserstein terminal cost.

The package collects excitation data from an unknown linear plant, assembles
the steering problem as a difference-of-convex program over data-driven
decision variables, solves it by successive convex (conic) subproblems, and
validates the synthesized mixture feedback policy by Monte Carlo rollout.
"""

__version__ = "0.1.0"
