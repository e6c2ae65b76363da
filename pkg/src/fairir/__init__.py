"""Exposure-aware related item recommendation toolkit.

Builds related item networks (RINs) from rating data, measures how the random-surfer
exposure they induce departs from a desired exposure, and rewires them with three
interventions: fair representation learning, fair similarity and capacity-constrained
neighbour selection.
"""

__version__ = "0.1.0"
