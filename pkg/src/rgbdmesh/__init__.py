"""RGB-D human mesh recovery at desk scale.

Synthetic-data reimplementation of a two-stream (color + depth) body-mesh
regressor: a minimal reverse-mode autodiff engine, an analytic articulated
body model, weak-perspective projection, depth-ranking supervision, a
keypoint-to-body-parameter constraint generator, and a fusion regressor
trained with probabilistic stream dropout.
"""

__version__ = "0.1.0"
