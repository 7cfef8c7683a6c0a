"""Constrained part-based alignment: tree-shaped similarity constellations
over low-rank part appearance dictionaries, with sparse-error robust fitting.
"""

from cpalign.geometry import (
    SimTransform,
    TransformSet,
    apply_transform,
    compose,
    from_box,
    invert,
    mean_transform,
)

__version__ = "0.1.0"

__all__ = [
    "SimTransform",
    "TransformSet",
    "apply_transform",
    "compose",
    "from_box",
    "invert",
    "mean_transform",
    "__version__",
]
