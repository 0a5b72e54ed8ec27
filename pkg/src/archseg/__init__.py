"""Weakly-supervised multi-class vessel segmentation and arch-anomaly
classification on synthetic vascular phantoms.

Pipeline: atlas label propagation by deformable registration, an
attention-gated segmenter trained on mixed binary/multi-class supervision,
and a densely-connected anomaly classifier trained separately or jointly,
with surface-distance metrics, topology scoring, and rank statistics.
"""

from archseg.grid import (
    AffineTransform,
    DisplacementField,
    LabelMap,
    VesselScheme,
    Volume3D,
)

__version__ = "0.1.0"

__all__ = [
    "Volume3D",
    "LabelMap",
    "VesselScheme",
    "DisplacementField",
    "AffineTransform",
    "__version__",
]
