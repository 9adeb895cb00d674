"""Device-free human pose estimation from WiFi CSI mutual-sensing networks.

The pipeline: a mutual-sensing network of WiFi sensors streams per-path
channel-state-information (CSI) frames over UDP; frames are reassembled,
paired with 17-keypoint skeleton labels, denoised by sparse adaptive
filtering, and regressed to keypoint coordinates by a shared-backbone
multi-student network trained with a Sinkhorn optimal-transport
distillation loss. Evaluation reports PCK at torso-normalized thresholds.
"""

__version__ = "0.1.0"

from .datamodel import (
    CSIFrame,
    Dataset,
    KEYPOINT_NAMES,
    Sample,
    SensingTopology,
    SkeletonFrame,
    flatten,
    make_topology,
    path_count,
    synchronize,
)

__all__ = [
    "CSIFrame",
    "Dataset",
    "KEYPOINT_NAMES",
    "Sample",
    "SensingTopology",
    "SkeletonFrame",
    "flatten",
    "make_topology",
    "path_count",
    "synchronize",
    "__version__",
]
