"""Bottom-up video instance segmentation assembly.

Dense per-frame predictions (semantic probabilities, a center heatmap and
intra/inter-frame offsets) are turned into tracked instances: pixels are
grouped around heatmap peaks, each instance is moved by the mean offset
residual and matched against several reference frames.
"""

from .core import (
    FramePrediction,
    IdentityMap,
    InstanceFlow,
    InstanceRecord,
    OffsetField,
    ScalarMap,
    SemanticProbMap,
    foreground_mask,
    warp_coordinate,
)
from .errors import (
    BoundsError,
    DimensionError,
    InstflowError,
    ManifestError,
    MapFormatError,
    MapTruncatedError,
    MissingFlowError,
    MissingInstanceError,
    SpecError,
)
from .evaluation import Track, average_precision, evaluate_videos, identity_switches, st_iou
from .flow import flow_avg_baseline, instance_flow, iou_propagation_match
from .grouping import Center, GroupingParams, extract_centers, group_pixels, segment_frame
from .labeling import TrackLabel, finalize_labels, frame_class_evidence, instance_score
from .losses import LossComponents, LossWeights, center_loss, offset_loss, semantic_loss, shape_loss, total_loss
from .matching import (
    FIRST_PLUS_3,
    MatchingParams,
    ReferencePolicy,
    TrackerState,
    distance_matrix,
    match_instances,
    propagate,
    select_references,
)
from .parallel import Workers
from .pipeline import PipelineParams, PipelineResult, SequenceTracker, bench, run_pipeline
from .synth import NoiseSpec, SceneSpec, ShapeSpec, generate_sequence, perturb, random_scene, synthesize

__version__ = "0.1.0"
