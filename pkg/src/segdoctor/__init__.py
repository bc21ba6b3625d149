"""Plug-in treatment of encoder-decoder segmentation models.

Two auxiliary penalties are added to the usual cross-entropy while
fine-tuning: a cosine pull of deep encoder features toward their class
centroid, and a superpixel reconstruction loss on shallow encoder features.
"""

from .adapter import ReferenceUNet, TapSpec, TappedModel, attach, load_checkpoint, reference_unet, save_checkpoint
from .category import CategoryLossResult, CentroidTracker, category_loss, compute_centroids
from .core import (
    IGNORE_INDEX,
    ClassCentroids,
    ConfigError,
    DataError,
    FeatureMap,
    LabelMap,
    NumericError,
    TreatmentConfig,
    ValidationError,
    downsample_labels,
    one_hot,
)
from .diagnosis import ErrorDecomposition, boundary_f_score, decompose_errors, emit_report, gt_boundary_mask
from .superpixel import (
    SuperpixelGrid,
    SuperpixelHead,
    SuperpixelLossResult,
    build_head,
    normalize_associations,
    reconstruct,
    superpixel_loss,
    superpixel_treatment,
)
from .training import DataSpec, MetricsReport, RunConfig, ablate, evaluate, total_loss, train

__version__ = "0.1.0"
