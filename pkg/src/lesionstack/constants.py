"""Constants and defaults used across the package."""

from typing import Final

MODALITIES: Final = ("T2w", "ADC", "DWI", "Ktrans")
COMPOSITE_MODALITIES: Final = ("T2w", "ADC", "DWI")
SOLO_MODALITIES: Final = ("Ktrans",)

# Grid unification.
TARGET_INPLANE_MM: Final = 0.5
TARGET_SLICE_MM: Final = 3.0
CROP_SIZE: Final = 320
STD_EPSILON: Final = 1e-8

# Patch retrieval; geometries are (height, width, depth).
PATCH_GEOMETRIES: Final = ((42, 42, 1), (48, 48, 3), (64, 64, 3), (96, 96, 3))
PATCHES_PER_STUDY: Final = 100
FINDING_BOOST: Final = 10.0
POSITIVE_RADIUS_MM: Final = 5.0

# Stream architecture.
GROWTH_RATE: Final = 12
LAYERS_PER_BLOCK: Final = 4
COMPRESSION: Final = 0.5
DROPOUT_RATE: Final = 0.2
HEAD_WIDTH: Final = 64
BN_MOMENTUM: Final = 0.9
BN_EPSILON: Final = 1e-5
OUTPUT_INIT_GAIN: Final = 0.1

# Optimisation.
LEARNING_RATE: Final = 2e-4
NESTEROV_MOMENTUM: Final = 0.9
WEIGHT_DECAY: Final = 1e-5
MAX_EPOCHS: Final = 200
BATCH_SIZE: Final = 72
PATIENCE: Final = 20
FOLDS: Final = 5

# Focal loss.
FOCAL_ALPHA: Final = 0.5
FOCAL_GAMMA: Final = 1.5

# Stacked generalization.
META_HIDDEN_WIDTH: Final = 16
DECISION_THRESHOLD: Final = 0.5

# File formats.
VOLUME_HEADER_SUFFIX: Final = ".json"
VOLUME_BLOB_SUFFIX: Final = ".f32"
FLOAT_DTYPE: Final = "f32le"
VOXEL_ORDER: Final = "zyx"
CHECKPOINT_FORMAT_VERSION: Final = 1
FINDINGS_HEADER: Final = (
    "subject_id",
    "finding_id",
    "pos_x_mm",
    "pos_y_mm",
    "pos_z_mm",
    "clin_sig",
)
PREDICTIONS_HEADER: Final = (
    "subject_id",
    "finding_id",
    "clin_sig_probability",
)

TEMP_DIR_SUFFIX: Final = "_lesionstack_tmp"
ERROR_LOG_FILENAME: Final = "lesionstack_error.log"
