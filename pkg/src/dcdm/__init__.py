"""From-scratch convolutional classifier for plant leaf disease images.

The package is numpy end to end. Hot kernels (GEMM, im2col, pooling)
have numba-compiled versions selected at import time; set
DCDM_BACKEND=numpy to force the pure-numpy path.
"""

from . import backend
from .dataset import (
    DatasetManifest,
    ManifestRecord,
    build_manifest,
    class_slugs,
    class_table,
    load_images,
    load_manifest,
    save_manifest,
    split,
)
from .errors import (
    DatasetError,
    DcdmError,
    DecodeError,
    NumericError,
    ShapeError,
    WeightFormatError,
)
from .imaging import (
    AUGMENT_OPS,
    AugmentSpec,
    augment,
    decode_image,
    encode_png,
    register,
    to_tensor,
)
from .layers import LayerSpec, OptimizerConfig
from .metrics import ConfusionMatrix, compute, macro_f1_of, render_report
from .model import (
    Model,
    TrainConfig,
    build_dcdm,
    fingerprint_weights,
    load_weights,
    save_weights,
    train_model,
)

__version__ = "0.1.0"

__all__ = [
    "AUGMENT_OPS",
    "AugmentSpec",
    "ConfusionMatrix",
    "DatasetError",
    "DatasetManifest",
    "DcdmError",
    "DecodeError",
    "LayerSpec",
    "ManifestRecord",
    "Model",
    "NumericError",
    "OptimizerConfig",
    "ShapeError",
    "TrainConfig",
    "WeightFormatError",
    "augment",
    "backend",
    "build_dcdm",
    "build_manifest",
    "class_slugs",
    "class_table",
    "compute",
    "decode_image",
    "encode_png",
    "fingerprint_weights",
    "load_images",
    "load_manifest",
    "load_weights",
    "macro_f1_of",
    "register",
    "render_report",
    "save_manifest",
    "save_weights",
    "split",
    "to_tensor",
    "train_model",
]
