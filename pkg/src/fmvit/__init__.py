"""Hybrid CNN-transformer building blocks with a structural reparameterization
engine, cost/spectrum analysis, and toy training tools.

The package is organized around a small numpy tensor core (`tensor`), a
module system (`nn`), the block zoo and model assembly (`blocks`, `model`),
branch fusion and equivalence checking (`reparam`), cost and frequency
analysis (`analyzer`), synthetic-data training (`trainer`), file formats
(`io`), and a command-line front end (`cli`).
"""

from .analyzer import (branch_spectrum_report, count_flops, count_params,
                       fourier_spectrum, shape_trace)
from .errors import (
    FmvitError,
    MergeError,
    NumericError,
    ShapeError,
    SpecError,
    SpecParseError,
    TapeError,
    TrainingDiverged,
    VerificationError,
    WeightFormatError,
)
from .io import (ModelSpecFile, load_weights, parse_model_spec, read_model_spec,
                 save_weights, serialize_model_spec, write_model_spec, write_weights)
from .model import build_model, calibrate_bn, variant_names, variant_spec
from .reparam import fuse_model, verify_equivalence
from .tensor import ConvSpec, GradTape, Tensor, backward
from .trainer import (SynthDataset, TrainConfig, ablation_suite, evaluate,
                      generate_dataset, prediction_match, train)

__all__ = [
    "ConvSpec",
    "FmvitError",
    "GradTape",
    "MergeError",
    "ModelSpecFile",
    "NumericError",
    "ShapeError",
    "SpecError",
    "SpecParseError",
    "SynthDataset",
    "TapeError",
    "Tensor",
    "TrainConfig",
    "TrainingDiverged",
    "VerificationError",
    "WeightFormatError",
    "ablation_suite",
    "backward",
    "branch_spectrum_report",
    "build_model",
    "calibrate_bn",
    "count_flops",
    "count_params",
    "evaluate",
    "fourier_spectrum",
    "fuse_model",
    "generate_dataset",
    "load_weights",
    "parse_model_spec",
    "prediction_match",
    "read_model_spec",
    "save_weights",
    "serialize_model_spec",
    "shape_trace",
    "train",
    "variant_names",
    "variant_spec",
    "verify_equivalence",
    "write_model_spec",
    "write_weights",
]

__version__ = "0.1.0"
