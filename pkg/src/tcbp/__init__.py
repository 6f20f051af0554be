"""Temporal compact bilinear pooling and self-supervised temporal ordering."""

from .autodiff import BackwardError, Param, Tape, Var
from .dataio import (
    FormatError,
    SceneDataset,
    SynthConfig,
    generate_synthetic,
    load_manifest,
    read_feature_file,
    write_feature_file,
)
from .encoder import (
    ClipEmbedding,
    ClipFeatures,
    EncoderModel,
    EncodingError,
    ModalityFeature,
    concat_modalities,
    sample_segments,
)
from .estimators import (
    ClipOrderingModel,
    CompactBilinearPooling,
    TemporalCompactBilinearPooling,
)
from .ordering import (
    OrderingResult,
    Scene,
    chance_accuracy,
    infer_order,
    negative_loss,
    ordering_accuracy,
    pair_loss,
)
from .sketching import (
    SketchParams,
    cbp_encode,
    circular_convolve,
    count_sketch,
    init_sketch_params,
    sketch_params_from_bytes,
    sketch_params_to_bytes,
    tcbp_encode,
    tensor_sketch,
)
from .training import SGD, EvalReport, TrainConfig, evaluate, sample_pair, train, train_step

__version__ = "0.1.0"

__all__ = [
    "BackwardError", "Param", "Tape", "Var",
    "FormatError", "SceneDataset", "SynthConfig", "generate_synthetic",
    "load_manifest", "read_feature_file", "write_feature_file",
    "ClipEmbedding", "ClipFeatures", "EncoderModel", "EncodingError",
    "ModalityFeature", "concat_modalities", "sample_segments",
    "ClipOrderingModel", "CompactBilinearPooling", "TemporalCompactBilinearPooling",
    "OrderingResult", "Scene", "chance_accuracy", "infer_order", "negative_loss",
    "ordering_accuracy", "pair_loss",
    "SketchParams", "cbp_encode", "circular_convolve", "count_sketch",
    "init_sketch_params", "sketch_params_from_bytes", "sketch_params_to_bytes",
    "tcbp_encode", "tensor_sketch",
    "SGD", "EvalReport", "TrainConfig", "evaluate", "sample_pair", "train", "train_step",
    "__version__",
]
