"""Prompt-generator training against frozen promptable segmenters.

A trainable convolutional network maps an image to the dense prompt
embedding of a frozen promptable segmentation model, turning an interactive
foundation model into a fully automatic segmenter for a new domain; a
lightweight surrogate decoder can then replace the heavy frozen decoder at
inference time.
"""

from .core import (
    DatasetLayoutError,
    FrozenParameterError,
    Image,
    ImageEmbedding,
    LogitMap,
    Mask,
    MissingWeightsError,
    NonFiniteError,
    ParameterSnapshot,
    PromptEmbedding,
    ShapeMismatchError,
    UnsupportedOperationError,
    binarize,
    snapshot_parameters,
)
from .data import DatasetSpec, SegmentationDataset, load_dataset, make_blobs
from .generator import (
    GeneratorConfig,
    PromptGenerator,
    build_prompt_generator,
    count_flops,
    generate_prompt,
    tiny_test_config,
)
from .losses import LossValue, bce_loss, dice_loss, seg_loss
from .metrics import (
    MetricConfig,
    MetricReport,
    dice_score,
    e_measure,
    evaluate_dataset,
    f_beta,
    iou_score,
    s_measure,
    sensitivity,
    weighted_f_beta,
)
from .segmenter import (
    FrozenStubBackend,
    SegmenterBackend,
    SegmenterOutput,
    baseline_prompt_forward,
    build_backend,
    decode_mask,
    derive_point_prompt,
    encode_image,
    segment_with_prompt,
)
from .surrogate import SurrogateDecoder, surrogate_forward
from .training import (
    FitResult,
    SurrogateTrainConfig,
    TrainConfig,
    evaluate,
    fit,
    infer,
    load_generator_checkpoint,
    save_generator_checkpoint,
    train_step,
    train_surrogate,
)

__version__ = "0.1.0"
