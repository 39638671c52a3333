"""Recurrent-convolutional per-pixel classifier for multi-temporal band stacks.

A peephole LSTM reads each pixel's (time x band) matrix, a time-distributed
dense layer maps it to a square activation map, two valid convolutions and a
softmax head produce class probabilities.  Training uses AMSGrad with a
cosine-annealed learning rate; evaluation reports OA, PA, UA and kappa.
"""
from . import kernels
from .data import (
    PixelDataset,
    SynthSpec,
    assemble_dataset,
    ndvi,
    pca_project,
    read_csv_dataset,
    read_dataset,
    synth_generate,
    write_csv_dataset,
    write_dataset,
)
from .errors import (
    CorruptionError,
    DataError,
    FormatError,
    NumericError,
    ParameterError,
    PixelRcnnError,
    ShapeError,
    UndefinedMetricError,
    UsageError,
)
from .layers import (
    REFERENCE_CONFIG,
    ModelConfig,
    PixelRcnnModel,
    load_checkpoint,
    model_backward,
    model_forward,
    param_count,
    predict,
    save_checkpoint,
)
from .metrics import (
    ConfusionMatrix,
    class_metrics,
    cohen_kappa,
    confusion_from_labels,
    overall_accuracy,
    render_report,
)
from .tensor import RngState
from .training import (
    AmsGradState,
    CosineSchedule,
    TrainConfig,
    amsgrad_step,
    cosine_lr,
    cross_entropy,
    fit,
    logistic_baseline_fit,
    lr_range_test,
    scaler_apply,
    scaler_fit,
    stratified_split,
)

BACKEND = kernels.BACKEND

__version__ = "0.1.0"
