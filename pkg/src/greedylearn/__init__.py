"""Greedy sparse pursuit, its unrolled trainable networks, and the
experiment harnesses around them (synthetic comparisons, image denoising)."""

from .autodiff import GradientTape, Node
from .errors import (
    AllZeroInput,
    CorruptHeader,
    EmptyBatch,
    GreedylearnError,
    ImageTooSmall,
    NotPositiveDefinite,
    RankDeficientSupport,
    ShapeMismatch,
    TapeMissing,
    UnknownMethod,
    UnsupportedFormat,
    ZeroAtom,
)
from .estimators import GreedyCoder, LgmDenoiser, ListaDenoiser
from .imaging import (
    DenoiserModel,
    ImagingTrainConfig,
    denoise,
    extract_patches,
    load_image,
    psnr,
    reconstruct_average,
    sample_crops,
    save_image,
    train_image_denoiser,
)
from .linalg import load_matrix, save_matrix
from .pursuit import (
    EXACT_CARDINALITY,
    THRESHOLD_OR_MAX,
    CscDictionary,
    Dictionary,
    PursuitConfig,
    PursuitResult,
    RandConfig,
    SparseCode,
    batch_omp,
    gcmp,
    gmpt,
    mmse_estimate,
    mp,
    omp,
    oracle_estimate,
    rand_omp,
    sp,
)
from .synthetic import (
    EvalContext,
    LabeledDataset,
    SyntheticSpec,
    dictionary_distance,
    evaluate_methods,
    gen_dataset,
    load_dataset,
    make_dct_dictionary,
    save_dataset,
    write_results_csv,
)
from .training import (
    Adam,
    AdamConfig,
    LossConfig,
    TrainConfig,
    TrainRun,
    adam_step,
    coherence_gradient,
    evaluate_model,
    loss,
    mutual_coherence,
    train,
)
from .unrolled import (
    AttentionParams,
    LgmParams,
    ListaParams,
    UnrolledTrace,
    attention_forward,
    lgm_backward,
    lgm_forward,
    lgm_forward_patches,
    lgm_mmse_forward,
    lista_forward,
    lmp_forward,
    load_checkpoint,
    load_lgm_checkpoint,
    load_lista_checkpoint,
    lsp_forward,
    save_checkpoint,
    save_lgm_checkpoint,
    save_lista_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "AdamConfig",
    "AllZeroInput",
    "AttentionParams",
    "CorruptHeader",
    "CscDictionary",
    "DenoiserModel",
    "Dictionary",
    "EXACT_CARDINALITY",
    "EmptyBatch",
    "EvalContext",
    "GradientTape",
    "GreedyCoder",
    "GreedylearnError",
    "ImageTooSmall",
    "ImagingTrainConfig",
    "LabeledDataset",
    "LgmDenoiser",
    "LgmParams",
    "ListaDenoiser",
    "ListaParams",
    "LossConfig",
    "Node",
    "NotPositiveDefinite",
    "PursuitConfig",
    "PursuitResult",
    "RandConfig",
    "RankDeficientSupport",
    "ShapeMismatch",
    "SparseCode",
    "SyntheticSpec",
    "THRESHOLD_OR_MAX",
    "TapeMissing",
    "TrainConfig",
    "TrainRun",
    "UnknownMethod",
    "UnrolledTrace",
    "UnsupportedFormat",
    "ZeroAtom",
    "adam_step",
    "attention_forward",
    "batch_omp",
    "coherence_gradient",
    "denoise",
    "dictionary_distance",
    "evaluate_methods",
    "evaluate_model",
    "extract_patches",
    "gcmp",
    "gen_dataset",
    "gmpt",
    "lgm_backward",
    "lgm_forward",
    "lgm_forward_patches",
    "lgm_mmse_forward",
    "lista_forward",
    "lmp_forward",
    "load_checkpoint",
    "load_dataset",
    "load_image",
    "load_lgm_checkpoint",
    "load_lista_checkpoint",
    "load_matrix",
    "loss",
    "lsp_forward",
    "make_dct_dictionary",
    "mmse_estimate",
    "mp",
    "mutual_coherence",
    "omp",
    "oracle_estimate",
    "psnr",
    "rand_omp",
    "reconstruct_average",
    "sample_crops",
    "save_checkpoint",
    "save_dataset",
    "save_image",
    "save_lgm_checkpoint",
    "save_lista_checkpoint",
    "save_matrix",
    "sp",
    "train",
    "train_image_denoiser",
    "write_results_csv",
]
