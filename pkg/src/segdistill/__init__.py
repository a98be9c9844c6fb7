"""Dataset distillation for semantic segmentation: class-balanced mask
selection and guided DDIM synthesis with analytic stand-in models."""

from .ddim import (
    CFGPredictor,
    Condition,
    GaussianPredictor,
    LatentState,
    NoiseSchedule,
    ZeroPredictor,
    build_schedule,
    cfg_combine,
    ddim_invert,
    ddim_step,
    make_linear_gaussian_predictor,
    predict_clean,
)
from .guidance import (
    ClassFeatureBank,
    GuidanceConfig,
    build_feature_bank,
    class_region_mean,
    feature_matching_loss,
    guidance_scales,
    guided_noise,
    latent_loss_gradient,
    segmentation_consistency_loss,
)
from .masks import (
    ClassStats,
    DistributionReport,
    MaskDataset,
    MaskRecord,
    compute_class_stats,
    imbalance_factor,
    ingest_label_map,
    read_histogram_cache,
    write_histogram_cache,
)
from .pipeline import PipelineConfig, build_condition, distill, load_config, relabel
from .selection import (
    FeatureTable,
    SelectionState,
    greedy_score,
    select_greedy,
    select_herding,
    select_kcenter,
    select_random,
    select_uniform,
)

__version__ = "0.1.0"
