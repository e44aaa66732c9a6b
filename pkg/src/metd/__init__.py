"""Multi-descriptor cosine classifier with count-modulated contrastive training."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    ContractViolation,
    InfeasibleConfigError,
    ParseError,
    ZeroNormError,
)
from .losses import (
    DEFAULT_TEMPERATURE,
    LossBreakdown,
    SimilarityGrid,
    clip_ce_loss,
    fine_grained_loss,
    loss_gradients,
    margin_loss,
    modulating_factor,
    select_closest,
    select_farthest,
    similarity_grid,
    total_loss,
)
from .model import (
    DescriptorBank,
    ImageAdapter,
    Model,
    TextEncoder,
    bank_embeddings,
    build_adapter,
    build_bank,
    build_model,
    build_text_encoder,
    encode_image,
    encode_text,
    load_checkpoint,
    parameter_partition,
    save_checkpoint,
)
from .data import (
    EmbeddingDataset,
    Sample,
    SynthConfig,
    Unit,
    Vocabulary,
    apply_linear_map,
    generate_synthetic,
    load_dataset,
    load_vocabulary,
    nearest_words,
    oversample_balance,
    save_dataset,
    save_vocabulary,
)
from .inference import (
    EvalReport,
    Prediction,
    SubclassReport,
    evaluate,
    format_eval_report,
    predict,
    subclass_report,
    temporal_mean_pool,
    unit_embedding,
    zero_shot_predict,
)
from .training import (
    StageConfig,
    SubclassCounter,
    cosine_lr,
    fd_check,
    fresh_counter,
    optimizer_step,
    run_stage1,
    run_stage2,
    update_counts,
)
from .harness import (
    ComparisonReport,
    HarnessSettings,
    Strategy,
    StrategyResult,
    compare_all,
    default_benchmark,
    distorted_benchmark,
    format_comparison,
    run_strategy,
    train_metd,
)
from .config import RunConfig, parse_config, parse_config_text
