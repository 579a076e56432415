"""Few-shot OOD detection with a forced prompt trained against a frozen reference."""
from .backend import (
    CacheBackend,
    EncoderSpec,
    ImageFeatures,
    ToyBackend,
    make_toy_backend,
    read_embedding_cache,
    toy_encoder,
    write_embedding_cache,
)
from .metrics import MetricsReport, auroc, build_report, detect, fpr_at_tpr, id_top1_accuracy
from .objective import SimilarityPair, batch_loss, class_probabilities, fce_k_loss, fce_loss
from .prompts import (
    DualPromptBank,
    PromptContext,
    build_dual_prompts,
    load_bank,
    save_bank,
    text_features,
    trainable_parameters,
)
from .scoring import ScoreConfig, glmcm_score, lmcm_score, mcm_score, predict_class

__version__ = "0.1.0"
