"""Semi-supervised clustering engine for long-tailed intent discovery.

Pseudo-labels are produced by a KL-relaxed optimal-transport solver,
denoised with distribution- and quality-aware selection rules, and used to
train a projection/cluster head with weighted contrastive losses.
"""

from .bundle import (
    DatasetBundle,
    BundleManifest,
    load_bundle,
    save_bundle,
    validate_bundle,
)
from .longtail import LongTailSpec, longtail_counts, sample_longtail, split_known_novel
from .rot import (
    RotConfig,
    TransportPlan,
    SolverTrace,
    PseudoLabelSet,
    cost_from_predictions,
    sinkhorn_fixed_marginals,
    update_beta,
    solve_rot,
    solve_variant,
    pseudo_labels_from_plan,
    objective_value,
)
from .noise import (
    FilterConfig,
    per_sample_loss,
    distribution_aware_select,
    quality_aware_select,
    clean_union,
)
from .learner import (
    HeadParameters,
    TrainConfig,
    init_head,
    forward,
    augment_embeddings,
    train_epoch,
    supervised_warmup,
)
from .losses import LossBreakdown, cwcl_loss, iwcl_loss, ce_loss, total_loss
from .evaluate import (
    MetricsReport,
    kmeans,
    hungarian,
    clustering_accuracy,
    nmi,
    ari,
    grouped_accuracy,
    estimate_k,
)
from .pipeline import PipelineConfig, RunRecord, run_pipeline, run_baseline_kmeans, sweep

__version__ = "0.1.0"
