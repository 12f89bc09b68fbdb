"""Unsupervised semantic segmentation over pre-extracted patch features.

Two stages: (1) fit a discretized concept codebook by maximizing a
tanh-scaled graph-modularity objective over per-image patch affinities;
(2) train a small MLP segmentation head with concept-wise contrastive
learning guided by the codebook's distance matrix, an EMA teacher, and a
per-concept feature bank. Inference clusters head outputs, upsamples,
refines with a dense CRF, and scores after Hungarian alignment.
"""

from .clusterbook import (
    Clusterbook,
    affinity,
    distance_matrix,
    fit_clusterbook,
    fit_clusterbook_kmeanspp,
    load_clusterbook,
    modularity,
    modularity_gradient,
    save_clusterbook,
    vector_quantize,
)
from .crf import CrfParams, crf_refine
from .errors import (
    ArtifactIOError,
    BadMagicError,
    CauseSegError,
    DegenerateGraphError,
    DimensionError,
    NumericError,
    TruncatedPayloadError,
    ValidationError,
    VersionMismatchError,
)
from .feature_io import (
    IGNORE_LABEL,
    DatasetManifest,
    FeatureRecord,
    LabelMap,
    SynthSpec,
    generate_synthetic_dataset,
    read_feature_file,
    validate_manifest,
    write_feature_file,
)
from .inference_eval import (
    ClusterProbe,
    evaluate,
    fit_cluster_probe,
    hungarian_match,
    linear_probe,
    predict_labels,
)
from .rng import RngStream
from .seg_head import (
    MlpHead,
    TeacherHead,
    ema_update,
    head_backward,
    head_forward,
    init_head,
    load_head,
    save_head,
)
from .ssl_trainer import (
    ConceptBank,
    TrainConfig,
    bank_update,
    infonce,
    sample_anchors,
    select_pos_neg,
    train,
)
from .tensor_math import (
    AdamState,
    adam_step,
    bilinear_upsample,
    cosine_matrix,
    sample_without_replacement,
)

__version__ = "0.1.0"
