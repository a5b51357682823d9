"""Hard-label black-box attacks on 3D point clouds.

Boundary clouds are generated by learnable graph-spectrum fusion and then
optimized along the victim's decision boundary with geometry-aware joint
coordinate-spectrum walking, querying the victim only for predicted labels.
"""

from .attack import (
    AttackConfig,
    AttackResult,
    GenerationError,
    binary_project,
    bisect_direction,
    estimate_normal,
    initial_search_direction,
    point_on_semicircle,
    run_attack,
    select_best_candidate,
    walk_boundary,
)
from .cloud import (
    DistanceReport,
    InvalidCloudError,
    PointCloud,
    combined_distance,
    d_chamfer,
    d_hausdorff,
    d_norm,
    knn_indices,
    normalize_unit_ball,
    read_cloud,
    write_cloud,
)
from .defense import DefenseConfig, DefendedOracle, sor_filter, srs_drop
from .fusion import (
    Discriminator,
    DiscTrainConfig,
    FusionWeights,
    WeightBank,
    WeightTrainConfig,
    fuse_spectra,
    learn_fusion_weights,
    low_freq_reg,
    one_nna_accuracy,
    one_nna_loss,
    sample_weights,
    train_discriminator,
)
from .oracle import (
    HardLabelOracle,
    NativeCentroidClassifier,
    QueryCounter,
    RemoteOracle,
    indicator,
    train_native_classifier,
)
from .spectral import BandSplit, BasisCache, GraphBasis, Spectrum, build_basis, gft, igft, split_bands

__version__ = "0.1.0"
