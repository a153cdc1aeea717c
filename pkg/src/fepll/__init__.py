"""GMM patch-prior image restoration with three accelerations: flat-tail
spectrum compression, a balanced Gaussian search tree, and jittered patch
subsampling."""

__version__ = "0.1.0"

from .errors import DataError, FepllError, NumericalError
from .gmm import (
    Eigenbasis,
    FlatTailComponent,
    GmmModel,
    ScoreContext,
    component_from_eigen,
    eigen_from_covariance,
    flatten_component,
    select_exhaustive,
)
from .em import em_train
from .model_io import model_read, model_write, read_covariance_text, write_covariance_text
from .tree import (
    GmmTree,
    TreeNode,
    auto_level_sizes,
    balanced_cluster,
    build_tree,
    collapse,
    pairwise_symmetric_kl,
    symmetric_kl,
    tree_read,
    tree_select,
    tree_write,
)
from .patches import (
    PatchBatch,
    SampleGrid,
    coverage_counts,
    extract,
    jitter_rng,
    jittered_grid,
    regular_grid,
    reproject,
)
from .operators import (
    CgConfig,
    DegradationOperator,
    apply,
    apply_adjoint,
    conjugate_gradient,
    convolution_operator,
    decimate_operator,
    gain_operator,
    identity_operator,
    init_estimate,
    lambda_param,
    mask_operator,
    radial_gain_map,
    read_kernel_text,
    solve_image_estimation,
)
from .solver import (
    RestorationConfig,
    SolverStats,
    beta_schedule,
    compare_profiles,
    restore,
)
from .metrics import MetricReport, evaluate, mse, psnr, ssim
from .pgm import image_read, image_write
from .phantoms import phantom_corpus, phantom_image
