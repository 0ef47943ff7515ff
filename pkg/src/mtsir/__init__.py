"""Multi-task scalar-on-image regression with measurement-error correction.

Wavelet designs for image predictors, corrected-moment losses that subtract
the image-noise covariance, projected spectral gradient solvers under
grouped sparsity, noise-covariance estimation from validation data, and a
simulation/evaluation harness.
"""

__version__ = "0.1.0"

from .data import MultiTaskDataset, TaskData, build_design, load_dataset, predict, save_dataset
from .metrics import coefficient_bias, pmse, reconstruct_beta, support_auc
from .moments import CorrectedMoments, corrected_moments, loss_gradient, loss_value
from .noise import NoiseCovariance, estimate_direct, estimate_replicates, to_wavelet_domain
from .penalty import PenaltySpec, group_bridge_norm, group_lasso_norm, project_group_l2_ball, project_l1
from .sim import ScenarioConfig, run_scenario
from .solver import FitResult, SolverConfig, cross_validate, fit, fit_uncorrected
from .wavelet import WaveletBasisSpec, dwt2, idwt2, pad_to_pow2
