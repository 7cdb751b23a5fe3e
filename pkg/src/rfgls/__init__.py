"""GLS-style random forests for spatially and serially correlated data."""
from .cholfactor import PrecisionFactor, PrecisionOperator, identity_factor, nngp_factor, resampled_precision
from .covmodel import CovarianceSpec, ParameterError, ar_cholesky_factor, build_cov_matrix, check_diag_dominance, matern_cov
from .data import SpatialDataset, read_dataset, write_dataset
from .forest import ForestModel, ForestParams, fit_forest, predict_forest
from .glstree import Membership, TreeModel, best_split, dart_criterion, gls_solve, grow_tree

__version__ = "0.1.0"
