"""Sparse-dense-sparse pruning for stacks of fully connected layers."""

__version__ = "0.1.0"

from .calibration import ActivationTrace, CalibrationSet, DataMode, collect_inputs, make_calibration
from .linalg import Rng, gaussian, invert_spd, matmul
from .model import LayerStack, LinearLayer, forward, read_container, write_container
from .pipeline import PruneReport, SdsConfig, run_sds, weight_histogram
from .pruning import NM, HessianState, Method, Unstructured, accumulate_hessian, parse_pattern, saliency, select_mask
from .pruning import prune_magnitude, prune_sparsegpt, prune_wanda
from .reconstruction import ReconConfig, adjust_soft_mask, early_exit_check, redense
from .sparse import BenchReport, CsrMatrix, bench, spmm, to_csr, to_dense
