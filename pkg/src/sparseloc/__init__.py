"""Sparse source localisation: forward models, ISTA/FISTA/SPARCOM solvers and
their unrolled, trainable counterparts for SMLM and ULM imaging."""
from .model import (
    GaussianPsf,
    GridGeometry,
    MeasurementOperator,
    OpticsParams,
    apply_adjoint,
    apply_forward,
    build_measurement_matrix,
    diffraction_limit,
    gradient_lipschitz,
    power_iteration,
)
from .simulate import Emitter, FrameSequence, GroundTruth, NoiseModel, render_sequence, \
    render_ulm_sequence, sample_structure
from .solvers import IstaConfig, empirical_covariance, fista, ista, lasso_oracle_cd, \
    soft_threshold, sparcom_ista, sparcom_precompute
from .unrolled import UnrolledNet, count_parameters, init_conv_net, init_lista_from_model, \
    net_forward
from .train import TrainSample, make_patches, train_net
from .evaluate import compute_metrics, extract_localizations, match_points

__version__ = "0.1.0"
