"""Predictive estimation of non-Markovian qubit dephasing.

Synthesizes engineered dephasing records, runs a family of predictive
estimators on them (least-squares predictors, autoregressive and
oscillator-bank Kalman filters, a quantised extended filter, and Gaussian
process regression), tunes their noise parameters by Bayes-risk search, and
measures forward prediction horizons and spectral reconstructions.
"""

from .noise import NoiseSpec, TruthRealisation, analytic_covariance, synthesize_truth, truth_spread
from .measurement import (
    BinaryRecord,
    LinearRecord,
    MeasurementSpec,
    born_probability,
    derive_R,
    linearize,
    make_binary_record,
    quantize,
)
from .kalman import (
    FilterTrajectory,
    Forecast,
    KalmanModel,
    KalmanState,
    forecast,
    predict_step,
    run_filter,
    update_step,
)
from .armodels import (
    ArCoefficients,
    LsfModel,
    ar_spectral_density,
    build_akf,
    check_stationarity,
    lsf_predict,
    train_lsf,
)
from .lkffb import (
    LkffbBasis,
    LkffbExtraction,
    build_basis,
    build_lkffb,
    extract_amp_phase,
    harmonic_predict,
    optimal_training_time,
)
from .qkf import QkfModel, QkfTrajectory, qkf_forecast, qkf_measure, run_qkf
from .gpr import (
    GprPrediction,
    KernelSpec,
    compute_kappa,
    gpr_predict,
    kernel_eval,
    log_marginal_likelihood,
    optimize_hyperparams,
    periodic_kernel_truncated,
)
from .risk import RiskCurve, TuningResult, bayes_risk, normalized_risk, prediction_horizon, tune_sigma_R

__version__ = "0.1.0"
