from . import config, models, experiments
from .models import dc_motor_model, spline_model, Impulsive, GaussianDisturbance, \
    Sine, ExpSin, disturbance_readout
from .experiments import fit_metric, cross_validate_gamma, log_grid, FitTable, \
    run_rates, run_impulsive_mc, run_outlier_mc, run_constrained, ZeroTruth
