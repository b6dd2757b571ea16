"""Average effects in nonlinear panel models by approximate operator inversion."""
from .discretize import FixedEffectGrid, product_grid, quantile_grid, uniformize
from .estimator import EstimatorReport, Regularization, aoi_estimate, aoi_estimates, estimating_function
from .model import (effect_ape_logistic, effect_counterfactual_prob, effect_treatment_effect,
                    binomial_nocov_model, rc_binary_model, static_logit_model)

__version__ = '0.1.0'

__all__ = [
    'FixedEffectGrid', 'product_grid', 'quantile_grid', 'uniformize',
    'EstimatorReport', 'Regularization', 'aoi_estimate', 'aoi_estimates', 'estimating_function',
    'effect_ape_logistic', 'effect_counterfactual_prob', 'effect_treatment_effect',
    'binomial_nocov_model', 'rc_binary_model', 'static_logit_model',
]
