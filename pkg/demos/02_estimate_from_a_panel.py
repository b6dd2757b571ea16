"""
Estimating average effects from one simulated panel.

Units follow a random-coefficient logit, ``Y_t = 1{A1 + A2 X_t >= eps_t}``,
where the covariate is correlated with both fixed effects. We estimate
``E[Lambda(A1 + A2)]`` (the success probability at covariate 1) and the
average partial effect, with the plug-in (q = 0) and the limit estimator.
"""
import math

from aoi.estimator import Regularization, aoi_estimates
from aoi.mc import DGP, prior_grid, simulate_dataset, true_effect_value
from aoi.model import effect_from_id, rc_binary_model

n, T = 500, 6
data = simulate_dataset(DGP(), n, T, seed=2024)
model = rc_binary_model(T)

# A normal prior on a 99 x 99 quantile grid: it need not match the truth.
grid = prior_grid(3, L=99)
reg = Regularization('clamp', 1e-4)

# %% Each distinct covariate path gets its own kernel and spectrum; with a
# continuous covariate that is one per unit, so this takes a few seconds.
for name in ('cf_prob:1', 'ape'):
    effect = effect_from_id(name, model)
    truth = true_effect_value(DGP(), effect)
    reports = aoi_estimates(data.pairs(), model, grid, effect, [0, math.inf], reg)
    print(f"{name}: truth {truth:.4f}")
    for q, rep in reports.items():
        lo, hi = rep.ci
        print(f"  q={q!s:>3}  estimate {rep.estimate:.4f}  se {rep.se:.4f}  95% CI [{lo:.4f}, {hi:.4f}]")
