"""
Where the bias of the limit estimator comes from.

With an equal-mass prior, the bias of the limit estimator equals minus
the inner product of two residuals: the part of the effect that the
likelihood rows cannot reproduce, and the part of the true fixed-effect
density (relative to the prior) that they cannot reproduce either. As T
grows the likelihood spans more functions and both residuals shrink.
"""
import math

from aoi.population import binomial_scenario, rate_sweep

scenario = binomial_scenario(K=200)
rows = rate_sweep([2, 4, 8, 12, 16], scenario, math.inf, residuals=True)
print(f"{'T':>3} {'bias':>10} {'identity':>10} {'|mu_perp|':>10} {'|pi_perp|':>10}")
for r in rows:
    print(f"{r['T']:>3} {r['bias']:>10.2e} {r['thm1_bias']:>10.2e} {r['r_mu']:>10.2e} {r['r_pi']:>10.2e}")
