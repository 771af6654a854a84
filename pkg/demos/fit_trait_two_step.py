"""
Two-step estimation for a latent trait system
=============================================

Generates a two-trait dataset (eta2 regressed on eta1, four binary
items per trait), walks through both estimation steps by hand, and
compares the three standard-error methods on the structural slope.
"""

import numpy as np

from twostep_lv.latent_trait import (
    IrtConfig,
    combine_trait_blocks,
    irt_onestep,
    irt_step1_fit,
    irt_step2_fit,
    trait_model,
)
from twostep_lv.model_core import RngStream
from twostep_lv.sim_study import TraitScenario, gen_trait_data, trait_study_spec
from twostep_lv.variance import (
    assemble_sigma11,
    asymptotic_variance,
    naive_variance,
    simulation_variance,
    wald_interval,
)

# One cell of the trait design: the structural slope explains 20% of
# eta2's variance, the items 60% of their latent response variance.
scenario = TraitScenario(n=1000, r_eta_sq=0.2, r_y_sq=0.6, seed=7)
sample = gen_trait_data(scenario, rep=0)
data = sample.data
print(f"n = {data.n}, items per trait = {scenario.p}, "
      f"true slope = {scenario.beta1:.4f}")

config = IrtConfig(rng=RngStream(7, 100))

# Step 1: each trait's measurement block is fitted alone, with the
# trait standardized to N(0, 1).  The block covariances become the
# block-diagonal step-1 covariance Sigma11.
fit_block1 = irt_step1_fit(data, 0, config)
fit_block2 = irt_step1_fit(data, 1, config)
measurement = combine_trait_blocks(data, (fit_block1, fit_block2))
theta1 = measurement.free_vector()
sigma11 = assemble_sigma11([fit_block1.sigma11, fit_block2.sigma11])
print(f"step 1 done: {theta1.values.size} measurement parameters")

# Step 2: the full log-likelihood is maximized over the structural
# parameters only, measurement frozen at the step-1 values.
spec = trait_study_spec()
fit2 = irt_step2_fit(data, measurement, spec, config)
theta2 = fit2.params.vector
slope = theta2["eta2:on.eta1"]
print(f"step 2 done: slope estimate {slope:.4f}")

# Three variance methods at the same solution.  The naive method stops
# at the inverse step-2 information; the corrected methods add the
# step-1 propagation term, in closed form or by refitting step 2 under
# draws of the measurement parameters.
model = trait_model(measurement, spec, config)
reports = {
    "naive": naive_variance(model, data, theta1, theta2, v2=fit2.v2),
    "asymptotic": asymptotic_variance(
        model, data, theta1, theta2, sigma11, v2=fit2.v2
    ),
    "simulation (M=100)": simulation_variance(
        model, data, theta1, theta2, sigma11, m=100,
        rng=RngStream(7, 200), v2=fit2.v2
    ),
}
print()
for label, rep in reports.items():
    se = rep.se()["eta2:on.eta1"]
    lo, hi = wald_interval(slope, se)
    print(f"{label:>20}: SE {se:.4f}, 95% CI [{lo:.4f}, {hi:.4f}]")

# The one-step (joint) fit is the comparison baseline: same model, all
# parameters estimated together.
one = irt_onestep(data, spec, config)
print(f"\none-step slope {one.beta1:.4f} (SE {one.beta1_se:.4f}); "
      f"two-step and one-step typically agree closely")

# The corrected methods should sit above the naive SE: the difference
# is exactly the propagated step-1 uncertainty.
assert reports["naive"].se()["eta2:on.eta1"] <= min(
    reports["asymptotic"].se()["eta2:on.eta1"],
    reports["simulation (M=100)"].se()["eta2:on.eta1"],
) + 1e-12
