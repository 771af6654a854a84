"""
Two-step estimation for a latent class model with a covariate
=============================================================

Generates a three-class dataset with ten binary items and one
standard-normal covariate, fits the measurement model by EM (step 1),
then the class-membership regression with frozen measurement (step 2),
and compares the standard-error methods on a membership slope.
"""

import numpy as np

from twostep_lv.latent_class import (
    LcaConfig,
    align_classes,
    lca_covariate_model,
    lca_step1_em,
    lca_step2_covariate,
    relabel_step1,
)
from twostep_lv.model_core import RngStream
from twostep_lv.sim_study import (
    ClassScenario,
    class_true_probs,
    entropy_r2,
    gen_class_data,
)
from twostep_lv.variance import (
    asymptotic_variance,
    naive_variance,
    simulation_variance,
)

scenario = ClassScenario(n=1000, effect="mild", separation="large", seed=21)
sample = gen_class_data(scenario, rep=0)
data = sample.data
print(f"n = {data.n}, items = {scenario.p}, "
      f"true membership slope = {scenario.slope:.4f}")

config = LcaConfig(rng=RngStream(21, 100))

# Step 1: measurement-only EM with random multistarts.  Class labels
# are arbitrary, so the fit is aligned against the known true response
# profiles before anything downstream reads "class 2".
fit1 = lca_step1_em(data, scenario.n_classes, config)
perm = align_classes(fit1.measurement, class_true_probs(scenario))
fit1 = relabel_step1(fit1, perm)
print(f"step 1 done: loglik {fit1.loglik:.2f}, "
      f"class proportions {np.round(fit1.nuisance.pi, 3)}")

# How well do the items separate the classes?  The entropy-based
# R-squared is 0 for uninformative items and 1 for a deterministic
# assignment.
r2 = entropy_r2(fit1.measurement, fit1.nuisance.pi)
print(f"entropy R2 of the fitted measurement: {r2:.3f}")

# Step 2: multinomial logit of class membership on the covariate, with
# the measurement parameters frozen.
fit2 = lca_step2_covariate(data, fit1.measurement, config)
theta2 = fit2.params.free_vector()
target = "class2:z.x"
print(f"step 2 done: {target} = {theta2[target]:.4f}")

theta1 = fit1.measurement.free_vector()
model = lca_covariate_model(fit1.measurement, config)
reports = {
    "naive": naive_variance(model, data, theta1, theta2, v2=fit2.v2),
    "asymptotic": asymptotic_variance(
        model, data, theta1, theta2, fit1.sigma11, v2=fit2.v2
    ),
    "simulation (M=100)": simulation_variance(
        model, data, theta1, theta2, fit1.sigma11, m=100,
        rng=RngStream(21, 200), v2=fit2.v2
    ),
}
print()
for label, rep in reports.items():
    print(f"{label:>20}: SE {rep.se()[target]:.4f}")

# With strongly separating items the step-1 correction is small: the
# naive and corrected SEs nearly coincide, unlike the trait example.
gap = reports["asymptotic"].se()[target] - reports["naive"].se()[target]
print(f"\ncorrection on this dataset: {gap:.5f} "
      "(well-separated classes leave little step-1 uncertainty)")
