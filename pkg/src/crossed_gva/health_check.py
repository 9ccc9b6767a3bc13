# Copyright 2024 IBM Corp.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

import numpy as np

from crossed_gva.services.inference import se_beta0, se_beta1_gamma, se_sigma
from crossed_gva.services.optimizer import FitConfig, Method, fit
from crossed_gva.services.simulator import SimSpec, simulate


def health_check():
    """
    Checks the closed-form standard errors against their reference values, then
    simulates a small Poisson grid and fits it with the composite method.
    """
    closed_form_check()
    fit_check()
    print("health check passed successfully!")
    return True


def closed_form_check():
    sd = se_sigma(0.25, 50).se_of_sd
    assert abs(sd - 0.05) < 1e-4, f"Expected se_sigma(0.25, 50) = 0.05, got {sd}"

    gamma_slope = se_beta1_gamma(0.8, 0.25, 0.25, 100, 100)
    assert abs(gamma_slope - 0.0125) < 5e-4, f"Expected se_beta1_gamma = 0.0125, got {gamma_slope}"

    intercept = se_beta0(0.25, 0.25, 100, 100)
    assert abs(intercept - 0.0708) < 1e-3, f"Expected se_beta0 = 0.0708, got {intercept}"


def fit_check():
    simulation = simulate(SimSpec(family="poisson", m=20, n=20, seed=7))
    result = fit(simulation.data, FitConfig(method=Method.GVACL))

    assert result.converged, f"Expected a converged fit, got: {result.message}"
    values = [*result.estimates.beta, result.estimates.sigma2_u, result.estimates.sigma2_v]
    assert np.all(np.isfinite(values)), f"Expected finite estimates, got {values}"


if __name__ == "__main__":
    health_check()
