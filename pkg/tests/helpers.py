"""Hand-built model and objective factories used by config and CLI tests."""

import numpy as np

from statflow import SdeModel, make_ou_model, mean_objective


def make_custom_model():
    """A valid custom model: 2-d mean-reverting family behind the factory hook."""
    return make_ou_model(2.0, 0.3, d=2)


def make_custom_objective():
    return mean_objective(2, 0.25)


def make_expanding_model():
    """Linearly expanding drift mu = +0.8 x; fails dissipativity on purpose."""
    d = ell = 1

    def drift(x, theta):
        return 0.8 * np.asarray(x, dtype=float)

    def diffusion(x, theta):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (d, d))
        out[..., 0, 0] = 0.5
        return out

    def drift_jac_x(x, theta):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (d, d))
        out[..., 0, 0] = 0.8
        return out

    def drift_jac_theta(x, theta):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (d, ell))

    def zeros_x(x, theta):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (d, d, d))

    def zeros_theta(x, theta):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (d, d, ell))

    return SdeModel(d=d, ell=ell, drift=drift, diffusion=diffusion,
                    drift_jac_x=drift_jac_x, drift_jac_theta=drift_jac_theta,
                    diffusion_jac_x=zeros_x, diffusion_jac_theta=zeros_theta,
                    kind="expanding")


def make_not_a_model():
    return {"oops": True}
