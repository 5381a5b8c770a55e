"""One-dimensional conjugate toy model for checking the bound and its gradients.

Prior z ~ N(theta, 1), likelihood x | z ~ N(z, 1), proposal q = N(mu, sigma^2).
The marginal is x ~ N(theta, 2), so every IWAE bound is below log N(x; theta, 2).
Each row of ``eps`` is one independent sample set.
"""

import math

import numpy as np

from hds import autodiff as ad
from hds.objective import dreg_surrogate, iwae_bound
from hds.posterior import gaussian_log_density

X_OBS = 1.3
THETA = 0.2
MU = 0.1            # deliberately off the exact posterior mean (theta + x) / 2
LOG_SIGMA = math.log(0.9)


def log_marginal(x=X_OBS, theta=THETA):
    return float(gaussian_log_density(x, theta, 0.5 * math.log(2.0)).value)


def log_weights(mu, log_sigma, theta, eps, x=X_OBS, stop_q=False, scale=None):
    """(B, K) log importance weights; ``mu``, ``log_sigma`` and ``theta`` broadcast per set."""
    z = mu + ad.exp(log_sigma) * ad.constant(eps)
    if scale is not None:
        # one scale row per sample, instance-major, as the DReG surrogate expects
        B, K = z.shape
        z = ad.reshape(ad.scale_grad(ad.reshape(z, (B * K, 1)), scale), (B, K))
    q_mu, q_ls = (ad.stop_gradient(mu), ad.stop_gradient(log_sigma)) if stop_q else (mu, log_sigma)
    return (gaussian_log_density(x, z, 0.0) + gaussian_log_density(z, theta, 0.0)
            - gaussian_log_density(z, q_mu, q_ls))


def bounds(eps, mu=MU, log_sigma=LOG_SIGMA, theta=THETA):
    """Per-set IWAE bounds (B,) as plain numbers."""
    return np.asarray(iwae_bound(log_weights(ad.constant(mu), ad.constant(log_sigma), ad.constant(theta), eps),
                                 axis=1).value)


def per_set_gradients(eps, estimator, mu=MU, log_sigma=LOG_SIGMA, theta=THETA):
    """Gradient of each set's bound estimate with respect to mu and theta: dict of (B,) arrays.

    ``estimator`` is ``"dreg"`` (doubly reparameterised) or ``"naive"`` (plain
    reparameterised gradient of the IWAE bound).
    """
    B, K = eps.shape
    tape = ad.Tape()
    with tape:
        m = tape.param("mu", np.full((B, 1), mu))
        t = tape.param("theta", np.full((B, 1), theta))
        ls = ad.constant(np.full((B, 1), log_sigma))
        if estimator == "dreg":
            scale = ad.constant(np.ones((B * K, 1)))
            logw = log_weights(m, ls, t, eps, stop_q=True, scale=scale)
            root = dreg_surrogate(logw, scale) * float(B)
        elif estimator == "naive":
            root = ad.sum(iwae_bound(log_weights(m, ls, t, eps), axis=1))
        else:
            raise ValueError(estimator)
    g = tape.backward(root)
    return {"mu": g["mu"][:, 0], "theta": g["theta"][:, 0]}

