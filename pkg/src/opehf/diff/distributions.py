"""Diagonal Gaussian log-densities, KL divergence and reparameterised sampling."""
import numpy as np

from . import tensor as F
from .tensor import Tensor, _LOG_2PI


def _check_positive(sigma, label="sigma"):
    v = sigma.value if isinstance(sigma, Tensor) else np.asarray(sigma)
    if np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise ValueError(f"{label} must be positive and finite")


def gauss_log_prob(mu, sigma, x) -> Tensor:
    """log N(x; mu, diag sigma^2), summed over the last axis."""
    _check_positive(sigma)
    z = (F.as_tensor(x) - mu) / sigma
    lp = -0.5 * _LOG_2PI - F.log(sigma) - 0.5 * F.square(z)
    return F.tsum(lp, axis=-1)


def gauss_sample_reparam(mu, sigma, noise) -> Tensor:
    """mu + sigma * noise, differentiable in mu and sigma."""
    _check_positive(sigma)
    return mu + sigma * noise


def kl_diag_gauss(mu_q, sigma_q, mu_p, sigma_p) -> Tensor:
    """KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2)) summed over the last axis."""
    _check_positive(sigma_q, "sigma_q")
    _check_positive(sigma_p, "sigma_p")
    ratio = F.square(sigma_q / sigma_p)
    mean_term = F.square((F.as_tensor(mu_q) - mu_p) / sigma_p)
    kl = 0.5 * (ratio + mean_term - 1.0) - F.log(sigma_q / sigma_p)
    return F.tsum(kl, axis=-1)
