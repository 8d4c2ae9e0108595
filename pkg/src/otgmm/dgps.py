"""Built-in data-generating processes and their moment models.

Four scalar designs share the true parameter 1.5.  Two of them pair a
location moment with a positive-valued nonlinear moment (exponential or
logistic level) whose scale must be normalized for the moment to carry
information; the normalizing constant is the sample average of the same
transform over the observed data, fixed before estimation.  Normalizing by an
average over the *decision variables* instead would force the constraint
``(1 - 2 theta / 3) * mean > 0`` to be unsatisfiable away from 1.5 and the
transport problem would be infeasible at every other parameter value, so the
observed-data constant is the only self-contained reading that keeps the
estimator well defined.  Models built without data use constant 1.0.

Latent draws use inverse-CDF sampling throughout (rational-approximation
normal quantile, explicit inverses for uniform and exponential, Bernoulli
sums for the binomial) so a seeded stream reproduces bit-identical datasets
on any platform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import Dataset, MomentModel
from .special import norm_ppf

__all__ = ["DgpSpec", "DGP_IDS", "LATENTS", "dgp_model", "sample_dgp",
           "sample_latent", "THETA0"]

THETA0 = 1.5

DGP_IDS = ("normal_exp", "normal_logistic", "exp_logistic", "exponential_sq")
LATENTS = ("normal", "uniform", "binomial", "exponential")

#: latent laws admitted for each design (the squared-moment design needs
#: E[z^2] = 2 * theta0^2, which pins the exponential law and vice versa)
_ALLOWED_LATENTS = {
    "normal_exp": ("normal", "uniform", "binomial"),
    "normal_logistic": ("normal", "uniform", "binomial"),
    "exp_logistic": ("normal", "uniform", "binomial"),
    "exponential_sq": ("exponential",),
}


@dataclass(frozen=True)
class DgpSpec:
    """One simulation cell: design, latent law, error scale, sample size."""

    dgp_id: str
    latent: str
    sigma: float
    n: int
    theta0: float = THETA0

    def __post_init__(self):
        if self.dgp_id not in DGP_IDS:
            raise ValueError(f"unknown dgp id '{self.dgp_id}'")
        if self.latent not in LATENTS:
            raise ValueError(f"unknown latent law '{self.latent}'")
        if self.latent not in _ALLOWED_LATENTS[self.dgp_id]:
            raise ValueError(
                f"latent '{self.latent}' is not paired with '{self.dgp_id}'")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.n < 2:
            raise ValueError("n must be at least 2")

    @property
    def label(self) -> str:
        return f"{self.dgp_id}/{self.latent}/sigma={self.sigma:g}/n={self.n}"


# ---------------------------------------------------------------------------
# Latent samplers (inverse-CDF based, deterministic given the stream)
# ---------------------------------------------------------------------------

def sample_latent(latent: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if latent == "normal":
        # mean 1.5, variance 2
        return 1.5 + np.sqrt(2.0) * norm_ppf(rng.random(n))
    if latent == "uniform":
        return 1.0 + rng.random(n)
    if latent == "binomial":
        # 5 trials, success probability 0.3: mean 1.5, variance 1.05
        return (rng.random((n, 5)) < 0.3).sum(axis=1).astype(float)
    if latent == "exponential":
        # rate 2/3: mean 1.5, second moment 4.5
        return -1.5 * np.log1p(-rng.random(n))
    raise ValueError(f"unknown latent law '{latent}'")


def sample_dgp(spec: DgpSpec, rng: np.random.Generator) -> Dataset:
    """Draw a dataset: latent z plus centered normal error of scale sigma."""
    z = sample_latent(spec.latent, spec.n, rng)
    e = norm_ppf(rng.random(spec.n))
    x = z + spec.sigma * e
    return Dataset(x[:, None], ("x",))


# ---------------------------------------------------------------------------
# Moment models
# ---------------------------------------------------------------------------

def _logistic(z):
    # expit(2z - 3) without overflow on either tail
    u = 2.0 * z - 3.0
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    eu = np.exp(u[~pos])
    out[~pos] = eu / (1.0 + eu)
    return out


def dgp_model(dgp_id: str, data: Dataset | None = None) -> MomentModel:
    """Moment model for a built-in design.

    For the designs with a normalized level moment the constant is the sample
    average of the relevant transform over ``data`` (1.0 when no data is
    given: convenient for algebra-only checks, where the second moment then
    reads ``f(z) - 2 theta / 3``).
    """
    if dgp_id not in DGP_IDS:
        raise ValueError(f"unknown dgp id '{dgp_id}'")

    if dgp_id == "exponential_sq":
        def g(Z, theta):
            z = Z[:, 0]
            return np.stack([z - theta[0], z * z - 2.0 * theta[0] ** 2], axis=1)

        def H(Z, theta):
            z = Z[:, 0]
            return np.stack([np.ones_like(z), 2.0 * z], axis=1)[:, :, None]

        def G(Z, theta):
            n = Z.shape[0]
            col = np.array([-1.0, -4.0 * theta[0]])
            return np.broadcast_to(col[None, :, None], (n, 2, 1)).copy()

        def hess_zz(Z, theta, lam):
            return np.full((Z.shape[0], 1, 1), 2.0 * lam[1])

        def hess_zt(Z, theta, lam):
            return np.zeros((Z.shape[0], 1, 1))

        def hess_tt(Z, theta, lam):
            return np.full((Z.shape[0], 1, 1), -4.0 * lam[1])

        return MomentModel(name=dgp_id, d_g=2, d_x=1, d_theta=1, g=g, H=H, G=G,
                           hess_zz=hess_zz, hess_ztheta=hess_zt,
                           hess_thetatheta=hess_tt,
                           theta_init=np.array([1.0]))

    # level-moment designs ask for scale constants
    a = b = 1.0
    if data is not None:
        x = data.values[:, 0]
        a = float(np.mean(np.exp(x)))
        b = float(np.mean(_logistic(x)))

    if dgp_id == "normal_exp":
        def g(Z, theta):
            z = Z[:, 0]
            return np.stack([z - theta[0],
                             np.exp(z) - (2.0 / 3.0) * theta[0] * a], axis=1)

        def H(Z, theta):
            z = Z[:, 0]
            return np.stack([np.ones_like(z), np.exp(z)], axis=1)[:, :, None]

        def G(Z, theta):
            n = Z.shape[0]
            col = np.array([-1.0, -(2.0 / 3.0) * a])
            return np.broadcast_to(col[None, :, None], (n, 2, 1)).copy()

        def hess_zz(Z, theta, lam):
            return (lam[1] * np.exp(Z[:, 0]))[:, None, None]

    elif dgp_id == "normal_logistic":
        def g(Z, theta):
            z = Z[:, 0]
            return np.stack([z - theta[0],
                             _logistic(z) - (2.0 / 3.0) * theta[0] * b], axis=1)

        def H(Z, theta):
            z = Z[:, 0]
            ell = _logistic(z)
            return np.stack([np.ones_like(z), 2.0 * ell * (1.0 - ell)],
                            axis=1)[:, :, None]

        def G(Z, theta):
            n = Z.shape[0]
            col = np.array([-1.0, -(2.0 / 3.0) * b])
            return np.broadcast_to(col[None, :, None], (n, 2, 1)).copy()

        def hess_zz(Z, theta, lam):
            ell = _logistic(Z[:, 0])
            ellpp = 4.0 * ell * (1.0 - ell) * (1.0 - 2.0 * ell)
            return (lam[1] * ellpp)[:, None, None]

    else:  # exp_logistic
        def g(Z, theta):
            z = Z[:, 0]
            return np.stack([np.exp(z) - (2.0 / 3.0) * theta[0] * a,
                             _logistic(z) - (2.0 / 3.0) * theta[0] * b], axis=1)

        def H(Z, theta):
            z = Z[:, 0]
            ell = _logistic(z)
            return np.stack([np.exp(z), 2.0 * ell * (1.0 - ell)],
                            axis=1)[:, :, None]

        def G(Z, theta):
            n = Z.shape[0]
            col = np.array([-(2.0 / 3.0) * a, -(2.0 / 3.0) * b])
            return np.broadcast_to(col[None, :, None], (n, 2, 1)).copy()

        def hess_zz(Z, theta, lam):
            z = Z[:, 0]
            ell = _logistic(z)
            ellpp = 4.0 * ell * (1.0 - ell) * (1.0 - 2.0 * ell)
            return (lam[0] * np.exp(z) + lam[1] * ellpp)[:, None, None]

    def hess_zt(Z, theta, lam):
        return np.zeros((Z.shape[0], 1, 1))

    def hess_tt(Z, theta, lam):
        return np.zeros((Z.shape[0], 1, 1))

    return MomentModel(name=dgp_id, d_g=2, d_x=1, d_theta=1, g=g, H=H, G=G,
                       hess_zz=hess_zz, hess_ztheta=hess_zt,
                       hess_thetatheta=hess_tt, theta_init=np.array([1.0]))
