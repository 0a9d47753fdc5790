"""Zero-inflated truncated Poisson model for AvailableDays and the
log-normal regression model for Price.

Both are fitted with :func:`partsyn.mcmc.run_chain`. The count model is
sampled in the centred parameterisation ``eta_i = log(lambda_i) =
x_i . alpha + eps_i``; ``alpha`` and the error precision then have
conjugate full conditionals, and ``eps`` is recovered as ``eta - X alpha``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .data import MAX_DAYS, DesignMatrix
from .mcmc import Gibbs, Metropolis, RandomWalk, Target

_LOG_FACT = special.gammaln(np.arange(MAX_DAYS + 2) + 1.0)
_BETA_T_DF = 8
# exp() stays finite below this; rates beyond it are numerically unreachable
# for counts capped at 365 and only arise in degenerate fits.
_LOG_RATE_CAP = 700.0
_TAU_FLOOR = 1e-12


@dataclass(frozen=True)
class ModelOptions:
    """Prior conventions.

    ``tau_is_sd=False`` reads tau as the precision of the log-rate error
    (error sd ``tau ** -0.5``); ``True`` reads it as the sd itself.
    ``normal_second_arg`` says whether the second argument of the Normal
    coefficient priors is an sd or a precision. ``beta_kernel`` picks the
    update for the zero-inflation coefficients: "laplace" (independence
    proposal from the conditional mode) or "rw" (component-wise random walk).
    """

    tau_is_sd: bool = False
    normal_second_arg: str = "sd"
    zitp_coef_prior: float = 1.0
    price_coef_prior: float = 2.0
    gamma_shape: float = 0.001
    gamma_rate: float = 0.001
    upper: int = MAX_DAYS
    beta_kernel: str = "laplace"

    def prior_sd(self, arg: float) -> float:
        if self.normal_second_arg == "sd":
            return arg
        if self.normal_second_arg == "precision":
            return arg ** -0.5
        raise ValueError(f"unknown prior convention {self.normal_second_arg!r}")

    def eps_sd(self, tau):
        tau = np.asarray(tau, dtype=float)
        return tau if self.tau_is_sd else tau ** -0.5


# --- truncated Poisson -----------------------------------------------------

def log_normalizer(log_rate, upper: int = MAX_DAYS) -> np.ndarray:
    """``log sum_{j=0}^{upper} rate**j / j!`` evaluated from ``log(rate)``.

    The ``exp(-rate)`` factor is left out so the result stays finite for any
    rate; it cancels in every normalised quantity.
    """
    log_rate = np.clip(np.asarray(log_rate, dtype=float), -_LOG_RATE_CAP, _LOG_RATE_CAP)
    out = np.empty_like(log_rate)
    rate = np.exp(log_rate)
    # Upper-tail mass is below 1e-25 for rate <= 200 at upper=365; the
    # incomplete gamma is only needed above that, the direct sum far above.
    direct = rate > upper + 50 * np.sqrt(upper)
    cdf = ~direct
    out[cdf] = rate[cdf]
    tail = cdf & (rate > 0.5 * upper)
    if tail.any():
        r = rate[tail]
        log_mass = special.pdtr(upper, r)
        big = log_mass >= 0.5  # log1p of the complement keeps precision here
        with np.errstate(divide="ignore"):
            log_mass[~big] = np.log(log_mass[~big])
        log_mass[big] = np.log1p(-special.pdtrc(upper, r[big]))
        out[tail] += log_mass
    if direct.any():
        j = np.arange(upper + 1)
        terms = j * log_rate[direct, None] - _LOG_FACT[: upper + 1]
        out[direct] = special.logsumexp(terms, axis=1)
    return out


def trunc_poisson_logpmf(k, log_rate, upper: int = MAX_DAYS) -> np.ndarray:
    k = np.asarray(k)
    log_rate = np.clip(np.asarray(log_rate, dtype=float), -_LOG_RATE_CAP, _LOG_RATE_CAP)
    return k * log_rate - _LOG_FACT[k] - log_normalizer(log_rate, upper)


@dataclass(frozen=True)
class TruncPoissonSpec:
    rate: float
    upper: int = MAX_DAYS

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError(f"rate must be positive, got {self.rate}")
        if self.upper < 0:
            raise ValueError(f"bad upper bound {self.upper}")

    def logpmf(self, k) -> np.ndarray:
        k = np.asarray(k)
        if np.any((k < 0) | (k > self.upper)):
            raise ValueError(f"k outside support {{0..{self.upper}}}")
        j = np.arange(self.upper + 1)
        terms = j * np.log(self.rate) - special.gammaln(j + 1.0)
        return k * np.log(self.rate) - special.gammaln(k + 1.0) - special.logsumexp(terms)


def trunc_poisson_pmf(k, spec: TruncPoissonSpec):
    """Probability of ``k`` under a Poisson restricted to ``{0..upper}``."""
    out = np.exp(spec.logpmf(k))
    return float(out) if np.ndim(out) == 0 else out


def sample_trunc_poisson(log_rate, rng: np.random.Generator, upper: int = MAX_DAYS) -> np.ndarray:
    """Inverse-CDF draws on ``{0..upper}`` computed with log-space cumulative sums."""
    log_rate = np.clip(np.atleast_1d(np.asarray(log_rate, dtype=float)), -_LOG_RATE_CAP, _LOG_RATE_CAP)
    j = np.arange(upper + 1)
    terms = j * log_rate[:, None] - _LOG_FACT[: upper + 1]
    log_cdf = np.logaddexp.accumulate(terms, axis=1)
    log_u = np.log(rng.random(log_rate.shape[0])) + log_cdf[:, -1]
    k = (log_cdf < log_u[:, None]).sum(axis=1)
    return np.minimum(k, upper)


# --- zero-inflated truncated Poisson --------------------------------------

@dataclass
class ZitpParams:
    """Count-model parameters; ``eps`` and ``z`` are per-record latents.

    Synthesis only ever sees ``alpha``, ``beta`` and ``tau``.
    """

    alpha: np.ndarray
    beta: np.ndarray
    tau: float
    eps: np.ndarray | None = None
    z: np.ndarray | None = None

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float)
        self.tau = float(self.tau)

    def without_latents(self) -> "ZitpParams":
        return ZitpParams(self.alpha, self.beta, self.tau)

    @classmethod
    def from_named(cls, values: dict[str, float]) -> "ZitpParams":
        alpha = [v for k, v in values.items() if k.startswith("alpha[")]
        beta = [v for k, v in values.items() if k.startswith("beta[")]
        return cls(np.array(alpha), np.array(beta), values["tau"])


def _gamma_logpdf(x, shape, rate):
    return shape * np.log(rate) - special.gammaln(shape) + (shape - 1) * np.log(x) - rate * x


def zitp_log_posterior(params: ZitpParams, design: DesignMatrix, y,
                       options: ModelOptions = ModelOptions()) -> float:
    """Augmented log posterior of the count model.

    With ``params.z`` given, zero records with ``z_i = 1`` contribute
    ``log p_i`` and the rest ``log((1 - p_i) TP(y_i))``. With ``z`` left as
    None the indicator is summed out instead. ``eps`` defaults to zero.
    """
    X = design.X if isinstance(design, DesignMatrix) else np.asarray(design)
    y = np.asarray(y)
    if X.shape[0] != y.shape[0] or X.shape[1] != params.alpha.size or params.beta.size != X.shape[1]:
        raise ValueError("dimension mismatch between design, response and parameters")
    if not params.tau > 0:
        return -np.inf
    eps = np.zeros(y.shape) if params.eps is None else np.asarray(params.eps, dtype=float)
    eta = X @ params.alpha + eps
    xb = X @ params.beta
    log_p = special.log_expit(xb)
    log_1mp = special.log_expit(-xb)
    log_tp = trunc_poisson_logpmf(y, eta, options.upper)
    if params.z is None:
        zero = y == 0
        lik = np.where(zero, np.logaddexp(log_p, log_1mp + log_tp), log_1mp + log_tp)
    else:
        z = np.asarray(params.z)
        if np.any(z[y > 0] != 0):
            raise ValueError("structural-zero indicator set on a positive count")
        lik = np.where(z == 1, log_p, log_1mp + log_tp)
    coef_sd = options.prior_sd(options.zitp_coef_prior)
    prior = (stats.norm.logpdf(params.alpha, 0, coef_sd).sum()
             + stats.norm.logpdf(params.beta, 0, coef_sd).sum()
             + _gamma_logpdf(params.tau, options.gamma_shape, options.gamma_rate)
             + stats.norm.logpdf(eps, 0, options.eps_sd(params.tau)).sum())
    total = float(lik.sum() + prior)
    return total if np.isfinite(total) else -np.inf


def _gaussian_regression_draw(XtX, Xty, noise_precision, prior_sd, rng):
    Q = noise_precision * XtX + np.eye(XtX.shape[0]) / prior_sd ** 2
    L = np.linalg.cholesky(Q)
    mean = np.linalg.solve(Q, noise_precision * Xty)
    return mean + np.linalg.solve(L.T, rng.standard_normal(XtX.shape[0]))


class ZitpTarget(Target):
    traced = ("alpha", "beta", "tau")

    def __init__(self, design: DesignMatrix, y, options: ModelOptions = ModelOptions()):
        self.design = design
        self.X = design.X
        self.y = np.asarray(y, dtype=np.int64)
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError("design and response lengths differ")
        if np.any((self.y < 0) | (self.y > options.upper)):
            raise ValueError("counts outside the truncation support")
        self.options = options
        self.zero = self.y == 0
        self.XtX = self.X.T @ self.X
        self.coef_sd = options.prior_sd(options.zitp_coef_prior)

    def param_names(self) -> list[str]:
        cols = self.design.columns
        return [f"alpha[{c}]" for c in cols] + [f"beta[{c}]" for c in cols] + ["tau"]

    def initial_state(self, rng):
        y, X = self.y, self.X
        pos = ~self.zero
        eta = np.full(y.shape, np.log(y[pos]).mean() if pos.any() else 0.0)
        eta[pos] = np.log(y[pos] + 0.5)
        eta = eta + 0.05 * rng.standard_normal(y.shape)
        alpha = np.linalg.solve(self.XtX + 1e-6 * np.eye(X.shape[1]), X.T @ eta)
        resid = eta - X @ alpha
        sd = max(float(resid.std()), 0.05)
        tau = sd if self.options.tau_is_sd else sd ** -2
        beta = 0.1 * rng.standard_normal(X.shape[1])
        return {"alpha": alpha, "beta": beta, "tau": np.array([tau]),
                "eta": eta, "z": self.zero.astype(float), "beta_mode": np.zeros(X.shape[1])}

    def _precision(self, state) -> float:
        return float(self.options.eps_sd(state["tau"][0])) ** -2

    def _draw_z(self, state, rng):
        xb = self.X @ state["beta"]
        log_odds = xb + log_normalizer(state["eta"], self.options.upper)
        z = np.zeros(self.y.shape)
        u = rng.random(self.y.shape)
        z[self.zero] = u[self.zero] < special.expit(log_odds[self.zero])
        return z

    def _eta_terms(self, state):
        eta = state["eta"]
        mean = self.X @ state["alpha"]
        prior = -0.5 * self._precision(state) * (eta - mean) ** 2
        lik = self.y * eta - log_normalizer(eta, self.options.upper)
        return prior + (1 - state["z"]) * lik

    # alpha and tau are drawn with the log-rates of structural zeros
    # integrated out; those log-rates are then redrawn from their prior.
    def _draw_alpha(self, state, rng):
        obs = state["z"] == 0
        Xo = self.X[obs]
        return _gaussian_regression_draw(Xo.T @ Xo, Xo.T @ state["eta"][obs],
                                         self._precision(state), self.coef_sd, rng)

    def _observed_resid(self, state):
        obs = state["z"] == 0
        return state["eta"][obs] - self.X[obs] @ state["alpha"]

    def _draw_tau(self, state, rng):
        resid = self._observed_resid(state)
        shape = self.options.gamma_shape + 0.5 * resid.size
        rate = self.options.gamma_rate + 0.5 * float(resid @ resid)
        # With (almost) no z=0 rows the draw comes from the vague prior and
        # can underflow; keep tau positive so the error scale stays finite.
        return np.array([max(rng.gamma(shape, 1.0 / rate), _TAU_FLOOR)])

    def _tau_sd_terms(self, state):
        tau = state["tau"][0]
        return (_gamma_logpdf(tau, self.options.gamma_shape, self.options.gamma_rate)
                + stats.norm.logpdf(self._observed_resid(state), 0, tau).sum())

    def _refresh_free_eta(self, state, rng):
        free = state["z"] == 1
        eta = state["eta"].copy()
        sd = self.options.eps_sd(state["tau"][0])
        eta[free] = self.X[free] @ state["alpha"] + sd * rng.standard_normal(int(free.sum()))
        return np.clip(eta, -_LOG_RATE_CAP, _LOG_RATE_CAP)

    def _beta_terms(self, state):
        xb = self.X @ state["beta"]
        z = state["z"]
        ll = z * special.log_expit(xb) + (1 - z) * special.log_expit(-xb)
        return ll.sum() - 0.5 * float(state["beta"] @ state["beta"]) / self.coef_sd ** 2

    def _beta_mode(self, z, start):
        X = self.X
        prior_prec = np.eye(X.shape[1]) / self.coef_sd ** 2
        b = start.copy()
        for _ in range(100):
            p = special.expit(X @ b)
            H = X.T @ (X * (p * (1 - p))[:, None]) + prior_prec
            step = np.linalg.solve(H, X.T @ (z - p) - prior_prec @ b)
            b += step
            if np.max(np.abs(step)) < 1e-10:
                break
        p = special.expit(X @ b)
        return b, X.T @ (X * (p * (1 - p))[:, None]) + prior_prec

    def _propose_beta(self, state, rng):
        # Independence proposal: multivariate t around the conditional mode.
        mode, H = self._beta_mode(state["z"], state["beta_mode"])
        state["beta_mode"] = mode
        df, d = _BETA_T_DF, mode.size
        L = np.linalg.cholesky(H)
        w = rng.chisquare(df) / df
        prop = mode + np.linalg.solve(L.T, rng.standard_normal(d)) / np.sqrt(w)

        def log_q(x):
            r = L.T @ (x - mode)
            return -0.5 * (df + d) * np.log1p(r @ r / df)

        return prop, log_q(state["beta"]) - log_q(prop)

    def updates(self):
        if self.options.tau_is_sd:
            tau_update = RandomWalk("tau", self._tau_sd_terms, lower=0.0, initial_step=0.05)
        else:
            tau_update = Gibbs("tau", self._draw_tau)
        if self.options.beta_kernel == "laplace":
            beta_update = Metropolis("beta", self._beta_terms, self._propose_beta)
        else:
            beta_update = RandomWalk("beta", self._beta_terms, initial_step=0.1)
        return [
            Gibbs("z", self._draw_z),
            RandomWalk("eta", self._eta_terms, elementwise=True, initial_step=0.3,
                       lower=-_LOG_RATE_CAP, upper=_LOG_RATE_CAP),
            Gibbs("alpha", self._draw_alpha),
            tau_update,
            Gibbs("eta", self._refresh_free_eta),
            beta_update,
        ]

    def params(self, state) -> ZitpParams:
        return ZitpParams(state["alpha"], state["beta"], state["tau"][0],
                          eps=state["eta"] - self.X @ state["alpha"], z=state["z"])

    def log_density(self, state) -> float:
        return zitp_log_posterior(self.params(state), self.design, self.y, self.options)


def draw_synthetic_days(params: ZitpParams, design_rows, rng: np.random.Generator,
                        options: ModelOptions = ModelOptions()) -> np.ndarray:
    """Posterior-predictive AvailableDays for each design row.

    A fresh error ``eps*`` is drawn per record; per-record posterior latents
    are never used.
    """
    X = np.atleast_2d(np.asarray(design_rows, dtype=float))
    n = X.shape[0]
    eps = rng.standard_normal(n) * options.eps_sd(params.tau)
    log_rate = X @ params.alpha + eps
    p = special.expit(X @ params.beta)
    structural = rng.random(n) < p
    days = sample_trunc_poisson(log_rate, rng, options.upper)
    return np.where(structural, 0, days).astype(np.int64)


# --- log-normal price regression ------------------------------------------

@dataclass
class PriceParams:
    """``gamma`` ends with the AvailableDays coefficient."""

    gamma: np.ndarray
    sigma: float

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=float)
        self.sigma = float(self.sigma)

    @classmethod
    def from_named(cls, values: dict[str, float]) -> "PriceParams":
        gamma = [v for k, v in values.items() if k.startswith("gamma[")]
        return cls(np.array(gamma), values["sigma"])


def price_design(design: DesignMatrix, days) -> DesignMatrix:
    return design.with_column("AvailableDays", days)


def _half_cauchy_logpdf(x):
    return np.log(2 / np.pi) - np.log1p(x * x)


def price_log_posterior(params: PriceParams, design: DesignMatrix, days, y,
                        options: ModelOptions = ModelOptions()) -> float:
    """Normal log-likelihood of ``log(price)`` plus the coefficient and scale priors."""
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValueError("prices must be positive")
    if not params.sigma > 0:
        return -np.inf
    X = np.column_stack([design.X, np.asarray(days, dtype=float)])
    mu = X @ params.gamma
    coef_sd = options.prior_sd(options.price_coef_prior)
    total = (stats.norm.logpdf(np.log(y), mu, params.sigma).sum()
             + stats.norm.logpdf(params.gamma, 0, coef_sd).sum()
             + _half_cauchy_logpdf(params.sigma))
    return float(total)


class PriceTarget(Target):
    traced = ("gamma", "sigma")

    def __init__(self, design: DesignMatrix, days, y, options: ModelOptions = ModelOptions()):
        y = np.asarray(y, dtype=float)
        if np.any(y <= 0):
            raise ValueError("prices must be positive")
        self.design = design
        self.days = np.asarray(days, dtype=float)
        self.X = np.column_stack([design.X, self.days])
        self.logy = np.log(y)
        self.y = y
        self.options = options
        self.XtX = self.X.T @ self.X
        self.Xty = self.X.T @ self.logy
        self.coef_sd = options.prior_sd(options.price_coef_prior)

    def param_names(self) -> list[str]:
        return [f"gamma[{c}]" for c in self.design.columns] + ["gamma[AvailableDays]", "sigma"]

    def initial_state(self, rng):
        p = self.X.shape[1]
        gamma = np.linalg.solve(self.XtX + 1e-6 * np.eye(p), self.Xty)
        resid = self.logy - self.X @ gamma
        sigma = max(float(resid.std()), 1e-3) * np.exp(0.1 * rng.standard_normal())
        return {"gamma": gamma, "sigma": np.array([sigma])}

    def _draw_gamma(self, state, rng):
        return _gaussian_regression_draw(self.XtX, self.Xty, state["sigma"][0] ** -2,
                                         self.coef_sd, rng)

    def _sigma_terms(self, state):
        s = state["sigma"][0]
        resid = self.logy - self.X @ state["gamma"]
        return -resid.size * np.log(s) - 0.5 * float(resid @ resid) / s ** 2 + _half_cauchy_logpdf(s)

    def updates(self):
        return [Gibbs("gamma", self._draw_gamma),
                RandomWalk("sigma", self._sigma_terms, lower=0.0, initial_step=0.02)]

    def log_density(self, state) -> float:
        params = PriceParams(state["gamma"], state["sigma"][0])
        return price_log_posterior(params, self.design, self.days, self.y, self.options)


def draw_synthetic_logprice(params: PriceParams, design_rows, synthetic_days,
                            rng: np.random.Generator) -> np.ndarray:
    """Synthetic Price: ``exp`` of a Normal draw around the mean built from
    the key predictors and the *synthetic* AvailableDays.

    Returns prices, not log prices.
    """
    X = np.atleast_2d(np.asarray(design_rows, dtype=float))
    days = np.atleast_1d(np.asarray(synthetic_days, dtype=float))
    mu = X @ params.gamma[:-1] + params.gamma[-1] * days
    return np.exp(mu + params.sigma * rng.standard_normal(X.shape[0]))


def write_parameter_sets(sets: list[tuple[str, int, dict[str, float]]], path) -> None:
    """Tidy CSV (model, set, parameter, value) of the selected parameter sets."""
    import pandas as pd

    rows = [(model, idx, name, value) for model, idx, values in sets for name, value in values.items()]
    pd.DataFrame(rows, columns=["model", "set", "parameter", "value"]).to_csv(path, index=False)
