"""Geometric Brownian motion simulation and Black-Scholes call pricing.

Provides the ground-truth data generators and analytical oracles used by the
benchmark: exact log-scheme GBM paths under the market (P) or risk-neutral
(Q) measure, closed-form call prices and Greeks, a Monte Carlo pricer built
on an independent additive Euler scheme, and a factory producing aligned
(stock, option) trajectory pairs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.stats import norm

from ._validation import read_json_source
from .data import PathPair, TimeGrid

__all__ = [
    "ModelParams",
    "simulate_gbm",
    "simulate_gbm_euler",
    "bs_price",
    "bs_greeks",
    "make_dataset",
    "monte_carlo_price",
]


@dataclass(frozen=True)
class ModelParams:
    """Market parameters for the lognormal benchmark model.

    ``mu`` is the drift under P, ``r`` the risk-free rate (drift under Q),
    ``sigma`` the volatility, ``strike``/``maturity`` the call contract and
    ``x0`` the initial stock price.
    """

    mu: float = 0.3
    sigma: float = 0.2
    r: float = 0.1
    strike: float = 1.0
    maturity: float = 1.0
    x0: float = 1.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")
        for name in ("strike", "maturity", "x0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive, got {getattr(self, name)}")

    def to_json(self, path=None):
        text = json.dumps(asdict(self), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_json(cls, source):
        data = json.loads(read_json_source(source))
        known = {"mu", "sigma", "r", "strike", "maturity", "x0"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model parameter keys: {sorted(unknown)}")
        return cls(**data)


def simulate_gbm(params, grid, measure="Q", seed=0, return_increments=False):
    """Simulate one GBM stock path on ``grid`` with the exact log scheme.

    X_{i+1} = X_i * exp((d - sigma^2/2) dt_i + sigma sqrt(dt_i) xi_i) with
    d = mu under P and d = r under Q.  The normal draws depend only on
    (seed, number of steps), so P and Q paths with the same seed share their
    noise and differ per step exactly by the drift factor exp((mu - r) dt).
    """
    if measure not in ("P", "Q"):
        raise ValueError(f"measure must be 'P' or 'Q', got {measure!r}")
    drift = params.mu if measure == "P" else params.r
    dt = grid.increments
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal(len(dt))
    sqdt = np.sqrt(dt)
    log_steps = (drift - 0.5 * params.sigma**2) * dt + params.sigma * sqdt * xi
    stock = np.empty(len(grid))
    stock[0] = params.x0
    stock[1:] = params.x0 * np.exp(np.cumsum(log_steps))
    if return_increments:
        return stock, sqdt * xi
    return stock


def simulate_gbm_euler(params, grid, measure="Q", seed=0):
    """Additive Euler-Maruyama GBM path: X' = X + d X dt + sigma X dW.

    Kept separate from :func:`simulate_gbm` so Monte Carlo oracles do not
    share a discretization with the exact scheme they are checking.
    """
    if measure not in ("P", "Q"):
        raise ValueError(f"measure must be 'P' or 'Q', got {measure!r}")
    drift = params.mu if measure == "P" else params.r
    dt = grid.increments
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal(len(dt))
    stock = np.empty(len(grid))
    stock[0] = params.x0
    x = params.x0
    for i, (h, z) in enumerate(zip(dt, xi)):
        x = x + drift * x * h + params.sigma * x * np.sqrt(h) * z
        stock[i + 1] = x
    return stock


def _check_price_domain(t, s, params):
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(t > params.maturity + 1e-12) or np.any(t < 0):
        raise ValueError("t must lie in [0, maturity]")
    if np.any(s <= 0):
        raise ValueError("stock price must be strictly positive")
    return t, s


def bs_price(t, s, params):
    """European call value at time ``t`` and spot ``s``; payoff at maturity."""
    t, s = _check_price_domain(t, s, params)
    tau = params.maturity - t
    payoff = np.maximum(s - params.strike, 0.0)
    if params.sigma == 0.0:
        value = np.maximum(s - params.strike * np.exp(-params.r * tau), 0.0)
        return value if value.ndim else float(value)
    at_expiry = tau <= 0
    tau_safe = np.where(at_expiry, 1.0, tau)
    sq = params.sigma * np.sqrt(tau_safe)
    d1 = (np.log(s / params.strike) + (params.r + 0.5 * params.sigma**2) * tau_safe) / sq
    d2 = d1 - sq
    value = s * norm.cdf(d1) - params.strike * np.exp(-params.r * tau_safe) * norm.cdf(d2)
    value = np.where(at_expiry, payoff, value)
    return value if value.ndim else float(value)


def bs_greeks(t, s, params):
    """Analytical (theta, delta, gamma) = (u_t, u_x, u_xx) of the call.

    Raises at t = maturity where gamma is singular at the payoff kink.
    """
    t, s = _check_price_domain(t, s, params)
    if params.sigma <= 0:
        raise ValueError("greeks require sigma > 0")
    tau = params.maturity - t
    if np.any(tau <= 0):
        raise ValueError("greeks are singular at maturity; require t < maturity")
    sq = params.sigma * np.sqrt(tau)
    d1 = (np.log(s / params.strike) + (params.r + 0.5 * params.sigma**2) * tau) / sq
    d2 = d1 - sq
    delta = norm.cdf(d1)
    gamma = norm.pdf(d1) / (s * sq)
    theta = -s * norm.pdf(d1) * params.sigma / (2 * np.sqrt(tau)) - (
        params.r * params.strike * np.exp(-params.r * tau) * norm.cdf(d2)
    )
    if np.ndim(theta) == 0:
        return float(theta), float(delta), float(gamma)
    return theta, delta, gamma


def make_dataset(params, n_steps, seed=0, horizon=None):
    """Ground-truth (stock, option) pair on a uniform grid over [0, horizon].

    The stock follows one Q-measure path; option values are closed-form call
    prices along it, so the terminal value equals the payoff exactly.  The
    injected Brownian increments are kept in ``meta['brownian_increments']``
    for round-trip diagnostics.
    """
    if n_steps < 2:
        raise ValueError("n_steps must be >= 2")
    horizon = params.maturity if horizon is None else float(horizon)
    if not 0 < horizon <= params.maturity:
        raise ValueError("horizon must lie in (0, maturity]")
    grid = TimeGrid.uniform(0.0, horizon, n_steps)
    stock, db = simulate_gbm(params, grid, measure="Q", seed=seed, return_increments=True)
    option = bs_price(grid.times, stock, params)
    pair = PathPair(grid, stock, option, meta={"brownian_increments": db, "seed": seed})
    if horizon == params.maturity:
        pair.check_terminal_payoff(params.strike, atol=0.0)
    return pair


def monte_carlo_price(t, s, params, n_paths=10_000, seed=0, n_steps=200):
    """Discounted-payoff Monte Carlo call price, with its standard error.

    Uses the additive Euler scheme on a uniform grid so the estimate is
    independent of both the closed form and the exact log scheme.  At
    maturity it returns the payoff with zero error.
    """
    if n_paths < 100:
        raise ValueError("n_paths must be >= 100")
    _check_price_domain(t, s, params)
    tau = params.maturity - float(t)
    if tau <= 0:
        return max(float(s) - params.strike, 0.0), 0.0
    rng = np.random.default_rng(seed)
    dt = tau / n_steps
    x = np.full(n_paths, float(s))
    for _ in range(n_steps):
        z = rng.standard_normal(n_paths)
        x = x + params.r * x * dt + params.sigma * x * np.sqrt(dt) * z
    payoff = np.exp(-params.r * tau) * np.maximum(x - params.strike, 0.0)
    mean = float(payoff.mean())
    std_error = float(payoff.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0
    return mean, std_error
