"""Diffusion-function estimation and risk-neutral Brownian extraction.

The diffusion coefficient is identified from realized quadratic variation:
squared path increments are regressed on squared library terms (unbiased for
the local variance rate, unlike a direct fit of |increment|/sqrt(dt), which
carries the folded-normal factor sqrt(2/pi)).  The fitted function then
inverts the discrete forward dynamics to recover the driving increments.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import kstest
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import FLOAT_FMT
from .library import LibrarySpec, build_library
from .solvers import RegressionConfig, SparseModel, fit_sparse

__all__ = [
    "DEFAULT_SIGMA_LIBRARY",
    "SigmaModel",
    "BrownianIncrements",
    "estimate_sigma_noisy",
    "fit_sigma",
    "extract_brownian",
]

DEFAULT_SIGMA_LIBRARY = ("1", "x", "x^2", "sqrt(x)")


def estimate_sigma_noisy(path):
    """Pointwise volatility proxy |dX_i| / sqrt(dt_i) from single increments."""
    if len(path) < 3:
        raise ValueError("need at least 2 increments to estimate a diffusion")
    dx = np.diff(path.stock)
    dt = path.grid.increments
    return np.abs(dx) / np.sqrt(dt)


class SigmaModel(BaseEstimator):
    """Sparse diffusion function sigma(x) fitted from one trajectory.

    Parameters mirror the regression backend; ``library`` holds term names
    over the single feature ``x``.  With ``variance_form`` (default) the
    squared increments are regressed on squared terms and the fitted variance
    rate is evaluated under a square root; the flag disables that in favor of
    the literal fit of the noisy sigma proxy on the plain terms.  ``window``
    applies a centered moving average to the squared increments before
    fitting, for noisy real data.
    """

    def __init__(
        self,
        library=DEFAULT_SIGMA_LIBRARY,
        method="sr3",
        variance_form=True,
        window=1,
        reg_grid=None,
    ):
        self.library = library
        self.method = method
        self.variance_form = variance_form
        self.window = window
        self.reg_grid = reg_grid

    def _config(self):
        kwargs = {"method": self.method}
        if self.reg_grid is not None:
            kwargs["reg_grid"] = tuple(self.reg_grid)
        return RegressionConfig(**kwargs)

    def fit(self, path):
        spec = LibrarySpec.from_names(list(self.library))
        x = path.stock[:-1]
        dt = path.grid.increments
        dx = np.diff(path.stock)
        sq = dx**2
        if self.window > 1:
            kernel = np.ones(self.window) / self.window
            sq = np.convolve(sq, kernel, mode="same")
        phi = build_library(spec, {"x": x})
        if self.variance_form:
            target = sq / dt
            design = phi.values**2
            # Squared-increment noise is chi-squared with std proportional to
            # the local variance rate, so reweight rows by a pilot fit before
            # the sparse scan (two-stage feasible generalized least squares).
            pilot, *_ = np.linalg.lstsq(design, target, rcond=None)
            rate = design @ pilot
            floor = max(1e-12, 0.05 * float(np.median(rate[rate > 0])) if (rate > 0).any() else 1e-12)
            weights = 1.0 / np.clip(rate, floor, None)
            weights /= weights.mean()
            from .library import LibraryMatrix

            weighted = LibraryMatrix(design * weights[:, None], [f"({n})^2" for n in phi.names])
            model = fit_sparse(weighted, target * weights, self._config())
            var_coef = model.coefficients
            nu = np.sign(var_coef) * np.sqrt(np.abs(var_coef))
        else:
            target = np.abs(dx) / np.sqrt(dt)
            model = fit_sparse(phi, target, self._config())
            nu = model.coefficients
            var_coef = None
        self.spec_ = spec
        self.nu_ = SparseModel(spec.names, nu, dict(model.diagnostics))
        self.variance_coefficients_ = var_coef
        self.x_range_ = (float(path.stock.min()), float(path.stock.max()))
        self._validate_positivity()
        return self

    def _validate_positivity(self):
        lo, hi = self.x_range_
        grid = np.linspace(lo, hi, 512)
        values = self.sigma(grid, validate=False)
        if not np.all(values > 0):
            bad = grid[np.argmin(values)]
            raise ValueError(
                f"fitted diffusion is non-positive on the data range (e.g. at x={bad:.6g}); model rejected"
            )

    def variance_rate(self, x, validate=True):
        """Fitted instantaneous variance sigma(x)^2."""
        if validate:
            check_is_fitted(self, "nu_")
        x = np.asarray(x, dtype=float)
        phi = build_library(self.spec_, {"x": np.atleast_1d(x)})
        if self.variance_coefficients_ is not None:
            rate = phi.values**2 @ self.variance_coefficients_
        else:
            rate = (phi.values @ self.nu_.coefficients) ** 2
        return rate if x.ndim else float(rate[0])

    def sigma(self, x, validate=True):
        """Evaluate sigma(x); square root of the fitted variance rate."""
        if validate:
            check_is_fitted(self, "nu_")
        x = np.asarray(x, dtype=float)
        if self.variance_coefficients_ is not None:
            rate = self.variance_rate(x, validate=False)
            out = np.sqrt(np.maximum(np.atleast_1d(rate), 0.0))
        else:
            phi = build_library(self.spec_, {"x": np.atleast_1d(x)})
            out = phi.values @ self.nu_.coefficients
        return out if x.ndim else float(out[0])

    def __call__(self, x):
        return self.sigma(x)

    def to_dict(self):
        check_is_fitted(self, "nu_")
        return {
            "library": list(self.library),
            "variance_form": bool(self.variance_form),
            "nu": self.nu_.to_dict(),
            "variance_coefficients": (
                None
                if self.variance_coefficients_ is None
                else [float(c) for c in self.variance_coefficients_]
            ),
            "x_range": list(self.x_range_),
        }

    @classmethod
    def from_dict(cls, data):
        model = cls(library=tuple(data["library"]), variance_form=data["variance_form"])
        model.spec_ = LibrarySpec.from_names(list(data["library"]))
        model.nu_ = SparseModel.from_dict(data["nu"])
        vc = data.get("variance_coefficients")
        model.variance_coefficients_ = None if vc is None else np.asarray(vc, dtype=float)
        model.x_range_ = tuple(data["x_range"])
        return model


def fit_sigma(path, library=DEFAULT_SIGMA_LIBRARY, config=None, variance_form=True, window=1):
    """Fit a :class:`SigmaModel` on a trajectory pair (stock side only)."""
    model = SigmaModel(
        library=tuple(library),
        method=(config.method if config else "sr3"),
        variance_form=variance_form,
        window=window,
        reg_grid=(tuple(config.reg_grid) if config else None),
    )
    return model.fit(path)


@dataclass(frozen=True)
class BrownianIncrements:
    """Recovered risk-neutral Brownian increments with normality diagnostics."""

    t: np.ndarray
    db: np.ndarray
    dt: np.ndarray
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("t", "db", "dt"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            object.__setattr__(self, name, arr)
        if not (len(self.t) == len(self.db) == len(self.dt)):
            raise ValueError("t, db, dt must have equal length")

    def __len__(self):
        return len(self.db)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t", "db", "dt"])
            for t, db, dt in zip(self.t, self.db, self.dt):
                writer.writerow([FLOAT_FMT.format(t), FLOAT_FMT.format(db), FLOAT_FMT.format(dt)])

    def diagnostics_json(self, path=None):
        text = json.dumps({k: float(v) for k, v in self.diagnostics.items()}, indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


EPS_DIVISOR = 1e-8


def extract_brownian(path, r, sigma, eps=EPS_DIVISOR):
    """Invert the discrete forward dynamics: dB = (dX - r X dt) / sigma(X).

    ``sigma`` is any callable x -> sigma(x) (typically a fitted
    :class:`SigmaModel`).  Divisors below ``eps`` abort with the offending
    sample index.
    """
    x = path.stock[:-1]
    dt = path.grid.increments
    dx = np.diff(path.stock)
    sig = np.asarray(sigma(x), dtype=float)
    too_small = sig < eps
    if too_small.any():
        idx = int(np.flatnonzero(too_small)[0])
        raise ValueError(f"diffusion value {sig[idx]:.3g} below {eps} at sample {idx}")
    db = (dx - r * x * dt) / sig
    standardized = db / np.sqrt(dt)
    ks = kstest(standardized, "norm")
    diagnostics = {
        "mean": float(db.mean()),
        "variance_ratio": float(db.var() / dt.mean()),
        "ks_statistic": float(ks.statistic),
        "ks_pvalue": float(ks.pvalue),
    }
    return BrownianIncrements(path.times[:-1], db, dt, diagnostics)
