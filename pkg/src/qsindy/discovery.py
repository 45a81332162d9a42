"""Identification of the discrete backward dynamics of the option price.

The observed option increments are regressed jointly on a drift library
scaled by the timestep and a diffusion library scaled by the extracted
Brownian increments:

    dY_i  ~  Theta_f(features_i) @ xi_f * dt_i  +  Theta_z(features_i) @ xi_z * dB_i

The stored ``xi_f`` are therefore the drift coefficients of the option price
(positive for the lognormal benchmark); the driver of the backward form
``dY = -f dt + Z dB`` is ``f = -Theta_f @ xi_f``.  By default the target is
compensated for the discrete quadratic-variation remainder
``0.5 * u_xx * (dX^2 - sigma(x)^2 dt)`` (a second-order Ito correction using
only quantities the pipeline already estimates), which removes the dominant
noise of the plain Euler residual and sharpens the recovered coefficients by
more than an order of magnitude at benchmark scales.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._validation import read_json_source
from .diffusion import extract_brownian, fit_sigma
from .library import LibraryMatrix, LibrarySpec, build_library
from .market import bs_greeks, bs_price
from .solvers import RegressionConfig, SparseModel, fit_sparse

__all__ = [
    "DEFAULT_DRIVER_LIBRARY",
    "DEFAULT_DIFFUSION_LIBRARY",
    "BENCHMARK_DRIVER_LIBRARY",
    "BsdeLibraryConfig",
    "DiscoveredBSDE",
    "AnalyticalSurface",
    "build_bsde_regressors",
    "discover",
    "format_bsde",
    "parse_bsde",
]

DEFAULT_DRIVER_LIBRARY = ("1", "x", "y", "u", "u_t", "u_x", "u_xx", "x*u_x", "x^2*u_xx")
DEFAULT_DIFFUSION_LIBRARY = ("1", "x", "u_x", "x*u_x")
# On-path the option value y and the surface value u are interchangeable with
# a one-term representation of the drift (r*y), so a library containing them
# is not identifiable toward the derivative-based structure.  The benchmark
# library drops both and keeps distractors that sparsity must eliminate.
BENCHMARK_DRIVER_LIBRARY = ("1", "u_t", "u_x", "x*u_x", "x^2*u_xx")

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class BsdeLibraryConfig:
    """Library and regression settings for the dynamics identification."""

    driver_library: tuple = DEFAULT_DRIVER_LIBRARY
    diffusion_library: tuple = DEFAULT_DIFFUSION_LIBRARY
    regression: RegressionConfig = field(default_factory=RegressionConfig)
    ito_correction: bool = True
    max_rows: int = 100_000
    drop_price_terms: bool = False

    def __post_init__(self):
        if not self.driver_library or not self.diffusion_library:
            raise ValueError("both library partitions must be non-empty")
        if self.drop_price_terms:
            pruned = tuple(t for t in self.driver_library if t not in ("y", "u"))
            object.__setattr__(self, "driver_library", pruned)

    @classmethod
    def benchmark(cls, **overrides):
        return cls(driver_library=BENCHMARK_DRIVER_LIBRARY, **overrides)


class AnalyticalSurface:
    """Closed-form stand-in for a fitted surface (oracle substitution)."""

    def __init__(self, params):
        self.params = params

    def predict(self, t, x):
        return bs_price(t, x, self.params)

    def derivatives(self, t, x):
        u = bs_price(t, x, self.params)
        u_t, u_x, u_xx = bs_greeks(t, x, self.params)
        return u, u_t, u_x, u_xx


def build_bsde_regressors(path, surface, increments, cfg=None, sigma=None):
    """Target and stacked regression matrix for the joint identification.

    Returns ``(target, block_matrix, names, n_driver_columns)`` where the
    first ``n_driver_columns`` columns are driver terms scaled by dt and the
    rest are diffusion terms scaled by the Brownian increments.
    """
    cfg = cfg or BsdeLibraryConfig()
    n = len(path) - 1
    if len(increments) != n:
        raise ValueError(f"increments length {len(increments)} != {n} path increments")
    idx = np.arange(n)
    if n > cfg.max_rows:
        idx = np.unique(np.linspace(0, n - 1, cfg.max_rows).astype(int))
    dt = path.grid.increments[idx]
    db = increments.db[idx]
    dy = np.diff(path.option)[idx]
    dx = np.diff(path.stock)[idx]
    sub = _subset_features(path, surface, idx)

    target = dy.copy()
    if cfg.ito_correction and sigma is not None:
        rate = np.asarray(sigma.variance_rate(sub["x"]))
        target = target - 0.5 * sub["u_xx"] * (dx**2 - rate * dt)

    f_spec = LibrarySpec.from_names(list(cfg.driver_library))
    z_spec = LibrarySpec.from_names(list(cfg.diffusion_library))
    theta_f = build_library(f_spec, sub)
    theta_z = build_library(z_spec, sub)
    block = np.hstack([theta_f.values * dt[:, None], theta_z.values * db[:, None]])
    names = [f"f:{n}" for n in theta_f.names] + [f"z:{n}" for n in theta_z.names]
    return target, block, names, len(f_spec)


def _subset_features(path, surface, idx):
    t = path.times[:-1][idx]
    x = path.stock[:-1][idx]
    y = path.option[:-1][idx]
    u, u_t, u_x, u_xx = surface.derivatives(t, x)
    features = {"x": x, "y": y, "u": np.asarray(u), "u_t": np.asarray(u_t),
                "u_x": np.asarray(u_x), "u_xx": np.asarray(u_xx)}
    for name, col in features.items():
        bad = ~np.isfinite(col)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise ValueError(
                f"feature {name!r} is non-finite at sample {idx[i]} (t={t[i]:.6g}, x={x[i]:.6g})"
            )
    return features


@dataclass
class DiscoveredBSDE:
    """The identified discrete law for the (stock, option) pair.

    ``xi_f`` holds drift coefficients (option drift = Theta_f @ xi_f) and
    ``xi_z`` diffusion coefficients (Z = Theta_z @ xi_z); ``sigma`` is the
    fitted stock diffusion function and ``r`` the risk-free drift used for
    extraction and forward simulation.
    """

    xi_f: SparseModel
    xi_z: SparseModel
    sigma: object
    r: float
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self._f_spec = LibrarySpec.from_names(list(self.xi_f.terms))
        self._z_spec = LibrarySpec.from_names(list(self.xi_z.terms))

    def drift(self, features):
        """Option drift rate: expected dY per unit time at given features."""
        return build_library(self._f_spec, features).values @ self.xi_f.coefficients

    def driver(self, features):
        """Driver of the backward form dY = -f dt + Z dB (f = -drift)."""
        return -self.drift(features)

    def z_value(self, features):
        """Diffusion loading Z at given features."""
        return build_library(self._z_spec, features).values @ self.xi_z.coefficients

    @property
    def equation(self):
        return format_bsde(self)

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "xi_f": self.xi_f.to_dict(),
            "xi_z": self.xi_z.to_dict(),
            "sigma": self.sigma.to_dict() if hasattr(self.sigma, "to_dict") else None,
            "r": float(self.r),
            "equation": self.equation,
            "provenance": _plain(self.provenance),
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_dict(cls, data):
        from .diffusion import SigmaModel

        if data.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema version {data.get('schema_version')!r}")
        sigma = SigmaModel.from_dict(data["sigma"]) if data.get("sigma") else None
        return cls(
            xi_f=SparseModel.from_dict(data["xi_f"]),
            xi_z=SparseModel.from_dict(data["xi_z"]),
            sigma=sigma,
            r=float(data["r"]),
            provenance=dict(data.get("provenance", {})),
        )

    @classmethod
    def from_json(cls, source):
        return cls.from_dict(json.loads(read_json_source(source)))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def discover(path, surface, cfg=None, r=0.0, sigma=None, increments=None):
    """Identify the discrete backward dynamics on a trajectory window.

    Fits the diffusion function (unless given), extracts the Brownian
    increments (unless given), builds the two-block regressors and solves
    the joint sparse regression.  Raises on a degenerate result where either
    partition ends up with no active terms.
    """
    cfg = cfg or BsdeLibraryConfig()
    if sigma is None:
        sigma = fit_sigma(path)
    if increments is None:
        increments = extract_brownian(path, r, sigma)
    target, block, names, n_driver = build_bsde_regressors(path, surface, increments, cfg, sigma)
    groups = (tuple(range(n_driver)), tuple(range(n_driver, block.shape[1])))
    joint = fit_sparse(LibraryMatrix(block, names), target, cfg.regression, floor_groups=groups)
    coefs = joint.coefficients
    f_coefs, z_coefs = coefs[:n_driver], coefs[n_driver:]
    if not np.any(f_coefs) or not np.any(z_coefs):
        raise ValueError("degenerate discovery: a library partition has no active terms")
    residual = target - block @ coefs
    diagnostics = dict(joint.diagnostics)
    xi_f = SparseModel(list(cfg.driver_library), f_coefs, {"partition": "driver", **diagnostics})
    xi_z = SparseModel(list(cfg.diffusion_library), z_coefs, {"partition": "diffusion"})
    provenance = {
        "n_rows": int(block.shape[0]),
        "window": [float(path.times[0]), float(path.times[-1])],
        "rate": float(r),
        "ito_correction": bool(cfg.ito_correction),
        "residual_rms": float(np.sqrt(np.mean(residual**2))),
        "mean_dt": float(np.mean(path.grid.increments)),
        "extraction_diagnostics": dict(increments.diagnostics),
    }
    return DiscoveredBSDE(xi_f=xi_f, xi_z=xi_z, sigma=sigma, r=r, provenance=provenance)


def format_bsde(model, digits=4):
    """Human-readable rendering of the identified law.

    Coefficients print at ``digits`` significant digits; zero terms are
    omitted.  The drift block is rendered inside the conventional
    ``-[...]dt`` template of backward equations, so the printed magnitudes
    are the stored drift coefficients.
    """

    def block(sparse):
        parts = [
            f"{coef:.{digits}g}·{name}"
            for name, coef in zip(sparse.terms, sparse.coefficients)
            if coef != 0.0
        ]
        return " + ".join(parts)

    return f"dY = -[{block(model.xi_f)}]dt + [{block(model.xi_z)}]dB^Q"


_TERM_RE = re.compile(r"^\s*(?P<coef>[-+]?[\d.eE+-]+)·(?P<name>.+?)\s*$")


def parse_bsde(text):
    """Inverse of :func:`format_bsde`: returns (driver, diffusion) dicts."""
    m = re.match(r"^dY = -\[(?P<f>.*)\]dt \+ \[(?P<z>.*)\]dB\^Q$", text.strip())
    if m is None:
        raise ValueError(f"cannot parse equation {text!r}")

    def parse_block(block):
        out = {}
        if not block.strip():
            return out
        for part in block.split(" + "):
            tm = _TERM_RE.match(part)
            if tm is None:
                raise ValueError(f"cannot parse term {part!r}")
            out[tm.group("name")] = float(tm.group("coef"))
        return out

    return parse_block(m.group("f")), parse_block(m.group("z"))
