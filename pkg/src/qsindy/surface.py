"""Differentiable price-surface fitting with a physics-regularized network.

A small fully connected network approximates the option value u(t, x) from
the single observed trajectory pair.  Besides the data misfit, the training
loss penalizes the residual u_t - Psi(x, u, u_x, u_xx) @ zeta on collocation
points, where zeta is an auxiliary sparse coefficient vector over a library
of candidate right-hand-side terms; this couples the partial derivatives to
an (unknown) parabolic structure and is what makes second derivatives of the
fit usable.  zeta is discarded after training.

Everything runs in float64 on a single thread, so training is reproducible
bit-for-bit for a fixed seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .library import LibrarySpec

__all__ = [
    "DEFAULT_PHYSICS_LIBRARY",
    "FitConfig",
    "SurfaceFitter",
    "train_surface",
    "sample_collocation",
    "eval_derivatives",
]

DEFAULT_PHYSICS_LIBRARY = ("1", "u", "u_x", "u_xx", "x*u_x", "x^2*u_xx")

_ACTIVATIONS = {"tanh": torch.nn.Tanh, "softplus": torch.nn.Softplus, "sigmoid": torch.nn.Sigmoid}


@dataclass(frozen=True)
class FitConfig:
    """Training configuration for :class:`SurfaceFitter`."""

    hidden_layers: tuple = (64, 64, 64, 64)
    activation: str = "tanh"
    alpha: float = 1.0
    gamma: float = 0.1
    delta: float = 1e-4
    n_collocation: int = 4096
    # fraction of the observed x-span padded onto both sides of the
    # collocation rectangle; keeps derivatives usable slightly beyond the
    # realized path without fabricating data there
    collocation_margin: float = 0.15
    physics_library: tuple = DEFAULT_PHYSICS_LIBRARY
    warmup_steps: int = 500
    warmup_lr: float = 5e-3
    outer_iterations: int = 40
    lbfgs_iterations: int = 150
    tolerance_grad: float = 1e-12
    max_data_points: int = 5000
    min_window: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.gamma < 0 or self.delta < 0:
            raise ValueError("loss weights must be non-negative")
        if self.n_collocation < 1:
            raise ValueError("n_collocation must be >= 1")


def sample_collocation(bounds, n_points, seed=0):
    """Uniform points over the rectangle [t_lo, t_hi] x [x_lo, x_hi]."""
    (t_lo, t_hi), (x_lo, x_hi) = bounds
    if not (t_lo <= t_hi and x_lo <= x_hi):
        raise ValueError("bounds must be non-empty intervals")
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    rng = np.random.default_rng(seed)
    t = rng.uniform(t_lo, t_hi, n_points)
    x = rng.uniform(x_lo, x_hi, n_points)
    return np.column_stack([t, x])


def _make_net(hidden_layers, activation, seed):
    torch.manual_seed(seed)
    act = _ACTIVATIONS[activation]
    sizes = [2, *hidden_layers, 1]
    layers = []
    for i in range(len(sizes) - 1):
        layers.append(torch.nn.Linear(sizes[i], sizes[i + 1], dtype=torch.float64))
        if i < len(sizes) - 2:
            layers.append(act())
    return torch.nn.Sequential(*layers)


def _eval_terms_torch(spec, features):
    """Evaluate monomial library terms on a dict of torch tensors."""
    cols = []
    n = next(iter(features.values())).shape[0]
    one = torch.ones(n, dtype=torch.float64)
    for term in spec.terms:
        col = one
        for feat, power in term.powers.items():
            col = col * features[feat] ** power
        cols.append(col)
    return torch.stack(cols, dim=1)


class SurfaceFitter(BaseEstimator):
    """Physics-regularized approximator of the option-value surface u(t, x).

    After ``fit`` the object answers value and derivative queries in raw
    units; derivatives come from automatic differentiation with chain-rule
    correction for the internal input normalization (inputs are mapped
    affinely to [-1, 1]^2, the output is standardized).
    """

    def __init__(self, config=None):
        self.config = config

    # -- normalization --------------------------------------------------

    def _to_normalized(self, t, x):
        tn = (t - self._t_shift) * self._t_scale
        xn = (x - self._x_shift) * self._x_scale
        return tn, xn

    def _forward(self, tn, xn):
        out = self.net_(torch.stack([tn, xn], dim=1)).squeeze(-1)
        return out * self._y_scale + self._y_shift

    def _derivatives_torch(self, t, x, need_xx=True):
        """u and raw-unit derivatives at torch tensors t, x (graph-enabled)."""
        tn, xn = self._to_normalized(t, x)
        tn = tn.detach().requires_grad_(True)
        xn = xn.detach().requires_grad_(True)
        u = self._forward(tn, xn)
        grad_t, grad_x = torch.autograd.grad(u.sum(), (tn, xn), create_graph=True)
        u_t = grad_t * self._t_scale
        u_x = grad_x * self._x_scale
        if need_xx:
            grad_xx = torch.autograd.grad(grad_x.sum(), xn, create_graph=True)[0]
            u_xx = grad_xx * self._x_scale**2
        else:
            u_xx = None
        return u, u_t, u_x, u_xx

    # -- training --------------------------------------------------------

    def fit(self, path, warm_start=False):
        cfg = self.config or FitConfig()
        t = np.asarray(path.times, dtype=float)
        x = np.asarray(path.stock, dtype=float)
        y = np.asarray(path.option, dtype=float)
        if len(t) < cfg.min_window:
            raise ValueError(f"window has {len(t)} points; minimum is {cfg.min_window}")

        n_threads = torch.get_num_threads()
        torch.set_num_threads(1)
        try:
            return self._fit_impl(cfg, t, x, y, warm_start)
        finally:
            torch.set_num_threads(n_threads)

    def _fit_impl(self, cfg, t, x, y, warm_start):
        if not (warm_start and hasattr(self, "net_")):
            span_t = max(t.max() - t.min(), 1e-12)
            span_x = max(x.max() - x.min(), 1e-12)
            self._t_shift, self._t_scale = (t.min() + t.max()) / 2.0, 2.0 / span_t
            self._x_shift, self._x_scale = (x.min() + x.max()) / 2.0, 2.0 / span_x
            self._y_shift = float(y.mean())
            self._y_scale = float(max(y.std(), 1e-12))
            self.net_ = _make_net(cfg.hidden_layers, cfg.activation, cfg.seed)
            spec = LibrarySpec.from_names(list(cfg.physics_library))
            self._physics_spec = spec
            self.zeta_ = torch.zeros(len(spec), dtype=torch.float64, requires_grad=True)

        if len(t) > cfg.max_data_points:
            stride_idx = np.unique(np.linspace(0, len(t) - 1, cfg.max_data_points).astype(int))
        else:
            stride_idx = np.arange(len(t))
        td = torch.from_numpy(t[stride_idx])
        xd = torch.from_numpy(x[stride_idx])
        yd = torch.from_numpy(y[stride_idx])

        pad = cfg.collocation_margin * (x.max() - x.min())
        colloc = sample_collocation(
            ((t.min(), t.max()), (x.min() - pad, x.max() + pad)),
            cfg.n_collocation,
            seed=cfg.seed + 1,
        )
        tc = torch.from_numpy(colloc[:, 0])
        xc = torch.from_numpy(colloc[:, 1])

        params = list(self.net_.parameters()) + [self.zeta_]

        def loss_terms():
            tn, xn = self._to_normalized(td, xd)
            pred = self._forward(tn, xn)
            data_loss = torch.mean((pred - yd) ** 2)
            if cfg.gamma > 0:
                u, u_t, u_x, u_xx = self._derivatives_torch(tc, xc)
                psi = _eval_terms_torch(
                    self._physics_spec, {"x": xc, "u": u, "u_x": u_x, "u_xx": u_xx}
                )
                resid = u_t - psi @ self.zeta_
                physics_loss = torch.mean(resid**2)
            else:
                physics_loss = torch.zeros((), dtype=torch.float64)
            # smoothed |zeta| so the quasi-Newton line search is not defeated
            # by the kink at zero
            reg = torch.sum(torch.sqrt(self.zeta_**2 + 1e-16))
            total = cfg.alpha * data_loss + cfg.gamma * physics_loss + cfg.delta * reg
            return total, data_loss, physics_loss

        if cfg.warmup_steps > 0 and not warm_start:
            adam = torch.optim.Adam(params, lr=cfg.warmup_lr)
            for _ in range(cfg.warmup_steps):
                adam.zero_grad()
                total, _, _ = loss_terms()
                total.backward()
                adam.step()

        # quasi-Newton main phase: scipy's L-BFGS-B driving the torch graph,
        # restarted in chunks so the candidate-term matrix in the physics
        # residual is tracked at the recorded outer iterations
        shapes = [p.shape for p in params]
        sizes = [p.numel() for p in params]

        def set_flat(v):
            offset = 0
            with torch.no_grad():
                for p, size, shape in zip(params, sizes, shapes):
                    p.copy_(torch.from_numpy(v[offset : offset + size]).reshape(shape))
                    offset += size

        def fun(v):
            set_flat(v)
            for p in params:
                p.grad = None
            total, _, _ = loss_terms()
            total.backward()
            grad = np.concatenate(
                [
                    (p.grad.numpy().ravel() if p.grad is not None else np.zeros(p.numel()))
                    for p in params
                ]
            )
            return float(total.detach()), grad

        flat = np.concatenate([p.detach().numpy().ravel() for p in params])
        history = []
        converged = False
        for _ in range(cfg.outer_iterations):
            result = minimize(
                fun,
                flat,
                jac=True,
                method="L-BFGS-B",
                options={
                    "maxiter": cfg.lbfgs_iterations,
                    "maxcor": 50,
                    "ftol": 0.0,
                    "gtol": cfg.tolerance_grad,
                    "maxls": 40,
                },
            )
            flat = result.x
            set_flat(flat)
            total, data_loss, physics_loss = (float(v.detach()) for v in loss_terms())
            history.append({"total": total, "data": data_loss, "physics": physics_loss})
            if result.nit < 2:
                converged = True
                break

        self.loss_history_ = history
        self.converged_ = converged or bool(
            history and history[-1]["total"] <= history[0]["total"]
        )
        self.final_losses_ = history[-1] if history else {"total": np.nan}
        self.train_bounds_ = ((float(t.min()), float(t.max())), (float(x.min()), float(x.max())))
        return self

    # -- queries ----------------------------------------------------------

    def predict(self, t, x):
        check_is_fitted(self, "net_")
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        x_arr = np.atleast_1d(np.asarray(x, dtype=float))
        with torch.no_grad():
            tn, xn = self._to_normalized(torch.from_numpy(t_arr), torch.from_numpy(x_arr))
            out = self._forward(tn, xn).numpy()
        return out if np.ndim(t) or np.ndim(x) else float(out[0])

    def derivatives(self, t, x):
        """(u, u_t, u_x, u_xx) at query points, in raw units."""
        check_is_fitted(self, "net_")
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        x_arr = np.atleast_1d(np.asarray(x, dtype=float))
        u, u_t, u_x, u_xx = self._derivatives_torch(
            torch.from_numpy(t_arr), torch.from_numpy(x_arr)
        )
        out = tuple(v.detach().numpy() for v in (u, u_t, u_x, u_xx))
        if np.ndim(t) == 0 and np.ndim(x) == 0:
            return tuple(float(v[0]) for v in out)
        return out

    # -- checkpointing ------------------------------------------------------

    def to_dict(self):
        check_is_fitted(self, "net_")
        cfg = self.config or FitConfig()
        state = {k: v.numpy().tolist() for k, v in self.net_.state_dict().items()}
        return {
            "config": {**asdict(cfg), "hidden_layers": list(cfg.hidden_layers),
                       "physics_library": list(cfg.physics_library)},
            "normalization": {
                "t_shift": self._t_shift,
                "t_scale": self._t_scale,
                "x_shift": self._x_shift,
                "x_scale": self._x_scale,
                "y_shift": self._y_shift,
                "y_scale": self._y_scale,
            },
            "weights": state,
            "train_bounds": self.train_bounds_,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def from_dict(cls, data):
        raw_cfg = dict(data["config"])
        raw_cfg["hidden_layers"] = tuple(raw_cfg["hidden_layers"])
        raw_cfg["physics_library"] = tuple(raw_cfg["physics_library"])
        cfg = FitConfig(**raw_cfg)
        model = cls(config=cfg)
        model.net_ = _make_net(cfg.hidden_layers, cfg.activation, cfg.seed)
        state = {k: torch.tensor(v, dtype=torch.float64) for k, v in data["weights"].items()}
        model.net_.load_state_dict(state)
        norm = data["normalization"]
        model._t_shift = norm["t_shift"]
        model._t_scale = norm["t_scale"]
        model._x_shift = norm["x_shift"]
        model._x_scale = norm["x_scale"]
        model._y_shift = norm["y_shift"]
        model._y_scale = norm["y_scale"]
        bounds = data.get("train_bounds")
        model.train_bounds_ = tuple(tuple(b) for b in bounds) if bounds else None
        model.loss_history_ = []
        model.converged_ = True
        return model

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def train_surface(path, config=None):
    """Fit a :class:`SurfaceFitter` on a trajectory window."""
    return SurfaceFitter(config=config or FitConfig()).fit(path)


def eval_derivatives(model, points):
    """(u, u_t, u_x, u_xx) arrays for an iterable of (t, x) query points."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must have shape (n, 2) with columns (t, x)")
    return model.derivatives(pts[:, 0], pts[:, 1])
