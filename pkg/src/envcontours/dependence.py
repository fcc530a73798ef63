"""Conditional extremes dependence model on standard Laplace margins.

Above a high conditioning threshold the conditioned variable satisfies
``z2 = alpha * z1 + z1**beta * W`` with ``alpha`` in [0, 1], ``beta <= 1`` and
residual W.  Estimation uses a working Gaussian likelihood for W (mean ``mu``,
variance ``zeta``); simulation resamples the empirical residuals instead of
drawing Gaussians, since the Gaussian form is an estimation device only.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from scipy.stats import laplace

from ._rng import as_generator
from .errors import FitError

_ZETA_FLOOR = 1e-12
_ALPHA_STARTS = (0.05, 0.4, 0.8)
_BETA_STARTS = (-0.2, 0.2, 0.6)


def _working_nll(params, z1, z2, bins, n_bins, penalty):
    """Profile negative log-likelihood over (per-bin alpha, beta).

    The residual mean and variance are profiled out in closed form, pooled
    over bins; constants independent of the parameters are dropped.
    """
    alpha = params[:n_bins]
    beta = params[n_bins]
    w = (z2 - alpha[bins] * z1) * z1 ** (-beta)
    mu = w.mean()
    zeta = max(float(np.mean((w - mu) ** 2)), _ZETA_FLOOR)
    nll = 0.5 * z1.size * np.log(zeta) + beta * np.log(z1).sum()
    if np.isfinite(penalty) and penalty > 0.0 and n_bins > 1:
        dev = alpha - alpha.mean()
        nll += penalty * float(np.sum(dev * dev))
    return nll


def _gaussian_loglik(z1, z2, alpha_of, beta, mu, zeta):
    """Working Gaussian log-likelihood of held-out pairs."""
    sd = np.sqrt(zeta) * z1**beta
    resid = z2 - alpha_of * z1 - mu * z1**beta
    return float(
        np.sum(-0.5 * np.log(2.0 * np.pi) - np.log(sd) - 0.5 * (resid / sd) ** 2)
    )


def _optimise(z1, z2, bins, n_bins, penalty, beta_min):
    bounds = [(0.0, 1.0)] * n_bins + [(beta_min, 1.0)]
    best = None
    for a0 in _ALPHA_STARTS:
        for b0 in _BETA_STARTS:
            res = minimize(
                _working_nll,
                np.array([a0] * n_bins + [b0]),
                args=(z1, z2, bins, n_bins, penalty),
                method="L-BFGS-B",
                bounds=bounds,
            )
            if best is None or res.fun < best.fun:
                best = res
    if best is None or not np.isfinite(best.fun):
        raise FitError("conditional extremes optimiser failed to converge")
    return best.x[:n_bins], float(best.x[n_bins])


@dataclass
class CEModel:
    """Fitted conditional extremes dependence for one conditioning direction."""

    cond: int
    kappa: float
    psi_l: float
    alpha: np.ndarray
    beta: float
    mu: float
    zeta: float
    residuals: np.ndarray = field(repr=False)
    penalty: float = 0.0
    beta_at_boundary: bool = False

    SCHEMA = "envcontours/ce@1"

    @property
    def n_bins(self) -> int:
        return self.alpha.size

    def self_consistency(self) -> dict:
        """Diagnostic on the fitted (alpha, beta) against the [0,1] x (-inf,1]
        self-consistency region; constraints are reported, not enforced."""
        return {
            "alpha_in_unit_interval": bool(
                np.all(self.alpha >= 0.0) and np.all(self.alpha <= 1.0)
            ),
            "alpha_at_upper_bound": bool(np.any(self.alpha >= 1.0 - 1e-9)),
            "beta_le_one": self.beta <= 1.0,
            "beta_at_boundary": self.beta_at_boundary,
        }

    def to_dict(self) -> dict:
        return {
            "schema": self.SCHEMA,
            "cond": self.cond,
            "kappa": self.kappa,
            "psi_l": self.psi_l,
            "alpha": self.alpha.tolist(),
            "beta": self.beta,
            "mu": self.mu,
            "zeta": self.zeta,
            "residuals": self.residuals.tolist(),
            "penalty": self.penalty,
            "beta_at_boundary": self.beta_at_boundary,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CEModel":
        if data.get("schema") != cls.SCHEMA:
            raise ValueError(f"unexpected schema tag {data.get('schema')!r}")
        return cls(
            cond=data["cond"],
            kappa=data["kappa"],
            psi_l=data["psi_l"],
            alpha=np.asarray(data["alpha"], dtype=float),
            beta=data["beta"],
            mu=data["mu"],
            zeta=data["zeta"],
            residuals=np.asarray(data["residuals"], dtype=float),
            penalty=data.get("penalty", 0.0),
            beta_at_boundary=data.get("beta_at_boundary", False),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "CEModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def fit_ce(
    z,
    cond: int = 0,
    kappa: float = 0.9,
    bins=None,
    penalty_grid=(0.0,),
    cv_folds: int = 10,
    seed: int = 0,
    min_exceedances: int = 20,
    beta_min: float = -3.0,
) -> CEModel:
    """Fit the conditional extremes model to Laplace-scale pairs.

    Parameters
    ----------
    z : (n, 2) array
        Standard-Laplace pairs, aligned index-for-index.
    cond : int
        Index (0 or 1) of the conditioning variable.
    kappa : float
        Conditioning quantile probability; the Laplace threshold is the
        standard Laplace quantile at ``kappa``.
    bins : int array, optional
        Covariate bin per pair.  The slope ``alpha`` varies across bins with
        its variation regularised by a cross-validated roughness penalty (same
        scheme as the marginal scales); ``beta`` stays constant over bins.
    penalty_grid : sequence
        Candidate penalty weights for the per-bin slopes; ignored for a
        single bin.

    Returns
    -------
    CEModel
        Fitted parameters together with the empirical residuals
        ``W = (z2 - alpha z1) / z1**beta`` retained for simulation.
    """
    z = np.asarray(z, dtype=float)
    if z.ndim != 2 or z.shape[1] != 2:
        raise ValueError("z must be an (n, 2) array")
    if not 0.0 < kappa < 1.0:
        raise ValueError("kappa must lie in (0, 1)")
    psi_l = float(laplace.ppf(kappa))
    mask = z[:, cond] > psi_l
    z1 = z[mask, cond]
    z2 = z[mask, 1 - cond]
    if bins is None:
        bin_exc = np.zeros(z1.size, dtype=int)
        n_bins = 1
    else:
        bin_exc = np.asarray(bins, dtype=int)[mask]
        n_bins = int(np.asarray(bins).max()) + 1
    counts = np.bincount(bin_exc, minlength=n_bins)
    if np.any(counts < min_exceedances):
        raise FitError(
            f"need at least {min_exceedances} conditioning exceedances per bin, "
            f"got {counts.tolist()}"
        )

    penalties = [float(p) for p in penalty_grid]
    if n_bins == 1 or len(penalties) == 1:
        selected = penalties[0] if len(penalties) == 1 else 0.0
    else:
        rng = as_generator(seed)
        order = rng.permutation(z1.size)
        fold_of = np.empty(z1.size, dtype=int)
        for f in range(cv_folds):
            fold_of[order[f::cv_folds]] = f
        scores = np.empty(len(penalties))
        for j, pen in enumerate(penalties):
            ll = 0.0
            for f in range(cv_folds):
                tr = fold_of != f
                a_f, b_f = _optimise(z1[tr], z2[tr], bin_exc[tr], n_bins, pen, beta_min)
                w = (z2[tr] - a_f[bin_exc[tr]] * z1[tr]) * z1[tr] ** (-b_f)
                mu_f, zeta_f = float(w.mean()), max(float(w.var()), _ZETA_FLOOR)
                te = ~tr
                ll += _gaussian_loglik(
                    z1[te], z2[te], a_f[bin_exc[te]], b_f, mu_f, zeta_f
                )
            scores[j] = ll
        eligible = [p for p, s in zip(penalties, scores) if s >= scores.max() - 0.1]
        selected = min(eligible)

    alpha, beta = _optimise(z1, z2, bin_exc, n_bins, selected, beta_min)
    w = (z2 - alpha[bin_exc] * z1) * z1 ** (-beta)
    at_boundary = beta >= 1.0 - 1e-6
    if at_boundary:
        warnings.warn("fitted beta sits at the upper boundary (1.0)", stacklevel=2)
    return CEModel(
        cond=cond,
        kappa=kappa,
        psi_l=psi_l,
        alpha=alpha,
        beta=beta,
        mu=float(w.mean()),
        zeta=max(float(w.var()), _ZETA_FLOOR),
        residuals=w,
        penalty=selected,
        beta_at_boundary=at_boundary,
    )


def simulate_ce(model: CEModel, z1, seed=None, bins=None):
    """Draw conditioned Laplace values given conditioning values ``z1 > psi_l``.

    Residuals are resampled uniformly with replacement from the stored
    empirical set (sorted first, so the draw is invariant to the order in
    which residuals were recorded).
    """
    z1 = np.asarray(z1, dtype=float)
    if np.any(z1 <= model.psi_l):
        raise ValueError("all conditioning values must exceed the Laplace threshold")
    if model.residuals.size == 0:
        raise FitError("model holds no residuals to resample")
    if bins is None:
        if model.n_bins > 1:
            raise ValueError("bin labels required for a multi-bin model")
        bins = np.zeros(z1.shape, dtype=int)
    rng = as_generator(seed)
    pool = np.sort(model.residuals)
    w = pool[rng.integers(0, pool.size, z1.size)]
    return model.alpha[bins] * z1 + z1**model.beta * w
