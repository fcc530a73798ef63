"""Synthetic environment generation under two joint (hs, tp) models.

Both generators expose ``sample_events(n, rng)`` so downstream contour and
response code is agnostic to which one produced the events:

* :class:`HierarchicalModel` - Weibull storm-peak hs with log-normal tp given
  hs, the classical factorised description.
* :class:`JointEnvModel` - covariate-binned composite marginals with
  conditional extremes dependence fitted on Laplace scale; the body of the
  distribution is resampled empirically and the joint tail is simulated under
  the dependence model, conditioning on whichever variable is largest on
  Laplace scale.

Joint-model draws are re-quantiled through the fitted composite marginal CDFs
with rank preservation, so simulated marginals follow the fitted marginals
exactly while the dependence structure (the ranks) comes from the conditional
extremes construction.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import curve_fit, minimize
from scipy.special import ndtr
from scipy.stats import norm, weibull_min

from ._rng import as_generator
from .dependence import CEModel, fit_ce, simulate_ce
from .errors import DegenerateDataError, FitError
from .marginal import MarginalModel, fit_gp_ppc, to_laplace


def _mu_form(h, a1, a2, a3):
    return a1 + a2 * h**a3


def _v_form(h, b1, b2, b3):
    return b1 + b2 * np.exp(-b3 * h)


@dataclass
class HierarchicalModel:
    """Weibull hs with log-normal tp | hs.

    ``ln tp | hs = h`` is normal with mean ``mu(h) = a1 + a2 h^a3`` and
    variance ``v(h) = b1 + b2 exp(-b3 h)``.
    """

    weib_shape: float
    weib_scale: float
    mu_coef: tuple
    v_coef: tuple
    rate: float | None = None
    storm_sizes: np.ndarray | None = field(repr=False, default=None)

    SCHEMA = "envcontours/hierarchical@1"

    def mu(self, h):
        return _mu_form(np.asarray(h, dtype=float), *self.mu_coef)

    def v(self, h):
        return _v_form(np.asarray(h, dtype=float), *self.v_coef)

    def hs_cdf(self, h):
        return weibull_min.cdf(h, self.weib_shape, scale=self.weib_scale)

    def hs_pdf(self, h):
        return weibull_min.pdf(h, self.weib_shape, scale=self.weib_scale)

    def tp_cdf_given(self, t, h):
        return norm.cdf((np.log(t) - self.mu(h)) / np.sqrt(self.v(h)))

    def joint_pdf(self, h, t):
        h = np.asarray(h, dtype=float)
        t = np.asarray(t, dtype=float)
        sd = np.sqrt(self.v(h))
        f_t = norm.pdf((np.log(t) - self.mu(h)) / sd) / (t * sd)
        return self.hs_pdf(h) * f_t

    def transform_from_u(self, u1, u2):
        """Rosenblatt inverse of a standard-normal pair.

        Mathematically ``h = F_hs^{-1}(Phi(u1))``, ``t = F_{tp|h}^{-1}(Phi(u2))``,
        computed through the normal survival function so tail precision is not
        lost in the probability round trip.
        """
        u1 = np.asarray(u1, dtype=float)
        u2 = np.asarray(u2, dtype=float)
        sf = ndtr(-u1)
        if np.any(sf == 0.0):
            warnings.warn("normal CDF saturated; clamping for extrapolation", stacklevel=2)
            sf = np.maximum(sf, 1e-300)
        h = self.weib_scale * (-np.log(sf)) ** (1.0 / self.weib_shape)
        t = np.exp(self.mu(h) + np.sqrt(self.v(h)) * u2)
        return h, t

    def sample_events(self, n: int, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        rng = as_generator(rng)
        u = rng.standard_normal((n, 2))
        h, t = self.transform_from_u(u[:, 0], u[:, 1])
        return h, t, np.zeros(n, dtype=int)

    def to_dict(self) -> dict:
        return {
            "schema": self.SCHEMA,
            "weib_shape": self.weib_shape,
            "weib_scale": self.weib_scale,
            "mu_coef": list(self.mu_coef),
            "v_coef": list(self.v_coef),
            "rate": self.rate,
            "storm_sizes": None if self.storm_sizes is None else self.storm_sizes.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "HierarchicalModel":
        if data.get("schema") != cls.SCHEMA:
            raise ValueError(f"unexpected schema tag {data.get('schema')!r}")
        return cls(
            weib_shape=data["weib_shape"],
            weib_scale=data["weib_scale"],
            mu_coef=tuple(data["mu_coef"]),
            v_coef=tuple(data["v_coef"]),
            rate=data.get("rate"),
            storm_sizes=None
            if data.get("storm_sizes") is None
            else np.asarray(data["storm_sizes"], dtype=int),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "HierarchicalModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def fit_hierarchical(
    hs,
    tp,
    min_peaks: int = 100,
    n_moment_bins: int = 15,
    rate: float | None = None,
    storm_sizes=None,
) -> HierarchicalModel:
    """Fit the hierarchical Weibull / log-normal model to storm peaks.

    The Weibull is fitted by maximum likelihood.  The conditional log-normal
    coefficient functions are first fitted by least squares on binned moments
    of ``ln tp`` (equal-count hs bins), then refined by joint maximum
    likelihood over all six coefficients.
    """
    hs = np.asarray(hs, dtype=float)
    tp = np.asarray(tp, dtype=float)
    if hs.size < min_peaks:
        raise FitError(f"need at least {min_peaks} peaks, got {hs.size}")
    if np.var(np.log(tp)) < 1e-10:
        raise DegenerateDataError("tp carries no variance; conditional model is degenerate")

    shape, _, scale = weibull_min.fit(hs, floc=0.0)

    # binned moments of ln tp against hs
    edges = np.quantile(hs, np.linspace(0.0, 1.0, n_moment_bins + 1))
    edges = np.unique(edges)
    idx = np.clip(np.searchsorted(edges, hs, side="right") - 1, 0, edges.size - 2)
    h_mid, m_mean, m_var = [], [], []
    for k in range(edges.size - 1):
        sel = idx == k
        if sel.sum() < 5:
            continue
        h_mid.append(hs[sel].mean())
        lt = np.log(tp[sel])
        m_mean.append(lt.mean())
        m_var.append(lt.var(ddof=1))
    h_mid = np.asarray(h_mid)
    m_mean = np.asarray(m_mean)
    m_var = np.maximum(np.asarray(m_var), 1e-8)
    if np.all(m_var < 1e-6):
        raise DegenerateDataError("conditional variance of ln tp is numerically zero")

    try:
        p_mu, _ = curve_fit(
            _mu_form, h_mid, m_mean,
            p0=[m_mean[0], max(m_mean[-1] - m_mean[0], 0.1), 0.5],
            bounds=([-10.0, -10.0, 0.05], [10.0, 10.0, 2.0]),
            maxfev=20000,
        )
        p_v, _ = curve_fit(
            _v_form, h_mid, m_var,
            p0=[max(m_var.min(), 1e-4), max(m_var.max() - m_var.min(), 1e-4), 0.3],
            bounds=([1e-6, 0.0, 1e-3], [5.0, 5.0, 5.0]),
            maxfev=20000,
        )
    except RuntimeError as exc:
        raise FitError(f"moment-stage least squares did not converge: {exc}") from exc

    lt = np.log(tp)

    def nll(theta):
        mu = _mu_form(hs, *theta[:3])
        v = _v_form(hs, *theta[3:])
        if np.any(v <= 0.0):
            return 1e12
        return float(np.sum(0.5 * np.log(v) + 0.5 * (lt - mu) ** 2 / v))

    res = minimize(
        nll,
        np.concatenate([p_mu, p_v]),
        method="Nelder-Mead",
        options={"maxiter": 4000, "xatol": 1e-8, "fatol": 1e-10},
    )
    if not res.success and res.fun >= 1e12:
        raise FitError("joint refinement of the conditional model did not converge")
    theta = res.x if res.fun <= nll(np.concatenate([p_mu, p_v])) else np.concatenate([p_mu, p_v])

    model = HierarchicalModel(
        weib_shape=float(shape),
        weib_scale=float(scale),
        mu_coef=tuple(float(c) for c in theta[:3]),
        v_coef=tuple(float(c) for c in theta[3:]),
        rate=rate,
        storm_sizes=None if storm_sizes is None else np.asarray(storm_sizes, dtype=int),
    )
    h_chk = np.linspace(hs.min(), hs.max(), 200)
    if np.any(model.v(h_chk) <= 0.0):
        raise FitError("fitted conditional variance is negative inside the data range")
    return model


# ---------------------------------------------------------------------------
# joint composite-marginal + conditional-extremes model

@dataclass
class JointEnvModel:
    """Fitted joint storm-peak environment: marginals, dependence, body."""

    marg_hs: MarginalModel
    marg_tp: MarginalModel
    ce: dict
    body: np.ndarray = field(repr=False)
    body_bins: np.ndarray = field(repr=False)
    p_tail: np.ndarray
    w_cond: np.ndarray
    bin_weights: np.ndarray
    rate: float | None = None
    storm_sizes: np.ndarray | None = field(repr=False, default=None)

    SCHEMA = "envcontours/envmodel@1"

    @property
    def n_bins(self) -> int:
        return self.bin_weights.size

    @classmethod
    def fit(
        cls,
        hs,
        tp,
        bins=None,
        tau: float = 0.8,
        kappa: float = 0.9,
        penalty_grid=(0.0, 1.0, 4.0, 16.0, 64.0, 256.0, float("inf")),
        cv_folds: int = 10,
        seed: int = 0,
        rate: float | None = None,
        storm_sizes=None,
        min_exceedances: int = 20,
    ) -> "JointEnvModel":
        """Fit marginals, transform to Laplace scale and fit both conditional
        extremes directions."""
        hs = np.asarray(hs, dtype=float)
        tp = np.asarray(tp, dtype=float)
        if bins is None:
            bins = np.zeros(hs.size, dtype=int)
        bins = np.asarray(bins, dtype=int)
        n_bins = int(bins.max()) + 1

        marg_hs = fit_gp_ppc(
            hs, tau=tau, bins=bins, n_bins=n_bins, penalty_grid=penalty_grid,
            cv_folds=cv_folds, seed=seed, min_exceedances=min_exceedances, variable="hs",
        )
        marg_tp = fit_gp_ppc(
            tp, tau=tau, bins=bins, n_bins=n_bins, penalty_grid=penalty_grid,
            cv_folds=cv_folds, seed=seed + 1, min_exceedances=min_exceedances, variable="tp",
        )
        z = np.column_stack([
            to_laplace(marg_hs, hs, bins), to_laplace(marg_tp, tp, bins)
        ])
        ce = {
            q: fit_ce(
                z, cond=q, kappa=kappa, bins=bins if n_bins > 1 else None,
                penalty_grid=penalty_grid if n_bins > 1 else (0.0,),
                cv_folds=cv_folds, seed=seed + 2 + q, min_exceedances=min_exceedances,
            )
            for q in (0, 1)
        }

        psi_l = ce[0].psi_l
        zmax = z.max(axis=1)
        tail = zmax > psi_l
        p_tail = np.empty(n_bins)
        w_cond = np.empty(n_bins)
        counts = np.bincount(bins, minlength=n_bins)
        for k in range(n_bins):
            in_bin = bins == k
            p_tail[k] = np.mean(tail[in_bin])
            tk = tail & in_bin
            w_cond[k] = np.mean(z[tk, 0] >= z[tk, 1]) if tk.any() else 0.5
        return cls(
            marg_hs=marg_hs,
            marg_tp=marg_tp,
            ce=ce,
            body=z[~tail],
            body_bins=bins[~tail],
            p_tail=p_tail,
            w_cond=w_cond,
            bin_weights=counts / counts.sum(),
            rate=rate,
            storm_sizes=None if storm_sizes is None else np.asarray(storm_sizes, dtype=int),
        )

    # -- simulation ---------------------------------------------------------

    def _simulate_laplace_bin(self, n: int, k: int, rng) -> np.ndarray:
        """Joint Laplace pairs for one covariate bin: empirical body plus
        conditional-extremes tail, conditioning on the larger component."""
        psi_l = self.ce[0].psi_l
        n_tail = rng.binomial(n, self.p_tail[k])
        body_pool = self.body[self.body_bins == k]
        if body_pool.size == 0 and n - n_tail > 0:
            raise FitError(f"bin {k} holds no body observations to resample")
        parts = [body_pool[rng.integers(0, len(body_pool), n - n_tail)]]
        n0 = rng.binomial(n_tail, self.w_cond[k])
        for q, nq in ((0, n0), (1, n_tail - n0)):
            model = self.ce[q]
            pool = np.sort(model.residuals)
            chunks, need = [], nq
            while need > 0:
                m = max(int(need * 2.5), 64)
                z1 = psi_l + rng.exponential(size=m)
                w = pool[rng.integers(0, pool.size, m)]
                z2 = model.alpha[k if model.n_bins > 1 else 0] * z1 + z1**model.beta * w
                keep = z2 <= z1  # conditioning variable must be the larger
                pair = np.column_stack([z1[keep], z2[keep]])[:need]
                chunks.append(pair)
                need -= len(pair)
            zq = np.concatenate(chunks) if chunks else np.empty((0, 2))
            if q == 1:
                zq = zq[:, ::-1]
            parts.append(zq)
        return np.concatenate(parts)

    def sample_events(self, n: int, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Draw ``n`` joint (hs, tp) storm-peak events.

        Dependence ranks come from the Laplace-scale simulation; values are
        re-quantiled through the fitted composite marginals with an i.i.d.
        sorted-uniform draw, so each marginal is an exact sample from its
        fitted CDF.
        """
        rng = as_generator(rng)
        counts = rng.multinomial(n, self.bin_weights)
        hs_parts, tp_parts, bin_parts = [], [], []
        for k in range(self.n_bins):
            nk = int(counts[k])
            if nk == 0:
                continue
            z = self._simulate_laplace_bin(nk, k, rng)
            labels = np.full(nk, k, dtype=int)
            out = np.empty_like(z)
            for j, marg in ((0, self.marg_hs), (1, self.marg_tp)):
                ranks = np.argsort(np.argsort(z[:, j], kind="stable"), kind="stable")
                u = np.sort(rng.uniform(size=nk))
                out[:, j] = marg.ppf(u[ranks], labels)
            hs_parts.append(out[:, 0])
            tp_parts.append(out[:, 1])
            bin_parts.append(labels)
        return (
            np.concatenate(hs_parts) if hs_parts else np.empty(0),
            np.concatenate(tp_parts) if tp_parts else np.empty(0),
            np.concatenate(bin_parts) if bin_parts else np.empty(0, dtype=int),
        )

    def sample_laplace(self, n: int, rng) -> np.ndarray:
        """Laplace-scale pairs prior to marginal re-quantiling (single bin)."""
        if self.n_bins > 1:
            raise ValueError("laplace-scale sampling is exposed for single-bin models")
        return self._simulate_laplace_bin(n, 0, as_generator(rng))

    def to_dict(self) -> dict:
        return {
            "schema": self.SCHEMA,
            "marg_hs": self.marg_hs.to_dict(),
            "marg_tp": self.marg_tp.to_dict(),
            "ce": {str(q): m.to_dict() for q, m in self.ce.items()},
            "body": self.body.tolist(),
            "body_bins": self.body_bins.tolist(),
            "p_tail": self.p_tail.tolist(),
            "w_cond": self.w_cond.tolist(),
            "bin_weights": self.bin_weights.tolist(),
            "rate": self.rate,
            "storm_sizes": None if self.storm_sizes is None else self.storm_sizes.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "JointEnvModel":
        if data.get("schema") != cls.SCHEMA:
            raise ValueError(f"unexpected schema tag {data.get('schema')!r}")
        return cls(
            marg_hs=MarginalModel.from_dict(data["marg_hs"]),
            marg_tp=MarginalModel.from_dict(data["marg_tp"]),
            ce={int(q): CEModel.from_dict(m) for q, m in data["ce"].items()},
            body=np.asarray(data["body"], dtype=float).reshape(-1, 2),
            body_bins=np.asarray(data["body_bins"], dtype=int),
            p_tail=np.asarray(data["p_tail"], dtype=float),
            w_cond=np.asarray(data["w_cond"], dtype=float),
            bin_weights=np.asarray(data["bin_weights"], dtype=float),
            rate=data.get("rate"),
            storm_sizes=None
            if data.get("storm_sizes") is None
            else np.asarray(data["storm_sizes"], dtype=int),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "JointEnvModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def model_hash(model) -> str:
    """Stable content hash of a serialisable model."""
    payload = json.dumps(model.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()[:16]


# ---------------------------------------------------------------------------
# realisations

@dataclass
class EnvRealisation:
    """One synthetic history of storm-peak events."""

    years: float
    hs: np.ndarray
    tp: np.ndarray
    n_states: np.ndarray
    bins: np.ndarray
    seed_info: dict

    @property
    def n_events(self) -> int:
        return self.hs.size

    def save(self, path, model=None) -> None:
        """CSV of events plus a JSON sidecar (model hash, seed, duration)."""
        path = Path(path)
        header = "event,hs,tp,n_states"
        table = np.column_stack([
            np.arange(self.n_events), self.hs, self.tp, self.n_states
        ])
        np.savetxt(path, table, fmt=["%d", "%.10g", "%.10g", "%d"],
                   delimiter=",", header=header, comments="")
        sidecar = {
            "duration_years": self.years,
            "n_events": self.n_events,
            "seed": self.seed_info,
            "model_hash": None if model is None else model_hash(model),
        }
        path.with_suffix(path.suffix + ".json").write_text(
            json.dumps(sidecar, sort_keys=True), encoding="utf-8"
        )


def simulate_environment(
    model,
    years: float,
    rate: float | None = None,
    seed=None,
    storm_sizes=None,
) -> EnvRealisation:
    """Simulate a storm-peak history of the given duration.

    The event count is Poisson with mean ``rate * years``; events come from
    ``model.sample_events``.  Storm sizes (sea states per storm) are resampled
    from ``storm_sizes`` (or the model's stored sizes); a storm defaults to
    one sea state when no size information exists.
    """
    if years <= 0.0:
        raise ValueError("years must be positive")
    rate = rate if rate is not None else getattr(model, "rate", None)
    if rate is None or rate <= 0.0:
        raise ValueError("a positive storm rate is required")
    rng = as_generator(seed)
    n = int(rng.poisson(rate * years))
    hs, tp, bins = model.sample_events(n, rng)
    sizes = storm_sizes if storm_sizes is not None else getattr(model, "storm_sizes", None)
    if sizes is None:
        n_states = np.ones(n, dtype=int)
    else:
        sizes = np.asarray(sizes, dtype=int)
        n_states = sizes[rng.integers(0, sizes.size, n)]
    return EnvRealisation(
        years=float(years),
        hs=hs,
        tp=tp,
        n_states=n_states,
        bins=bins,
        seed_info={"seed": None if isinstance(seed, np.random.Generator) else seed},
    )
